//! Scenario files (TOML) and their validated in-memory form.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_pd, is_psd, matrix_from_rows, BoxSet};
use crate::model::{synthesize_terminal, AgentModel, Dynamics, LinearDynamics, SynthesisOptions, TerminalIngredients, Unicycle};
use crate::ocp::CostWeights;
use crate::trigger::Variant;
use crate::AgentId;

/// Scenarios compiled into the binary, by name.
pub const BUNDLED: &[(&str, &str)] = &[("paper_sec5", include_str!("../scenarios/paper_sec5.toml"))];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Initial prediction horizon.
    pub n0: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Replay the single current input in the partial and covering
    /// neighbour cases instead of time-indexed inputs.
    #[serde(default)]
    pub literal_case23: bool,
    pub agents: Vec<AgentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: AgentId,
    pub initial_state: Vec<f64>,
    pub sigma: f64,
    pub eta: f64,
    pub lipschitz_open: f64,
    pub lipschitz_closed: f64,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub model: ModelConfig,
    pub state_box: BoxSet,
    pub input_box: BoxSet,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub neighbors: Vec<NeighborConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Unicycle { sample_period: f64 },
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Given {
        p: Vec<Vec<f64>>,
        k: Vec<Vec<f64>>,
        r: f64,
        f: f64,
    },
    Synthesize {
        #[serde(default = "default_inflation")]
        inflation: f64,
        #[serde(default = "default_f_ratio")]
        f_ratio: f64,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_inflation() -> f64 {
    1.01
}

fn default_f_ratio() -> f64 {
    0.5
}

fn default_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborConfig {
    pub id: AgentId,
    pub q_ij: Vec<Vec<f64>>,
}

/// Parses scenario text; `origin` only labels errors.
pub fn parse_scenario(text: &str, origin: &str) -> Result<ScenarioConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Load {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Load {
        path: origin.to_string(),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario(&text, &path.display().to_string())
}

/// A bundled scenario name or a path to a scenario file.
pub fn resolve_scenario(name_or_path: &str) -> Result<ScenarioConfig> {
    match bundled(name_or_path) {
        Some(text) => parse_scenario(text, name_or_path),
        None => load_scenario(Path::new(name_or_path)),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str, shape: (usize, usize)) -> Result<DMatrix<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::Validation(format!(
            "{what} must be {}x{}",
            shape.0, shape.1
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{what} has non-finite entries")));
    }
    Ok(matrix_from_rows(rows))
}

impl ModelConfig {
    fn dynamics(&self) -> Result<Arc<dyn Dynamics>> {
        match self {
            ModelConfig::Unicycle { sample_period } => {
                if !(*sample_period > 0.0) {
                    return Err(Error::Validation("sample_period must be positive".into()));
                }
                Ok(Arc::new(Unicycle {
                    sample_period: *sample_period,
                }))
            }
            ModelConfig::Linear { a, b } => {
                let n = a.len();
                let m = b.first().map_or(0, Vec::len);
                Ok(Arc::new(LinearDynamics::new(
                    matrix(a, "model.a", (n, n))?,
                    matrix(b, "model.b", (n, m))?,
                )?))
            }
        }
    }
}

impl AgentConfig {
    fn build_model(&self) -> Result<AgentModel> {
        let dynamics = self.model.dynamics()?;
        let mut model = AgentModel::new(
            self.id,
            dynamics,
            self.state_box.clone(),
            self.input_box.clone(),
            self.eta,
            self.lipschitz_open,
            self.lipschitz_closed,
        )
        .map_err(|e| Error::Validation(format!("agent {}: {e}", self.id)))?;
        if let ModelConfig::Unicycle { sample_period } = self.model {
            model = model.with_sample_period(sample_period);
        }
        Ok(model)
    }

    fn weights(&self, n: usize, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let q = matrix(&self.q, &format!("agent {} q", self.id), (n, n))?;
        let r = matrix(&self.r, &format!("agent {} r", self.id), (m, m))?;
        if !is_psd(&q) {
            return Err(Error::Validation(format!("agent {}: Q is not positive semi-definite", self.id)));
        }
        if !is_pd(&r) {
            return Err(Error::Validation(format!("agent {}: R is not positive definite", self.id)));
        }
        Ok((q, r))
    }

    fn terminal(&self, model: &AgentModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<TerminalIngredients> {
        let n = model.dim_x();
        let m = model.dim_u();
        match &self.terminal {
            TerminalConfig::Given { p, k, r: rr, f } => TerminalIngredients::new(
                matrix(p, &format!("agent {} terminal.p", self.id), (n, n))?,
                matrix(k, &format!("agent {} terminal.k", self.id), (m, n))?,
                q,
                r,
                *rr,
                *f,
            )
            .map_err(|e| Error::Validation(format!("agent {}: {e}", self.id))),
            TerminalConfig::Synthesize {
                inflation,
                f_ratio,
                samples,
                seed,
            } => synthesize_terminal(
                model,
                q,
                r,
                &SynthesisOptions {
                    inflation: *inflation,
                    f_ratio: *f_ratio,
                    samples: *samples,
                    seed: *seed,
                    ..Default::default()
                },
            ),
        }
    }
}

impl ScenarioConfig {
    /// Structural checks that need no matrix algebra beyond definiteness.
    /// Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.agents.is_empty() {
            return Err(Error::Validation("scenario has no agents".into()));
        }
        if self.n0 == 0 {
            return Err(Error::Validation("n0 must be ≥ 1".into()));
        }
        let ids: BTreeSet<AgentId> = self.agents.iter().map(|a| a.id).collect();
        if ids.len() != self.agents.len() {
            return Err(Error::Validation("agent ids must be unique".into()));
        }
        for a in &self.agents {
            let model = a.build_model()?;
            let (n, m) = (model.dim_x(), model.dim_u());
            a.weights(n, m)?;
            if a.initial_state.len() != n {
                return Err(Error::Validation(format!(
                    "agent {}: initial_state has {} entries, expected {n}",
                    a.id,
                    a.initial_state.len()
                )));
            }
            if !model.state_box.contains(&DVector::from_column_slice(&a.initial_state)) {
                return Err(Error::Validation(format!("agent {}: initial state outside the state box", a.id)));
            }
            if !(a.sigma > 0.0 && a.sigma < 1.0) {
                return Err(Error::Validation(format!("agent {}: sigma must lie in (0, 1)", a.id)));
            }
            let mut seen = BTreeSet::new();
            for nb in &a.neighbors {
                if nb.id == a.id {
                    return Err(Error::Validation(format!("agent {} lists itself as a neighbour", a.id)));
                }
                if !ids.contains(&nb.id) {
                    return Err(Error::Validation(format!("agent {}: unknown neighbour {}", a.id, nb.id)));
                }
                if !seen.insert(nb.id) {
                    return Err(Error::Validation(format!("agent {}: duplicate neighbour {}", a.id, nb.id)));
                }
                let q_ij = matrix(&nb.q_ij, &format!("agent {} q_ij for {}", a.id, nb.id), (n, n))?;
                if !is_psd(&q_ij) {
                    return Err(Error::Validation(format!(
                        "agent {}: coupling weight for {} is not positive semi-definite",
                        a.id, nb.id
                    )));
                }
            }
            if let TerminalConfig::Synthesize { f_ratio, .. } = a.terminal {
                if !(f_ratio > 0.0 && f_ratio < 1.0) {
                    return Err(Error::Validation(format!("agent {}: f_ratio must lie in (0, 1)", a.id)));
                }
            }
        }
        let mut warnings = Vec::new();
        if !self.strongly_connected() {
            let w = format!("scenario `{}`: communication graph is not strongly connected", self.name);
            log::warn!("{w}");
            warnings.push(w);
        }
        Ok(warnings)
    }

    /// Whether every agent reaches every other along neighbour edges.
    pub fn strongly_connected(&self) -> bool {
        let mut fwd: BTreeMap<AgentId, Vec<AgentId>> = BTreeMap::new();
        let mut bwd: BTreeMap<AgentId, Vec<AgentId>> = BTreeMap::new();
        for a in &self.agents {
            for nb in &a.neighbors {
                fwd.entry(nb.id).or_default().push(a.id);
                bwd.entry(a.id).or_default().push(nb.id);
            }
        }
        let start = self.agents[0].id;
        let reach = |adj: &BTreeMap<AgentId, Vec<AgentId>>| {
            let mut seen = BTreeSet::from([start]);
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for w in adj.get(&v).into_iter().flatten() {
                    if seen.insert(*w) {
                        stack.push(*w);
                    }
                }
            }
            seen.len()
        };
        reach(&fwd) == self.agents.len() && reach(&bwd) == self.agents.len()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(format!("cannot serialize scenario: {e}")))
    }

    /// Validates and instantiates models, weights and terminal ingredients.
    pub fn build(&self) -> Result<Scenario> {
        let warnings = self.validate()?;
        let mut agents = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            let model = a.build_model()?;
            let (q, r) = a.weights(model.dim_x(), model.dim_u())?;
            let terminal = a.terminal(&model, &q, &r)?;
            let coupling = a.neighbors.iter().map(|nb| matrix_from_rows(&nb.q_ij)).collect();
            let weights = CostWeights::new(q, r, terminal.p.clone(), coupling)?;
            agents.push(AgentSpec {
                model,
                terminal,
                weights,
                neighbors: a.neighbors.iter().map(|nb| nb.id).collect(),
                sigma: a.sigma,
                x0: DVector::from_column_slice(&a.initial_state),
            });
        }
        Ok(Scenario {
            name: self.name.clone(),
            agents,
            n0: self.n0,
            max_steps: self.max_steps,
            seed: self.seed,
            variant: self.variant,
            literal_case23: self.literal_case23,
            warnings,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub model: AgentModel,
    pub terminal: TerminalIngredients,
    /// Coupling weights follow the order of `neighbors`.
    pub weights: CostWeights,
    pub neighbors: Vec<AgentId>,
    pub sigma: f64,
    pub x0: DVector<f64>,
}

impl AgentSpec {
    pub fn id(&self) -> AgentId {
        self.model.id
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub agents: Vec<AgentSpec>,
    pub n0: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub variant: Variant,
    pub literal_case23: bool,
    pub warnings: Vec<String>,
}

impl Scenario {
    pub fn index_of(&self, id: AgentId) -> Option<usize> {
        self.agents.iter().position(|a| a.id() == id)
    }
}
