//! The per-agent optimal control problem, its single-shooting transcription,
//! the cost cap thresholds and the shifted candidate sequence.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_pd, is_psd, quad_form, sqrt_max_eigenvalue, BoxSet};
use crate::model::{AgentModel, TerminalIngredients};
use crate::solver::{self, ConstrainedProblem, SolveStatus, SolverOptions};
use crate::trigger::TriggerDecision;

/// Absolute tolerance on the cost cap.
pub const GAMMA_TOLERANCE: f64 = 1e-6;
/// Absolute tolerance on `‖x_N‖²_P ≤ f²`.
pub const TERMINAL_TOLERANCE: f64 = 1e-9;
/// Absolute tolerance on the tightened state boxes and the input box.
pub const BOX_TOLERANCE: f64 = 1e-9;

// Margins the solver works with so that converged points are strictly
// inside the true constraints.
const BOX_BACKOFF: f64 = 1e-9;
const TERMINAL_BACKOFF: f64 = 1e-8;
const CAP_BACKOFF: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// One coupling weight per neighbour reference, in reference order.
    pub coupling: Vec<DMatrix<f64>>,
}

impl CostWeights {
    pub fn new(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p: DMatrix<f64>,
        coupling: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if !is_psd(&q) {
            return Err(Error::Validation("Q is not positive semi-definite".into()));
        }
        if !is_pd(&r) {
            return Err(Error::Validation("R is not positive definite".into()));
        }
        if !is_psd(&p) {
            return Err(Error::Validation("P is not positive semi-definite".into()));
        }
        if let Some(bad) = coupling.iter().position(|m| !is_psd(m)) {
            return Err(Error::Validation(format!(
                "coupling weight #{bad} is not positive semi-definite"
            )));
        }
        Ok(Self { q, r, p, coupling })
    }
}

/// `𝒳 ⊖ {‖e‖_P ≤ l η λ̄(√P) (1+L)^{l−1}}`.
pub fn tighten_state_set(model: &AgentModel, terminal: &TerminalIngredients, l: usize) -> Result<BoxSet> {
    if l == 0 {
        return Err(Error::Domain("tightening is defined for l ≥ 1".into()));
    }
    let radius = l as f64
        * model.eta
        * sqrt_max_eigenvalue(&terminal.p)
        * (1.0 + model.lipschitz_open).powi(l as i32 - 1);
    let p_inv = terminal
        .p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Validation("terminal weight P is singular".into()))?;
    let margins: Vec<f64> = (0..p_inv.nrows())
        .map(|c| radius * p_inv[(c, c)].max(0.0).sqrt())
        .collect();
    let shrunk = model.state_box.shrink(&margins);
    if shrunk.is_empty() {
        return Err(Error::TighteningInfeasible { step: l });
    }
    Ok(shrunk)
}

/// Tightened boxes for `l = 1 .. n−1`.
pub fn tightened_sets(model: &AgentModel, terminal: &TerminalIngredients, n: usize) -> Result<Vec<BoxSet>> {
    (1..n).map(|l| tighten_state_set(model, terminal, l)).collect()
}

#[derive(Debug, Clone)]
pub struct OcpProblem {
    /// Trigger instant.
    pub origin: usize,
    pub horizon: usize,
    pub x0: DVector<f64>,
    /// Presumed neighbour states, each with at least `horizon` entries.
    pub references: Vec<Vec<DVector<f64>>>,
    /// Boxes for prediction steps `1 .. horizon−1`.
    pub tightened_state_sets: Vec<BoxSet>,
    pub terminal_radius: f64,
    /// Absent at the first solve.
    pub gamma_cap: Option<f64>,
}

impl OcpProblem {
    fn validate(&self, model: &AgentModel, weights: &CostWeights) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Domain("OCP horizon must be ≥ 1".into()));
        }
        if self.x0.len() != model.dim_x() {
            return Err(Error::Validation("x0 dimension mismatch".into()));
        }
        if self.tightened_state_sets.len() != self.horizon - 1 {
            return Err(Error::Validation(format!(
                "expected {} tightened sets, got {}",
                self.horizon - 1,
                self.tightened_state_sets.len()
            )));
        }
        if self.references.len() != weights.coupling.len() {
            return Err(Error::Validation(
                "one coupling weight per neighbour reference is required".into(),
            ));
        }
        if self.references.iter().any(|r| r.len() < self.horizon) {
            return Err(Error::Validation("neighbour reference shorter than the horizon".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub u_opt: Vec<DVector<f64>>,
    pub x_opt: Vec<DVector<f64>>,
    pub j_total: f64,
    pub j_s: f64,
    pub j_c: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Nominal states `x_0 .. x_N` under `us`.
pub fn rollout(model: &AgentModel, x0: &DVector<f64>, us: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let mut xs = Vec::with_capacity(us.len() + 1);
    xs.push(x0.clone());
    for u in us {
        let next = model.step(xs.last().unwrap(), u)?;
        xs.push(next);
    }
    Ok(xs)
}

/// `Σ_{l<N} (‖x_l‖²_Q + ‖u_l‖²_R) + ‖x_N‖²_P`.
pub fn egoistic_cost(xs: &[DVector<f64>], us: &[DVector<f64>], weights: &CostWeights) -> f64 {
    let n = us.len();
    let stage: f64 = (0..n)
        .map(|l| quad_form(&xs[l], &weights.q) + quad_form(&us[l], &weights.r))
        .sum();
    stage + quad_form(&xs[n], &weights.p)
}

/// `Σ_{l<N} Σ_j ‖x_l − ref_j[l]‖²_{Q_ij}`.
pub fn coupling_cost(xs: &[DVector<f64>], references: &[Vec<DVector<f64>>], weights: &CostWeights) -> f64 {
    let n = xs.len() - 1;
    references
        .iter()
        .zip(&weights.coupling)
        .map(|(re, w)| (0..n).map(|l| quad_form(&(&xs[l] - &re[l]), w)).sum::<f64>())
        .sum()
}

/// Worst violation of each constraint group, all in absolute units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintReport {
    pub input: f64,
    pub state: f64,
    /// `‖x_N‖²_P − f²`.
    pub terminal: f64,
    /// `J_s − γ`, or `−∞` without a cap.
    pub cap: f64,
}

impl ConstraintReport {
    pub fn is_feasible(&self) -> bool {
        self.input <= BOX_TOLERANCE
            && self.state <= BOX_TOLERANCE
            && self.terminal <= TERMINAL_TOLERANCE
            && self.cap <= GAMMA_TOLERANCE
    }
}

/// Evaluates every constraint of `problem` at the input sequence `us`.
pub fn check_constraints(
    problem: &OcpProblem,
    model: &AgentModel,
    weights: &CostWeights,
    us: &[DVector<f64>],
) -> Result<ConstraintReport> {
    if us.len() != problem.horizon {
        return Err(Error::Validation(format!(
            "input sequence has {} entries, horizon is {}",
            us.len(),
            problem.horizon
        )));
    }
    let xs = rollout(model, &problem.x0, us)?;
    let input = us.iter().map(|u| model.input_box.violation(u)).fold(0.0, f64::max);
    let state = problem
        .tightened_state_sets
        .iter()
        .enumerate()
        .map(|(i, b)| b.violation(&xs[i + 1]))
        .fold(0.0, f64::max);
    let f = problem.terminal_radius;
    let terminal = quad_form(&xs[problem.horizon], &weights.p) - f * f;
    let cap = match problem.gamma_cap {
        Some(g) => egoistic_cost(&xs, us, weights) - g,
        None => f64::NEG_INFINITY,
    };
    Ok(ConstraintReport {
        input,
        state,
        terminal,
        cap,
    })
}

/// Single-shooting transcription: decision vector `[u_0; …; u_{N−1}]`.
struct Shooting<'a> {
    problem: &'a OcpProblem,
    model: &'a AgentModel,
    weights: &'a CostWeights,
    lo: DVector<f64>,
    hi: DVector<f64>,
    cap_scale: f64,
}

impl<'a> Shooting<'a> {
    fn new(problem: &'a OcpProblem, model: &'a AgentModel, weights: &'a CostWeights) -> Self {
        let m = model.dim_u();
        let n = problem.horizon;
        let lo = DVector::from_fn(n * m, |i, _| model.input_box.lower[i % m]);
        let hi = DVector::from_fn(n * m, |i, _| model.input_box.upper[i % m]);
        let cap_scale = problem.gamma_cap.map_or(1.0, |g| g.abs().max(1e-4));
        Self {
            problem,
            model,
            weights,
            lo,
            hi,
            cap_scale,
        }
    }

    fn inputs(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        let m = self.model.dim_u();
        (0..self.problem.horizon)
            .map(|l| z.rows(l * m, m).into_owned())
            .collect()
    }

    fn flatten(us: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(us.iter().map(|u| u.len()).sum(), us.iter().flat_map(|u| u.iter().copied()))
    }
}

impl ConstrainedProblem for Shooting<'_> {
    fn lower(&self) -> &DVector<f64> {
        &self.lo
    }

    fn upper(&self) -> &DVector<f64> {
        &self.hi
    }

    fn num_constraints(&self) -> usize {
        2 * self.model.dim_x() * self.problem.tightened_state_sets.len()
            + 1
            + usize::from(self.problem.gamma_cap.is_some())
    }

    fn values(&self, z: &DVector<f64>) -> Result<(f64, Vec<f64>)> {
        let us = self.inputs(z);
        let xs = rollout(self.model, &self.problem.x0, &us)?;
        let js = egoistic_cost(&xs, &us, self.weights);
        let jc = coupling_cost(&xs, &self.problem.references, self.weights);
        let mut c = Vec::with_capacity(self.num_constraints());
        for (i, b) in self.problem.tightened_state_sets.iter().enumerate() {
            let x = &xs[i + 1];
            for d in 0..x.len() {
                c.push(x[d] - b.upper[d] + BOX_BACKOFF);
                c.push(b.lower[d] - x[d] + BOX_BACKOFF);
            }
        }
        let f2 = self.problem.terminal_radius.powi(2);
        c.push((quad_form(&xs[self.problem.horizon], &self.weights.p) - f2) / f2 + TERMINAL_BACKOFF);
        if let Some(g) = self.problem.gamma_cap {
            c.push((js - g) / self.cap_scale + CAP_BACKOFF);
        }
        Ok((js + jc, c))
    }

    fn gradient(&self, z: &DVector<f64>, w: &[f64]) -> Result<DVector<f64>> {
        let n = self.problem.horizon;
        let nx = self.model.dim_x();
        let m = self.model.dim_u();
        let us = self.inputs(z);
        let xs = rollout(self.model, &self.problem.x0, &us)?;
        let w_cap = if self.problem.gamma_cap.is_some() {
            w[w.len() - 1] / self.cap_scale
        } else {
            0.0
        };
        let js_factor = 1.0 + w_cap;
        let f2 = self.problem.terminal_radius.powi(2);
        let w_term = w[2 * nx * self.problem.tightened_state_sets.len()];

        // ∂/∂x_l of everything that touches x_l directly.
        let mut dx: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
        for l in 0..=n {
            let x = &xs[l];
            let mut g = if l < n {
                &self.weights.q * x * (2.0 * js_factor)
            } else {
                &self.weights.p * x * (2.0 * js_factor + 2.0 * w_term / f2)
            };
            if l < n {
                for (re, q) in self.problem.references.iter().zip(&self.weights.coupling) {
                    g += q * (x - &re[l]) * 2.0;
                }
            }
            if l >= 1 && l < n {
                let base = 2 * nx * (l - 1);
                for d in 0..nx {
                    g[d] += w[base + 2 * d] - w[base + 2 * d + 1];
                }
            }
            dx.push(g);
        }
        let mut grad = DVector::zeros(n * m);
        let mut adj = dx[n].clone();
        for l in (0..n).rev() {
            let (a, b) = self.model.dynamics.jacobians(&xs[l], &us[l]);
            let gu = &self.weights.r * &us[l] * (2.0 * js_factor) + b.transpose() * &adj;
            grad.rows_mut(l * m, m).copy_from(&gu);
            adj = &dx[l] + a.transpose() * &adj;
        }
        Ok(grad)
    }
}

fn solution_from_inputs(
    problem: &OcpProblem,
    model: &AgentModel,
    weights: &CostWeights,
    us: Vec<DVector<f64>>,
    status: SolveStatus,
    iterations: usize,
) -> Result<OcpSolution> {
    let xs = rollout(model, &problem.x0, &us)?;
    let j_s = egoistic_cost(&xs, &us, weights);
    let j_c = coupling_cost(&xs, &problem.references, weights);
    Ok(OcpSolution {
        u_opt: us,
        x_opt: xs,
        j_total: j_s + j_c,
        j_s,
        j_c,
        status,
        iterations,
    })
}

/// Solves the problem from `warm_start` (zeros when absent). A truly
/// feasible warm start is returned unchanged if the solver cannot improve
/// on it.
pub fn solve(
    problem: &OcpProblem,
    model: &AgentModel,
    weights: &CostWeights,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<OcpSolution> {
    problem.validate(model, weights)?;
    let shooting = Shooting::new(problem, model, weights);
    let z0 = match warm_start {
        Some(us) => {
            if us.len() != problem.horizon || us.iter().any(|u| u.len() != model.dim_u()) {
                return Err(Error::Validation("warm start has the wrong shape".into()));
            }
            Shooting::flatten(us)
        }
        None => DVector::zeros(problem.horizon * model.dim_u()),
    };
    let res = solver::solve(&shooting, &z0, &SolverOptions::default())?;
    let us = shooting.inputs(&res.z);
    // The true tolerances decide feasibility in both directions.
    let feasible = check_constraints(problem, model, weights, &us)?.is_feasible();
    let status = match (res.status, feasible) {
        (_, false) => SolveStatus::Infeasible,
        (SolveStatus::Infeasible, true) => SolveStatus::FeasibleSuboptimal,
        (s, true) => s,
    };
    let sol = solution_from_inputs(problem, model, weights, us, status, res.iterations)?;
    if let Some(ws) = warm_start {
        if check_constraints(problem, model, weights, ws)?.is_feasible() {
            let start = solution_from_inputs(
                problem,
                model,
                weights,
                ws.to_vec(),
                SolveStatus::FeasibleSuboptimal,
                res.iterations,
            )?;
            if sol.status == SolveStatus::Infeasible || start.j_total < sol.j_total {
                return Ok(start);
            }
        }
    }
    Ok(sol)
}

/// Solves from each start in order and keeps the feasible solution with the
/// lowest total cost (the first one on ties).
pub fn solve_multistart(
    problem: &OcpProblem,
    model: &AgentModel,
    weights: &CostWeights,
    starts: &[Vec<DVector<f64>>],
) -> Result<OcpSolution> {
    let mut best: Option<OcpSolution> = None;
    for start in starts {
        let sol = solve(problem, model, weights, Some(start))?;
        let better = match &best {
            None => true,
            Some(b) => match (b.status == SolveStatus::Infeasible, sol.status == SolveStatus::Infeasible) {
                (true, false) => true,
                (false, true) => false,
                _ => sol.j_total < b.j_total,
            },
        };
        if better {
            best = Some(sol);
        }
    }
    best.ok_or_else(|| Error::Validation("no start given".into()))
}

/// Inputs of the terminal feedback applied from `x0`, clipped to the input box.
pub fn feedback_rollout_inputs(
    model: &AgentModel,
    terminal: &TerminalIngredients,
    x0: &DVector<f64>,
    n: usize,
) -> Result<Vec<DVector<f64>>> {
    let mut x = x0.clone();
    let mut us = Vec::with_capacity(n);
    for _ in 0..n {
        let u = model.input_box.clamp(&terminal.feedback(&x));
        x = model.step(&x, &u)?;
        us.push(u);
    }
    Ok(us)
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub u: Vec<DVector<f64>>,
    pub x: Vec<DVector<f64>>,
    pub j_s: f64,
}

/// The previous plan shifted by `shift` steps, restarted from the measured
/// state `x_new`, and completed with the terminal feedback up to `n_next`
/// inputs.
pub fn build_candidate(
    model: &AgentModel,
    terminal: &TerminalIngredients,
    weights: &CostWeights,
    prev: &OcpSolution,
    shift: usize,
    x_new: &DVector<f64>,
    n_next: usize,
) -> Result<Candidate> {
    let copied = prev.u_opt.len().saturating_sub(shift).min(n_next);
    let mut us = Vec::with_capacity(n_next);
    let mut xs = Vec::with_capacity(n_next + 1);
    xs.push(x_new.clone());
    for l in 0..n_next {
        let u = if l < copied {
            prev.u_opt[shift + l].clone()
        } else {
            terminal.feedback(&xs[l])
        };
        let next = model.step(&xs[l], &u)?;
        us.push(u);
        xs.push(next);
    }
    let j_s = egoistic_cost(&xs, &us, weights);
    Ok(Candidate { u: us, x: xs, j_s })
}

/// Cost cap for the next solve, from the previous trigger's decision.
/// `x_pre` is the state measured one step before the new trigger instant.
pub fn gamma_threshold(
    prev: &TriggerDecision,
    prev_sol: &OcpSolution,
    retained_candidate_cost: Option<f64>,
    x_pre: &DVector<f64>,
    weights: &CostWeights,
) -> Result<f64> {
    let h = prev.h;
    let (base, bound) = if h == 1 {
        (prev_sol.j_s, prev.upsilon)
    } else {
        let base = retained_candidate_cost.ok_or_else(|| {
            Error::StateManagement(format!("no retained candidate cost after an interval of {h}"))
        })?;
        let bound = prev
            .lambda
            .ok_or_else(|| Error::StateManagement(format!("Λ({h}) missing from the decision")))?;
        (base, bound)
    };
    let u = prev_sol
        .u_opt
        .get(h - 1)
        .ok_or_else(|| Error::StateManagement(format!("previous plan has no input at offset {}", h - 1)))?;
    Ok(base + bound - quad_form(x_pre, &weights.q) - quad_form(u, &weights.r))
}
