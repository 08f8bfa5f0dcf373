//! Closed-loop simulation of all agents on a shared clock.
//!
//! Each step has two phases. In the first, every agent measures its state
//! and either applies its terminal feedback, replays its stored plan, or
//! (at a trigger instant) solves its problem using the packages committed in
//! earlier steps; agents are independent here and may run in parallel. In
//! the second, serialized phase, new packages are published, logs appended
//! and every true state is advanced with its own disturbance draw.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{BoundContext, OptimalSolutionView, Weight};
use crate::error::{Error, Result};
use crate::linalg::{quad_form, weighted_norm};
use crate::neighbors::{assemble, initial_reference, BroadcastPackage, CaseTag, PackageStore};
use crate::ocp::{
    build_candidate, check_constraints, feedback_rollout_inputs, gamma_threshold, solve, solve_multistart,
    tightened_sets, OcpProblem, OcpSolution, GAMMA_TOLERANCE,
};
use crate::sampling::{rng_stream, uniform_in_ball, SimRng};
use crate::scenario::Scenario;
use crate::solver::SolveStatus;
use crate::trigger::{decide, Components, TriggerDecision};
use crate::AgentId;

pub use crate::trigger::Variant;

/// Minimum drop of the egoistic cost between consecutive triggers.
pub const LYAPUNOV_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub variant: Variant,
    pub seed: u64,
    pub max_steps: usize,
    /// Solve agents of the same step on the rayon pool.
    pub parallel: bool,
}

impl SimOptions {
    pub fn new(variant: Variant, seed: u64, max_steps: usize) -> Self {
        Self {
            variant,
            seed,
            max_steps,
            parallel: true,
        }
    }

    pub fn for_scenario(scenario: &Scenario) -> Self {
        Self::new(scenario.variant, scenario.seed, scenario.max_steps)
    }
}

/// Uniform sample from the Euclidean ball of radius `eta`.
pub fn sample_disturbance<R: Rng + ?Sized>(rng: &mut R, eta: f64, dim: usize) -> DVector<f64> {
    uniform_in_ball(rng, dim, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Predictive,
    Terminal,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Predictive => "predictive",
            Mode::Terminal => "terminal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub mode: Mode,
    pub solved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRecord {
    pub agent: AgentId,
    pub k: usize,
    pub decision: TriggerDecision,
    pub gamma: Option<f64>,
    pub j_s: f64,
    pub j_c: f64,
    pub j_total: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Whether the shifted previous plan satisfied this problem's constraints.
    pub candidate_feasible: Option<bool>,
    pub candidate_j_s: Option<f64>,
    pub neighbor_cases: Vec<(AgentId, Option<CaseTag>)>,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub checks: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

impl Tally {
    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(detail());
            }
        }
    }

    fn merge(&mut self, other: &Tally) {
        self.checks += other.checks;
        self.failures += other.failures;
        if self.first_failure.is_none() {
            self.first_failure.clone_from(&other.first_failure);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Runtime checks of the closed loop.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Invariants {
    pub state_constraints: Tally,
    pub input_constraints: Tally,
    pub gronwall: Tally,
    pub gamma_cap: Tally,
    pub lyapunov_decrease: Tally,
    pub candidate_feasibility: Tally,
    pub horizon_monotonicity: Tally,
    /// `Λ(H) ≤ σ(…)` at realized intervals `H ≥ 2`.
    pub stability_condition: Tally,
    pub terminal_boundedness: Tally,
    /// `Υ ≤ σ(…)` at realized `H = 1`; not enforced by every variant, so
    /// reported only.
    pub single_step_stability: Tally,
}

impl Invariants {
    /// `(name, tally, enforced)`.
    pub fn entries(&self) -> [(&'static str, &Tally, bool); 10] {
        [
            ("state_constraints", &self.state_constraints, true),
            ("input_constraints", &self.input_constraints, true),
            ("gronwall", &self.gronwall, true),
            ("gamma_cap", &self.gamma_cap, true),
            ("lyapunov_decrease", &self.lyapunov_decrease, true),
            ("candidate_feasibility", &self.candidate_feasibility, true),
            ("horizon_monotonicity", &self.horizon_monotonicity, true),
            ("stability_condition", &self.stability_condition, true),
            ("terminal_boundedness", &self.terminal_boundedness, true),
            ("single_step_stability", &self.single_step_stability, false),
        ]
    }

    pub fn all_pass(&self) -> bool {
        self.entries().iter().all(|(_, t, enforced)| !enforced || t.passed())
    }

    fn merge(&mut self, other: &Invariants) {
        self.state_constraints.merge(&other.state_constraints);
        self.input_constraints.merge(&other.input_constraints);
        self.gronwall.merge(&other.gronwall);
        self.gamma_cap.merge(&other.gamma_cap);
        self.lyapunov_decrease.merge(&other.lyapunov_decrease);
        self.candidate_feasibility.merge(&other.candidate_feasibility);
        self.horizon_monotonicity.merge(&other.horizon_monotonicity);
        self.stability_condition.merge(&other.stability_condition);
        self.terminal_boundedness.merge(&other.terminal_boundedness);
        self.single_step_stability.merge(&other.single_step_stability);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentLog {
    pub id: AgentId,
    pub steps: Vec<StepRecord>,
    pub terminal_entry: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    pub agents: Vec<AgentLog>,
    pub triggers: Vec<TriggerRecord>,
    pub invariants: Invariants,
    /// Set when a problem turned out infeasible and the run stopped.
    pub aborted: Option<String>,
}

impl RunLog {
    pub fn triggers_of(&self, id: AgentId) -> impl Iterator<Item = &TriggerRecord> {
        self.triggers.iter().filter(move |t| t.agent == id)
    }

    pub fn solve_count(&self, id: AgentId) -> usize {
        self.triggers_of(id).count()
    }

    pub fn total_solves(&self) -> usize {
        self.triggers.len()
    }

    pub fn success(&self) -> bool {
        self.aborted.is_none() && self.invariants.all_pass()
    }
}

#[derive(Debug, Clone)]
struct ActivePlan {
    k: usize,
    sol: OcpSolution,
    decision: TriggerDecision,
}

#[derive(Debug, Clone)]
struct AgentRuntime {
    mode: Mode,
    next_trigger: usize,
    horizon: usize,
    active: Option<ActivePlan>,
    retained_candidate_cost: Option<f64>,
    prev_j_s: Option<f64>,
    solved_once: bool,
    last_measured: Option<DVector<f64>>,
    terminal_entry: Option<usize>,
}

#[derive(Debug, Default)]
struct StepOutput {
    u: Option<DVector<f64>>,
    solved: bool,
    package: Option<BroadcastPackage>,
    record: Option<TriggerRecord>,
    invariants: Invariants,
    abort: Option<String>,
}

struct World<'a> {
    scenario: &'a Scenario,
    variant: Variant,
    store: &'a PackageStore,
    states: &'a [DVector<f64>],
}

fn agent_step(world: &World<'_>, i: usize, rt: &mut AgentRuntime, k: usize) -> Result<StepOutput> {
    let spec = &world.scenario.agents[i];
    let model = &spec.model;
    let terminal = &spec.terminal;
    let x = world.states[i].clone();
    let mut out = StepOutput::default();

    if rt.mode == Mode::Predictive {
        if let Some(act) = &rt.active {
            let l = k - act.k;
            if l <= act.decision.h {
                let bctx = BoundContext::new(model, terminal, &spec.weights.q, spec.sigma, act.decision.n)?;
                let err = weighted_norm(&(&x - &act.sol.x_opt[l]), &terminal.p);
                let bound = bctx.gamma(Weight::P, l);
                out.invariants.gronwall.record(err <= bound, || {
                    format!("agent {} at k={k}: ‖e‖_P = {err:e} > Γ_P({l}) = {bound:e}", model.id)
                });
            }
        }
        if terminal.in_region(&x) {
            rt.mode = Mode::Terminal;
            rt.terminal_entry = Some(k);
            rt.active = None;
            if !rt.solved_once {
                out.package = Some(BroadcastPackage::new(model.id, k, vec![], vec![x.clone()], terminal.k.clone())?);
            }
        }
    }

    if rt.mode == Mode::Terminal {
        let bound = terminal.r + BoundContext::new(model, terminal, &spec.weights.q, spec.sigma, 1)?.gamma(Weight::P, 1);
        let v = quad_form(&x, &terminal.p);
        out.invariants.terminal_boundedness.record(v <= bound * bound, || {
            format!("agent {} at k={k}: ‖x‖²_P = {v:e} > {:e}", model.id, bound * bound)
        });
        out.u = Some(terminal.feedback(&x));
    } else if k == rt.next_trigger {
        trigger_step(world, i, rt, k, &x, &mut out)?;
    } else {
        let act = rt
            .active
            .as_ref()
            .ok_or_else(|| Error::StateManagement(format!("agent {} has no stored plan at k={k}", model.id)))?;
        let l = k - act.k;
        let u = act.sol.u_opt.get(l).cloned().ok_or_else(|| {
            Error::StateManagement(format!("agent {}: stored plan exhausted at offset {l}", model.id))
        })?;
        let h = act.decision.h;
        if h >= 2 && l == h - 1 {
            let cand = build_candidate(model, terminal, &spec.weights, &act.sol, h - 1, &x, act.decision.n)?;
            rt.retained_candidate_cost = Some(cand.j_s);
        }
        out.u = Some(u);
    }
    rt.last_measured = Some(x);
    Ok(out)
}

fn trigger_step(
    world: &World<'_>,
    i: usize,
    rt: &mut AgentRuntime,
    k: usize,
    x: &DVector<f64>,
    out: &mut StepOutput,
) -> Result<()> {
    let scenario = world.scenario;
    let spec = &scenario.agents[i];
    let model = &spec.model;
    let terminal = &spec.terminal;
    let weights = &spec.weights;
    let id = model.id;
    let n = rt.horizon;
    let first = !rt.solved_once;

    let mut references = Vec::with_capacity(spec.neighbors.len());
    let mut neighbor_cases = Vec::with_capacity(spec.neighbors.len());
    for &j in &spec.neighbors {
        let jdx = scenario
            .index_of(j)
            .ok_or_else(|| Error::StateManagement(format!("unknown neighbour {j}")))?;
        if first {
            references.push(initial_reference(&world.states[jdx], n));
            neighbor_cases.push((j, None));
        } else {
            let pkg = world.store.get(j).ok_or_else(|| {
                Error::StateManagement(format!("agent {id} has no package from neighbour {j} at k={k}"))
            })?;
            let t = assemble(pkg, k, n, &scenario.agents[jdx].model, scenario.literal_case23)?;
            neighbor_cases.push((j, Some(t.case_tag)));
            references.push(t.states);
        }
    }

    let gamma = match (&rt.active, first) {
        (_, true) => None,
        (Some(act), false) => {
            let x_pre = rt
                .last_measured
                .as_ref()
                .ok_or_else(|| Error::StateManagement(format!("agent {id}: no state measured before k={k}")))?;
            Some(gamma_threshold(
                &act.decision,
                &act.sol,
                rt.retained_candidate_cost,
                x_pre,
                weights,
            )?)
        }
        (None, false) => {
            return Err(Error::StateManagement(format!("agent {id}: trigger at k={k} without a previous plan")));
        }
    };

    let problem = OcpProblem {
        origin: k,
        horizon: n,
        x0: x.clone(),
        references,
        tightened_state_sets: tightened_sets(model, terminal, n)?,
        terminal_radius: terminal.f,
        gamma_cap: gamma,
    };

    let started = Instant::now();
    let (sol, candidate_feasible, candidate_j_s) = match &rt.active {
        Some(act) if !first => {
            let cand = build_candidate(model, terminal, weights, &act.sol, act.decision.h, x, n)?;
            let report = check_constraints(&problem, model, weights, &cand.u)?;
            let feasible = report.is_feasible();
            if !feasible {
                log::debug!("agent {id} at k={k}: candidate (shift {}) violates {report:?}", act.decision.h);
            }
            out.invariants.candidate_feasibility.record(feasible, || {
                format!("agent {id} at k={k}: candidate violates {report:?}")
            });
            (solve(&problem, model, weights, Some(&cand.u))?, Some(feasible), Some(cand.j_s))
        }
        _ => {
            let starts = vec![
                feedback_rollout_inputs(model, terminal, x, n)?,
                vec![DVector::zeros(model.dim_u()); n],
            ];
            (solve_multistart(&problem, model, weights, &starts)?, None, None)
        }
    };
    let solve_seconds = started.elapsed().as_secs_f64();

    if sol.status == SolveStatus::Infeasible {
        let report = check_constraints(&problem, model, weights, &sol.u_opt)?;
        out.abort = Some(format!(
            "agent {id}: optimal control problem infeasible at k={k} (horizon {n}, cap {gamma:?}); best point violates {report:?}"
        ));
        return Ok(());
    }

    if let Some(g) = gamma {
        out.invariants.gamma_cap.record(sol.j_s <= g + GAMMA_TOLERANCE, || {
            format!("agent {id} at k={k}: J_s = {:e} > γ = {g:e}", sol.j_s)
        });
    }
    if let Some(prev) = rt.prev_j_s {
        out.invariants.lyapunov_decrease.record(prev - sol.j_s > crate::sim::LYAPUNOV_MARGIN, || {
            format!("agent {id} at k={k}: J_s {prev:e} → {:e}", sol.j_s)
        });
    }

    let bctx = BoundContext::new(model, terminal, &weights.q, spec.sigma, n)?;
    let view = OptimalSolutionView::new(
        model,
        terminal,
        &weights.q,
        &weights.r,
        sol.x_opt.clone(),
        sol.u_opt.clone(),
        n,
    )?;
    let decision = decide(&bctx, &view, world.variant)?;
    out.invariants.horizon_monotonicity.record(
        decision.n_next <= n && (decision.h > 1 || decision.n_next == n),
        || format!("agent {id} at k={k}: H = {}, N {n} → {}", decision.h, decision.n_next),
    );
    let tally = if decision.h >= 2 {
        &mut out.invariants.stability_condition
    } else {
        &mut out.invariants.single_step_stability
    };
    tally.record(decision.stability_holds(), || {
        format!(
            "agent {id} at k={k}: H = {}, bound {:e} > {:e}",
            decision.h,
            decision.lambda.unwrap_or(decision.upsilon),
            decision.stability_rhs
        )
    });

    out.package = Some(BroadcastPackage::new(id, k, sol.u_opt.clone(), sol.x_opt.clone(), terminal.k.clone())?);
    out.u = Some(sol.u_opt[0].clone());
    out.solved = true;
    out.record = Some(TriggerRecord {
        agent: id,
        k,
        decision: decision.clone(),
        gamma,
        j_s: sol.j_s,
        j_c: sol.j_c,
        j_total: sol.j_total,
        status: sol.status,
        iterations: sol.iterations,
        candidate_feasible,
        candidate_j_s,
        neighbor_cases,
        solve_seconds,
    });

    rt.next_trigger = k + decision.h;
    rt.horizon = decision.n_next;
    rt.prev_j_s = Some(sol.j_s);
    rt.retained_candidate_cost = None;
    rt.solved_once = true;
    rt.active = Some(ActivePlan { k, sol, decision });
    Ok(())
}

/// Runs the scenario under `opts.variant` for `opts.max_steps` steps.
pub fn run(scenario: &Scenario, opts: &SimOptions) -> Result<RunLog> {
    let m = scenario.agents.len();
    let mut states: Vec<DVector<f64>> = scenario.agents.iter().map(|a| a.x0.clone()).collect();
    let mut rngs: Vec<SimRng> = (0..m).map(|i| rng_stream(opts.seed, i as u64)).collect();
    let mut runtimes: Vec<AgentRuntime> = (0..m)
        .map(|_| AgentRuntime {
            mode: Mode::Predictive,
            next_trigger: 0,
            horizon: scenario.n0,
            active: None,
            retained_candidate_cost: None,
            prev_j_s: None,
            solved_once: false,
            last_measured: None,
            terminal_entry: None,
        })
        .collect();
    let mut store = PackageStore::new();
    let mut log = RunLog {
        scenario: scenario.name.clone(),
        variant: opts.variant,
        seed: opts.seed,
        agents: scenario
            .agents
            .iter()
            .map(|a| AgentLog {
                id: a.id(),
                steps: Vec::with_capacity(opts.max_steps),
                terminal_entry: None,
            })
            .collect(),
        triggers: Vec::new(),
        invariants: Invariants::default(),
        aborted: None,
    };

    for k in 0..opts.max_steps {
        let world = World {
            scenario,
            variant: opts.variant,
            store: &store,
            states: &states,
        };
        let outputs: Vec<Result<StepOutput>> = if opts.parallel {
            runtimes
                .par_iter_mut()
                .enumerate()
                .map(|(i, rt)| agent_step(&world, i, rt, k))
                .collect()
        } else {
            runtimes
                .iter_mut()
                .enumerate()
                .map(|(i, rt)| agent_step(&world, i, rt, k))
                .collect()
        };

        let mut aborted = Vec::new();
        let mut next_states = Vec::with_capacity(m);
        for (i, out) in outputs.into_iter().enumerate() {
            let out = out?;
            let spec = &scenario.agents[i];
            let id = spec.id();
            log.invariants.merge(&out.invariants);
            if let Some(p) = out.package {
                store.insert(p);
            }
            if let Some(r) = out.record {
                log.triggers.push(r);
            }
            if let Some(a) = out.abort {
                aborted.push(a);
            }
            let x = states[i].clone();
            log.invariants.state_constraints.record(spec.model.state_box.contains(&x), || {
                format!("agent {id} at k={k}: x = {:?} outside the state box", x.as_slice())
            });
            let w = sample_disturbance(&mut rngs[i], spec.model.eta, spec.model.dim_x());
            let Some(u) = out.u else {
                next_states.push(x);
                continue;
            };
            log.invariants.input_constraints.record(spec.model.input_box.contains(&u), || {
                format!("agent {id} at k={k}: u = {:?} outside the input box", u.as_slice())
            });
            let next = spec.model.step(&x, &u)? + &w;
            log.agents[i].steps.push(StepRecord {
                k,
                x,
                u,
                w,
                mode: runtimes[i].mode,
                solved: out.solved,
            });
            next_states.push(next);
        }
        if !aborted.is_empty() {
            log.aborted = Some(aborted.join("; "));
            break;
        }
        states = next_states;
    }
    for (a, rt) in log.agents.iter_mut().zip(&runtimes) {
        a.terminal_entry = rt.terminal_entry;
    }
    Ok(log)
}

/// Runs `variant` with the scenario's own step budget.
pub fn run_variant(scenario: &Scenario, variant: Variant, seed: u64) -> Result<RunLog> {
    run(scenario, &SimOptions::new(variant, seed, scenario.max_steps))
}

/// Generator components for a record, in `(H_1, H_f1, H_f2, H_s)` order.
pub fn components(record: &TriggerRecord) -> Components {
    record.decision.components
}
