//! Acceptance criteria on the bundled four-unicycle scenario.
//!
//! Runs without the libtest harness so that every criterion prints exactly
//! one PASS/FAIL line; the process exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{close, instance, oracle, power_max_eig, wnorm};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use stdmpc::model::{synthesize_terminal, verify_terminal, AgentModel, LinearDynamics, SynthesisOptions, Unicycle};
use stdmpc::report::write_run;
use stdmpc::sampling::{uniform_in_ball, uniform_in_box};
use stdmpc::scenario::{bundled, parse_scenario};
use stdmpc::sim::{run, RunLog, SimOptions};
use stdmpc::solver::SolveStatus;
use stdmpc::trigger::{h_f1, h_f2, h_s};
use stdmpc::{BoxSet, Scenario, Variant};

const SEEDS: std::ops::Range<u64> = 0..20;
const MAX_STEPS: usize = 60;
const CONVERGENCE_STEPS: usize = 50;
const RUNTIME_BUDGET: Duration = Duration::from_secs(60);
const DECREASE_TOL: f64 = 1e-9;
const GRONWALL_TOL: f64 = 0.0;
const GRONWALL_ROLLOUTS: usize = 100;
const ECONOMY_RATIO: f64 = 0.6;
const ORACLE_INSTANCES: usize = 1000;
const TERMINAL_SAMPLES: usize = 10_000;
const SYNTHESIS_SYSTEMS: usize = 5;
const DETERMINISM_SEED: u64 = 7;

struct Line {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn ring() -> Scenario {
    parse_scenario(bundled("paper_sec5").unwrap(), "paper_sec5").unwrap().build().unwrap()
}

fn solved_horizons(log: &RunLog, id: usize) -> Vec<usize> {
    log.triggers_of(id).map(|t| t.decision.n).collect()
}

fn convergence(runs: &[RunLog], elapsed: Duration) -> Line {
    let mut late = Vec::new();
    for log in runs {
        for a in &log.agents {
            if a.terminal_entry.is_none_or(|k| k > CONVERGENCE_STEPS) || log.aborted.is_some() {
                late.push(format!("seed {} agent {} entry {:?}", log.seed, a.id, a.terminal_entry));
            }
        }
    }
    let worst = runs
        .iter()
        .flat_map(|l| l.agents.iter().filter_map(|a| a.terminal_entry))
        .max()
        .unwrap_or(0);
    let pass = late.is_empty() && elapsed < RUNTIME_BUDGET;
    Line {
        id: "1",
        name: "convergence",
        pass,
        detail: format!(
            "{} seeds, latest entry k={worst} (limit {CONVERGENCE_STEPS}), {:.1}s (limit {}s){}",
            runs.len(),
            elapsed.as_secs_f64(),
            RUNTIME_BUDGET.as_secs(),
            late.first().map(|s| format!("; first late: {s}")).unwrap_or_default()
        ),
    }
}

fn lyapunov(runs: &[RunLog]) -> Line {
    let (mut pairs, mut bad, mut min_drop) = (0, Vec::new(), f64::INFINITY);
    for log in runs {
        for a in &log.agents {
            let js: Vec<_> = log.triggers_of(a.id).map(|t| (t.k, t.j_s)).collect();
            for w in js.windows(2) {
                pairs += 1;
                let drop = w[0].1 - w[1].1;
                min_drop = min_drop.min(drop);
                if drop <= DECREASE_TOL {
                    bad.push(format!("seed {} agent {} k={}->{}: {drop:e}", log.seed, a.id, w[0].0, w[1].0));
                }
            }
        }
    }
    Line {
        id: "2",
        name: "lyapunov decrease",
        pass: bad.is_empty() && pairs > 0,
        detail: format!(
            "{pairs} consecutive trigger pairs, smallest decrease {min_drop:e} (need > {DECREASE_TOL:e}){}",
            bad.first().map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    }
}

fn feasibility(runs: &[RunLog]) -> Line {
    let (mut solves, mut infeasible, mut checks, mut failures) = (0, 0, 0, 0);
    let mut first = None;
    for log in runs {
        for a in &log.agents {
            for t in log.triggers_of(a.id).skip(1) {
                solves += 1;
                if t.status == SolveStatus::Infeasible {
                    infeasible += 1;
                }
            }
        }
        let tally = &log.invariants.candidate_feasibility;
        checks += tally.checks;
        failures += tally.failures;
        if first.is_none() {
            first = tally.first_failure.as_ref().map(|f| format!("seed {}: {f}", log.seed));
        }
        if log.aborted.is_some() {
            infeasible += 1;
        }
    }
    Line {
        id: "3",
        name: "recursive feasibility",
        pass: infeasible == 0 && failures == 0 && checks > 0,
        detail: format!(
            "{infeasible}/{solves} later solves infeasible, {failures}/{checks} candidates violate the new problem{}",
            first.map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    }
}

/// Replays each realized inter-trigger segment nominally from the logged
/// state and compares with the logged trajectory.
fn gronwall_closed_loop(scenario: &Scenario, runs: &[RunLog]) -> (usize, Vec<String>) {
    let (mut checks, mut bad) = (0, Vec::new());
    for log in runs {
        for (i, a) in log.agents.iter().enumerate() {
            let spec = &scenario.agents[i];
            let m = &spec.model;
            let lp = power_max_eig(&spec.terminal.p).sqrt();
            let end = a.terminal_entry.unwrap_or(a.steps.len());
            let ks: Vec<_> = log.triggers_of(a.id).map(|t| t.k).chain([end]).collect();
            for seg in ks.windows(2) {
                let mut nominal = a.steps[seg[0]].x.clone();
                for l in 1..=(seg[1] - seg[0]) {
                    nominal = m.step(&nominal, &a.steps[seg[0] + l - 1].u).unwrap();
                    let actual = match a.steps.get(seg[0] + l) {
                        Some(s) => s.x.clone(),
                        None => break,
                    };
                    let bound = m.eta * lp / m.lipschitz_open * ((1.0 + m.lipschitz_open).powi(l as i32) - 1.0);
                    let e = wnorm(&(&actual - &nominal), &spec.terminal.p);
                    checks += 1;
                    if e > bound + GRONWALL_TOL {
                        bad.push(format!("seed {} agent {} k={} l={l}: {e:e} > {bound:e}", log.seed, a.id, seg[0]));
                    }
                }
            }
        }
    }
    (checks, bad)
}

fn gronwall_rollouts() -> (usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut checks, mut bad) = (0, Vec::new());
    for trial in 0..GRONWALL_ROLLOUTS {
        let eta = 10f64.powf(rng.random_range(-5.0..-2.0));
        let m = AgentModel::new(
            1,
            Arc::new(Unicycle { sample_period: 0.5 }),
            BoxSet::symmetric(&[1.0, 1.0, FRAC_PI_2]),
            BoxSet::symmetric(&[1.0, 0.6]),
            eta,
            0.5,
            1.8581,
        )
        .unwrap();
        let p = ring().agents[0].terminal.p.clone();
        let lp = power_max_eig(&p).sqrt();
        let mut nominal = uniform_in_box(&mut rng, &m.state_box) * 0.5;
        let mut actual = nominal.clone();
        for l in 1..=20 {
            let u = uniform_in_box(&mut rng, &m.input_box);
            nominal = m.step(&nominal, &u).unwrap();
            actual = m.step(&actual, &u).unwrap() + uniform_in_ball(&mut rng, 3, eta);
            let bound = eta * lp / 0.5 * (1.5f64.powi(l) - 1.0);
            let e = wnorm(&(&actual - &nominal), &p);
            checks += 1;
            if e > bound + GRONWALL_TOL {
                bad.push(format!("rollout {trial} l={l}: {e:e} > {bound:e}"));
            }
        }
    }
    (checks, bad)
}

fn gronwall(scenario: &Scenario, runs: &[RunLog]) -> Line {
    let (c1, b1) = gronwall_closed_loop(scenario, runs);
    let (c2, b2) = gronwall_rollouts();
    let tallied: usize = runs.iter().map(|l| l.invariants.gronwall.failures).sum();
    Line {
        id: "4",
        name: "gronwall bounds",
        pass: b1.is_empty() && b2.is_empty() && tallied == 0 && c1 > 0,
        detail: format!(
            "{}/{c1} segment points and {}/{c2} rollout points exceed the bound, {tallied} in-loop tally failures{}",
            b1.len(),
            b2.len(),
            b1.first().or(b2.first()).map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    }
}

fn constraints(scenario: &Scenario, runs: &[&RunLog]) -> Line {
    let (mut checks, mut bad) = (0, Vec::new());
    for log in runs {
        for (i, a) in log.agents.iter().enumerate() {
            let m = &scenario.agents[i].model;
            for s in &a.steps {
                checks += 1;
                if !m.state_box.contains(&s.x) || !m.input_box.contains(&s.u) {
                    bad.push(format!("{} seed {} agent {} k={}", log.variant.label(), log.seed, a.id, s.k));
                }
            }
        }
    }
    Line {
        id: "5",
        name: "constraint satisfaction",
        pass: bad.is_empty() && checks > 0,
        detail: format!(
            "{}/{checks} logged (x, u) pairs outside the boxes{}",
            bad.len(),
            bad.first().map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    }
}

fn economy(st: &[RunLog], dmpc: &[RunLog]) -> Line {
    let mut bad = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for (a, b) in st.iter().zip(dmpc) {
        assert_eq!(a.seed, b.seed);
        for ag in &a.agents {
            if a.solve_count(ag.id) >= b.solve_count(ag.id) {
                bad.push(format!("seed {} agent {}: {} vs {}", a.seed, ag.id, a.solve_count(ag.id), b.solve_count(ag.id)));
            }
        }
        let ratio = a.total_solves() as f64 / b.total_solves() as f64;
        worst_ratio = worst_ratio.max(ratio);
        if ratio > ECONOMY_RATIO {
            bad.push(format!("seed {}: total ratio {ratio:.3}", a.seed));
        }
    }
    let seed7 = st.iter().zip(dmpc).find(|(a, _)| a.seed == DETERMINISM_SEED);
    Line {
        id: "6",
        name: "trigger economy",
        pass: bad.is_empty(),
        detail: format!(
            "worst total ratio {worst_ratio:.3} (limit {ECONOMY_RATIO}){}{}",
            seed7
                .map(|(a, b)| format!(", seed {DETERMINISM_SEED}: {} vs {} solves", a.total_solves(), b.total_solves()))
                .unwrap_or_default(),
            bad.first().map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    }
}

fn horizon(runs: &[RunLog]) -> Line {
    let (mut agents, mut increasing, mut never_shrunk, mut decided) = (0, 0, 0, 0);
    for log in runs {
        for a in &log.agents {
            agents += 1;
            let ns = solved_horizons(log, a.id);
            if ns.windows(2).any(|w| w[1] > w[0]) {
                increasing += 1;
            }
            if !ns.windows(2).any(|w| w[1] < w[0]) {
                never_shrunk += 1;
            }
            decided += log.triggers_of(a.id).filter(|t| t.decision.n_next < t.decision.n).count();
        }
    }
    Line {
        id: "7",
        name: "horizon adaptation",
        pass: increasing == 0 && never_shrunk == 0,
        detail: format!(
            "{increasing}/{agents} agent runs with a horizon increase, {never_shrunk}/{agents} without a realized shrink \
             ({decided} shrinks decided in total)"
        ),
    }
}

fn oracle_equivalence() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(8080);
    let mut bad = Vec::new();
    for case in 0..ORACLE_INSTANCES {
        let inst = instance(&mut rng);
        let o = oracle(&inst);
        let (ctx, sol) = (&inst.ctx, &inst.sol);
        if !close(ctx.upsilon(sol), o.upsilon()) {
            bad.push(format!("case {case}: upsilon"));
        }
        for h in 2..=ctx.n {
            if !close(ctx.lambda_total(sol, h).unwrap(), o.lambda(h)) {
                bad.push(format!("case {case}: lambda({h})"));
            }
        }
        if h_f1(ctx) != o.h_f1() {
            bad.push(format!("case {case}: h_f1"));
        }
        for shrink in [false, true] {
            if h_f2(ctx, sol, shrink) != o.h_f2(shrink) {
                bad.push(format!("case {case}: h_f2"));
            }
        }
        if h_s(ctx, sol).unwrap() != o.h_s() {
            bad.push(format!("case {case}: h_s"));
        }
    }
    Line {
        id: "8",
        name: "bounds oracle",
        pass: bad.is_empty(),
        detail: format!(
            "{} mismatches on {ORACLE_INSTANCES} instances at {:e}{}",
            bad.len(),
            common::TOL,
            bad.first().map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    }
}

fn given_terminal(scenario: &Scenario) -> Line {
    let mut parts = Vec::new();
    let mut pass = true;
    for a in &scenario.agents {
        let rep = verify_terminal(&a.model, &a.terminal, TERMINAL_SAMPLES, a.id() as u64).unwrap();
        pass &= rep.all_pass();
        parts.push(format!(
            "agent {}: rho {:.4}, input {}, invariance {}, decrease {}",
            a.id(),
            rep.spectral_radius,
            rep.input_violations,
            rep.invariance_violations,
            rep.decrease_violations
        ));
    }
    Line {
        id: "9a",
        name: "given terminal ingredients",
        pass,
        detail: format!("{TERMINAL_SAMPLES} samples each; {}", parts.join("; ")),
    }
}

fn synthesized_terminal() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut bad = Vec::new();
    let mut done = 0;
    while done < SYNTHESIS_SYSTEMS {
        let nx = rng.random_range(2..=3);
        let nu = rng.random_range(1..=2);
        let a = DMatrix::from_fn(nx, nx, |i, j| f64::from(u8::from(i == j)) + rng.random_range(-0.3..0.3));
        let b = DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-1.0..1.0));
        if !controllable(&a, &b) {
            continue;
        }
        done += 1;
        let l = (&a - DMatrix::<f64>::identity(nx, nx)).singular_values().max().max(1e-3);
        let model = AgentModel::new(
            done,
            Arc::new(LinearDynamics::new(a, b).unwrap()),
            BoxSet::symmetric(&vec![2.0; nx]),
            BoxSet::symmetric(&vec![1.0; nu]),
            1e-4,
            l,
            l,
        )
        .unwrap();
        let q = DMatrix::identity(nx, nx);
        let r = DMatrix::identity(nu, nu) * 0.5;
        let opts = SynthesisOptions { seed: done as u64, ..Default::default() };
        match synthesize_terminal(&model, &q, &r, &opts) {
            Ok(t) => {
                let rep = verify_terminal(&model, &t, TERMINAL_SAMPLES, 1000 + done as u64).unwrap();
                if !rep.all_pass() {
                    bad.push(format!("system {done}: {rep:?}"));
                }
            }
            Err(e) => bad.push(format!("system {done}: {e}")),
        }
    }
    Line {
        id: "9b",
        name: "synthesized terminal ingredients",
        pass: bad.is_empty(),
        detail: format!(
            "{}/{SYNTHESIS_SYSTEMS} random controllable linear systems fail{}",
            bad.len(),
            bad.first().map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    }
}

fn controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let mut blocks = Vec::new();
    let mut ak = b.clone();
    for _ in 0..n {
        blocks.push(ak.clone());
        ak = a * ak;
    }
    let c = DMatrix::from_fn(n, n * b.ncols(), |i, j| blocks[j / b.ncols()][(i, j % b.ncols())]);
    c.svd(false, false).rank(1e-8) == n
}

fn files_of(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        // Wall-clock solve times are the one intentionally non-reproducible log.
        .filter(|p| p.file_name().unwrap() != "timing.csv")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism(scenario: &Scenario) -> Line {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut differing = Vec::new();
    let mut compared = 0;
    for v in [Variant::StHDmpc, Variant::Dmpc] {
        for d in &dirs {
            let log = run(scenario, &SimOptions::new(v, DETERMINISM_SEED, MAX_STEPS)).unwrap();
            write_run(&log, &d.path().join(v.as_str())).unwrap();
        }
        let a = files_of(&dirs[0].path().join(v.as_str()));
        let b = files_of(&dirs[1].path().join(v.as_str()));
        compared += a.len();
        if a.len() != b.len() {
            differing.push(format!("{}: file sets differ", v.label()));
        }
        for ((na, ca), (_, cb)) in a.iter().zip(&b) {
            if ca != cb {
                differing.push(format!("{} {na}", v.label()));
            }
        }
    }
    Line {
        id: "10",
        name: "determinism",
        pass: differing.is_empty() && compared > 0,
        detail: format!(
            "{compared} log files compared byte for byte, {} differ{}",
            differing.len(),
            differing.first().map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    }
}

fn main() {
    let scenario = ring();

    let t0 = Instant::now();
    let st: Vec<RunLog> = SEEDS
        .map(|seed| run(&scenario, &SimOptions::new(Variant::StHDmpc, seed, MAX_STEPS)).unwrap())
        .collect();
    let elapsed = t0.elapsed();
    let dmpc: Vec<RunLog> = SEEDS
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|seed| run(&scenario, &SimOptions::new(Variant::Dmpc, seed, MAX_STEPS)).unwrap())
        .collect();

    let all: Vec<&RunLog> = st.iter().chain(&dmpc).collect();
    let lines = [
        convergence(&st, elapsed),
        lyapunov(&st),
        feasibility(&st),
        gronwall(&scenario, &st),
        constraints(&scenario, &all),
        economy(&st, &dmpc),
        horizon(&st),
        oracle_equivalence(),
        given_terminal(&scenario),
        synthesized_terminal(),
        determinism(&scenario),
    ];

    println!();
    for l in &lines {
        println!(
            "criterion {:<3} {:<33} {}  {}",
            l.id,
            l.name,
            if l.pass { "PASS" } else { "FAIL" },
            l.detail
        );
    }
    let failed: Vec<_> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", lines.len());
    } else {
        println!("acceptance: {} of {} criteria fail ({})", failed.len(), lines.len(), failed.join(", "));
        std::process::exit(1);
    }
}
