//! CSV and JSON output of a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::{Invariants, RunLog};
use crate::trigger::Components;
use crate::AgentId;

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Trajectory of one agent: one row per applied step.
pub fn agent_csv(log: &RunLog, index: usize) -> String {
    let agent = &log.agents[index];
    let (nx, nu) = agent
        .steps
        .first()
        .map(|s| (s.x.len(), s.u.len()))
        .unwrap_or((0, 0));
    let mut out = String::from("k");
    for i in 0..nx {
        let _ = write!(out, ",x{i}");
    }
    for i in 0..nu {
        let _ = write!(out, ",u{i}");
    }
    for i in 0..nx {
        let _ = write!(out, ",w{i}");
    }
    out.push_str(",mode,solved\n");
    for s in &agent.steps {
        out.push_str(&s.k.to_string());
        for v in s.x.iter().chain(s.u.iter()).chain(s.w.iter()) {
            out.push(',');
            out.push_str(&num(*v));
        }
        let _ = writeln!(out, ",{},{}", s.mode.as_str(), u8::from(s.solved));
    }
    out
}

pub fn triggers_csv(log: &RunLog) -> String {
    let mut out = String::from(
        "agent,k,h,n,n_next,n_bar,n_hat,h_one,h_f1,h_f2,h_s,gamma,j_s,j_c,j_total,upsilon,lambda,stability_rhs,candidate_feasible,candidate_j_s,status,iterations,neighbor_cases\n",
    );
    for t in &log.triggers {
        let d = &t.decision;
        let c = d.components;
        let cases: Vec<String> = t
            .neighbor_cases
            .iter()
            .map(|(j, c)| format!("{j}:{}", c.map(|c| c.as_str()).unwrap_or("initial")))
            .collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            t.agent,
            t.k,
            d.h,
            d.n,
            d.n_next,
            d.n_bar,
            d.n_hat,
            c.h_one,
            c.h_f1,
            c.h_f2,
            c.h_s,
            opt_num(t.gamma),
            num(t.j_s),
            num(t.j_c),
            num(t.j_total),
            num(d.upsilon),
            opt_num(d.lambda),
            num(d.stability_rhs),
            t.candidate_feasible.map(|b| u8::from(b).to_string()).unwrap_or_default(),
            opt_num(t.candidate_j_s),
            t.status.as_str(),
            t.iterations,
            cases.join(" "),
        );
    }
    out
}

/// Wall-clock solve times; kept apart so the other files are reproducible.
pub fn timing_csv(log: &RunLog) -> String {
    let mut out = String::from("agent,k,solve_seconds\n");
    for t in &log.triggers {
        let _ = writeln!(out, "{},{},{}", t.agent, t.k, num(t.solve_seconds));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentSummary {
    pub id: AgentId,
    pub solves: usize,
    pub terminal_entry: Option<usize>,
    pub final_state: Vec<f64>,
    pub intervals: Vec<usize>,
    pub horizons: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    pub total_solves: usize,
    pub agents: Vec<AgentSummary>,
    pub invariants: Invariants,
    pub all_invariants_pass: bool,
    pub aborted: Option<String>,
}

pub fn summarize(log: &RunLog) -> RunSummary {
    let agents = log
        .agents
        .iter()
        .map(|a| {
            let trig: Vec<_> = log.triggers_of(a.id).collect();
            AgentSummary {
                id: a.id,
                solves: trig.len(),
                terminal_entry: a.terminal_entry,
                final_state: a.steps.last().map(|s| s.x.as_slice().to_vec()).unwrap_or_default(),
                intervals: trig.iter().map(|t| t.decision.h).collect(),
                horizons: trig.iter().map(|t| t.decision.n).collect(),
            }
        })
        .collect();
    RunSummary {
        scenario: log.scenario.clone(),
        variant: log.variant.as_str().to_string(),
        seed: log.seed,
        steps: log.agents.iter().map(|a| a.steps.len()).max().unwrap_or(0),
        total_solves: log.total_solves(),
        agents,
        invariants: log.invariants.clone(),
        all_invariants_pass: log.invariants.all_pass(),
        aborted: log.aborted.clone(),
    }
}

/// Writes `agent_<id>.csv`, `triggers.csv`, `timing.csv` and
/// `summary.json` into `dir`, creating it if needed.
pub fn write_run(log: &RunLog, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    for (i, a) in log.agents.iter().enumerate() {
        let p = dir.join(format!("agent_{}.csv", a.id));
        write_file(&p, &agent_csv(log, i))?;
        written.push(p);
    }
    for (name, body) in [("triggers.csv", triggers_csv(log)), ("timing.csv", timing_csv(log))] {
        let p = dir.join(name);
        write_file(&p, &body)?;
        written.push(p);
    }
    let p = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summarize(log)).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    write_file(&p, &(json + "\n"))?;
    written.push(p);
    Ok(written)
}

/// Solve counts per agent and variant, one row per agent plus a total.
pub fn comparison_table(logs: &[RunLog]) -> String {
    let mut out = String::from("agent");
    for l in logs {
        let _ = write!(out, "\t{}", l.variant.label());
    }
    out.push('\n');
    if let Some(first) = logs.first() {
        for a in &first.agents {
            out.push_str(&a.id.to_string());
            for l in logs {
                let _ = write!(out, "\t{}", l.solve_count(a.id));
            }
            out.push('\n');
        }
    }
    out.push_str("total");
    for l in logs {
        let _ = write!(out, "\t{}", l.total_solves());
    }
    out.push('\n');
    out
}

pub fn comparison_csv(logs: &[RunLog]) -> String {
    let mut out = String::from("variant,agent,solves,terminal_entry,invariants_pass\n");
    for l in logs {
        for a in &l.agents {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                l.variant.as_str(),
                a.id,
                l.solve_count(a.id),
                a.terminal_entry.map(|k| k.to_string()).unwrap_or_default(),
                u8::from(l.success()),
            );
        }
    }
    out
}

/// Generator components of every trigger, for plotting.
pub fn components_of(log: &RunLog, id: AgentId) -> Vec<(usize, Components)> {
    log.triggers_of(id).map(|t| (t.k, t.decision.components)).collect()
}
