use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use stdmpc::model::{verify_lipschitz, verify_terminal};
use stdmpc::report::{comparison_csv, comparison_table, summarize, write_run};
use stdmpc::scenario::resolve_scenario;
use stdmpc::sim::{run, RunLog, SimOptions};
use stdmpc::{Scenario, Variant};

const VERIFY_SAMPLES: usize = 20_000;

#[derive(Parser)]
#[command(name = "stdmpc", version, about = "Self-triggered distributed MPC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Compare {
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its logs.
    Run {
        /// Bundled scenario name (e.g. `paper_sec5`) or path to a TOML file.
        #[arg(value_name = "SCENARIO", conflicts_with = "scenario_flag")]
        scenario: Option<String>,
        #[arg(long = "scenario", value_name = "PATH")]
        scenario_flag: Option<String>,
        /// Overrides the scenario's variant.
        #[arg(long, value_parser = parse_variant, conflicts_with = "compare")]
        variant: Option<Variant>,
        /// Runs all four variants and prints a solve-count table.
        #[arg(long, value_enum)]
        compare: Option<Compare>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Output directory; defaults to the scenario's, else `out/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only verify the terminal ingredients and Lipschitz constants.
        #[arg(long)]
        check_terminal_ingredients: bool,
        /// Solve agents one after another instead of on the thread pool.
        #[arg(long)]
        serial: bool,
    },
    /// List the bundled scenarios.
    Scenarios,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn check_ingredients(scenario: &Scenario, seed: u64) -> anyhow::Result<bool> {
    let mut ok = true;
    for a in &scenario.agents {
        let t = verify_terminal(&a.model, &a.terminal, VERIFY_SAMPLES, seed)?;
        let l = verify_lipschitz(&a.model, Some(&a.terminal), VERIFY_SAMPLES, seed)?;
        println!(
            "agent {}: spectral radius {:.6}, input violations {}/{n}, invariance violations {}/{n}, \
             decrease violations {}/{n} (worst residual {:.3e}), region in box {}, \
             L est {:.4} (given {}), Lr est {:.4} (given {})",
            a.id(),
            t.spectral_radius,
            t.input_violations,
            t.invariance_violations,
            t.decrease_violations,
            t.worst_decrease_residual,
            t.region_in_state_box,
            l.l_est,
            a.model.lipschitz_open,
            l.lr_est.unwrap_or(f64::NAN),
            a.model.lipschitz_closed,
            n = t.samples,
        );
        let pass = t.all_pass() && l.open_ok && l.closed_ok;
        println!("agent {}: {}", a.id(), if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    }
    Ok(ok)
}

fn report_run(log: &RunLog) {
    let s = summarize(log);
    println!("{} [{}] seed {}: {} solves", s.scenario, log.variant.label(), s.seed, s.total_solves);
    for a in &s.agents {
        println!(
            "  agent {}: {} solves, terminal entry {}",
            a.id,
            a.solves,
            a.terminal_entry.map_or_else(|| "none".to_string(), |k| k.to_string())
        );
    }
    for (name, t, enforced) in log.invariants.entries() {
        let tag = if !enforced {
            "info"
        } else if t.passed() {
            "ok"
        } else {
            "FAIL"
        };
        print!("  {name}: {}/{} failed [{tag}]", t.failures, t.checks);
        match &t.first_failure {
            Some(f) => println!(" first: {f}"),
            None => println!(),
        }
    }
    if let Some(a) = &log.aborted {
        println!("  aborted: {a}");
    }
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Scenarios => {
            for (name, _) in stdmpc::scenario::BUNDLED {
                println!("{name}");
            }
            Ok(true)
        }
        Command::Run {
            scenario,
            scenario_flag,
            variant,
            compare,
            seed,
            max_steps,
            out,
            check_terminal_ingredients,
            serial,
        } => {
            let Some(name) = scenario.or(scenario_flag) else {
                bail!("no scenario given (positional or --scenario)");
            };
            let config = resolve_scenario(&name).with_context(|| format!("loading scenario `{name}`"))?;
            let scenario = config.build()?;
            for w in &scenario.warnings {
                log::warn!("{w}");
            }
            let seed = seed.unwrap_or(scenario.seed);
            if check_terminal_ingredients {
                return check_ingredients(&scenario, seed);
            }
            let out_dir = out
                .or_else(|| config.output_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out").join(&scenario.name));
            let variants: Vec<Variant> = match compare {
                Some(Compare::All) => Variant::ALL.to_vec(),
                None => vec![variant.unwrap_or(scenario.variant)],
            };
            let mut logs = Vec::new();
            for v in variants {
                let opts = SimOptions {
                    variant: v,
                    seed,
                    max_steps: max_steps.unwrap_or(scenario.max_steps),
                    parallel: !serial,
                };
                let log = run(&scenario, &opts)?;
                let dir = if compare.is_some() { out_dir.join(v.as_str()) } else { out_dir.clone() };
                write_run(&log, &dir).with_context(|| format!("writing logs to {}", dir.display()))?;
                report_run(&log);
                logs.push(log);
            }
            if compare.is_some() {
                print!("{}", comparison_table(&logs));
                let p = out_dir.join("compare.csv");
                std::fs::write(&p, comparison_csv(&logs)).with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(a) = logs.iter().find_map(|l| l.aborted.as_ref()) {
                bail!("infeasible problem: {a}");
            }
            Ok(logs.iter().all(RunLog::success))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
