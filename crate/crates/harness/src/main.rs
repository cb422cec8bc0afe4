use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nln_harness::error::HarnessResult;
use nln_harness::{
    compare, evaluate, replicate, resolve_scenario, seed_range, HarnessError, MetricReport, DEFAULT_OUT_DIR,
    OUT_DIR_ENV,
};
use nln_sim::records::{measurements_csv, records_csv, trace_csv};
use nln_sim::scenario::Algorithms;
use nln_sim::{run, ScenarioConfig};

#[derive(Parser)]
#[command(name = "nln", version, about = "Cooperative UWB navigation simulator and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario once and write its records and metric report.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: $NLN_OUT_DIR or ./nln-out].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the algorithm combination, e.g. BP-HT-CP.
        #[arg(long)]
        policy: Option<String>,
    },
    /// Run a scenario over several seeds and aggregate the metrics.
    Replicate {
        #[arg(long)]
        scenario: String,
        /// Number of seeds, counting up from the scenario seed.
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        first_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        policy: Option<String>,
    },
    /// Percentage changes from report A to report B.
    Compare { a: PathBuf, b: PathBuf },
    /// Check a scenario file without running it.
    Validate { path: PathBuf },
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn out_dir(arg: Option<PathBuf>) -> PathBuf {
    arg.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn write(dir: &Path, name: &str, text: &str) -> HarnessResult<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })
}

fn scenario_with(arg: &str, policy: Option<&str>) -> HarnessResult<ScenarioConfig> {
    let mut cfg = resolve_scenario(arg)?;
    if let Some(p) = policy {
        let cooperative = cfg.algorithms.cooperative;
        cfg.algorithms = Algorithms::from_acronym(p)?;
        cfg.algorithms.cooperative = cooperative;
    }
    Ok(cfg)
}

fn prepare(dir: &Path) -> HarnessResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })
}

fn execute(cli: Cli) -> HarnessResult<()> {
    match cli.command {
        Command::Run { scenario, seed, out, policy } => {
            let cfg = scenario_with(&scenario, policy.as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            let output = run(&cfg, seed)?;
            let report = evaluate(&cfg, &[(seed, output.clone())])?;
            let dir = out_dir(out);
            prepare(&dir)?;
            write(&dir, "records.csv", &records_csv(&output.records))?;
            write(&dir, "measurements.csv", &measurements_csv(&output.measurements))?;
            if cfg.protocol.trace {
                write(&dir, "trace.csv", &trace_csv(&output.trace))?;
            }
            write(&dir, "report.csv", &report.to_csv())?;
            write(&dir, "summary.txt", &report.summary())?;
            emit(&report.summary());
            let s = &output.stats;
            emit(&format!(
                "  channel: {} transmissions, {} delivered, {} collided, {} out of range\n",
                s.transmissions, s.delivered, s.collided, s.out_of_range
            ));
            let d = &output.diagnostics;
            emit(&format!(
                "  epochs: {} run, {} activations, {} HTNA declines, {} busy give-ups, {} exchanges failed\n",
                d.epochs, d.activations, d.htna_declines, d.busy_giveups, d.exchanges_failed
            ));
            emit(&format!("wrote {}\n", dir.display()));
        }
        Command::Replicate { scenario, seeds, first_seed, out, policy } => {
            let mut cfg = scenario_with(&scenario, policy.as_deref())?;
            if let Some(s) = first_seed {
                cfg.seed = s;
            }
            let runs = replicate(&cfg, &seed_range(&cfg, seeds))?;
            let report = evaluate(&cfg, &runs)?;
            let dir = out_dir(out);
            prepare(&dir)?;
            write(&dir, "report.csv", &report.to_csv())?;
            write(&dir, "summary.txt", &report.summary())?;
            emit(&report.summary());
            emit(&format!("wrote {}\n", dir.display()));
        }
        Command::Compare { a, b } => {
            let load = |p: &Path| -> HarnessResult<MetricReport> {
                let text = std::fs::read_to_string(p).map_err(|source| HarnessError::Io { path: p.to_path_buf(), source })?;
                MetricReport::from_csv(&text, &p.display().to_string())
            };
            emit(&compare(&load(&a)?, &load(&b)?).summary());
        }
        Command::Validate { path } => {
            let cfg = nln_harness::load_scenario(&path)?;
            emit(&format!(
                "{}: ok ({} anchors, {} agents, {} landmarks, {} s, {})\n",
                path.display(),
                cfg.anchors.len(),
                cfg.agents.len(),
                cfg.landmarks.len(),
                cfg.duration_s,
                cfg.algorithms.acronym()
            ));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
