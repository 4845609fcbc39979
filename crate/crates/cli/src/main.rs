use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use srb_cli::config::RunConfig;
use srb_cli::pipeline::{self, read_snapshot, RunOptions, CONFIG_FILE, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, SNAPSHOT_FILE};
use srb_cli::report::{emit_report, ReportFormat};
use srb_core::par::Execution;
use srb_core::system::validate_conditions;
use srb_core::weakstar::{levy_prokhorov, wasserstein_greedy, MAX_ASSIGNMENT_POINTS};

#[derive(Parser)]
#[command(name = "srb-lab", version, about = "Empirical SRB measures for partially hyperbolic attractors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and the standing conditions of its system.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the full pipeline and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Worker threads for the data-parallel stages.
        #[arg(long)]
        threads: Option<usize>,
        /// Disable data parallelism.
        #[arg(long)]
        sequential: bool,
    },
    /// Write the summary and plot-ready CSVs of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Distances between the stored Cesàro averages at horizons n and 2n.
    Distances {
        #[arg(long)]
        run: PathBuf,
    },
}

fn fail(code: i32, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code as u8)
}

fn load(path: &Path) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| fail(EXIT_VALIDATION, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let sys = match cfg.validate() {
                Ok(s) => s,
                Err(e) => return fail(EXIT_VALIDATION, e),
            };
            let report = validate_conditions(&*sys, cfg.sampling.validate_samples, cfg.seed);
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VALIDATION as u8)
            }
        }
        Command::Run { config, particles, horizon, seed, output, threads, sequential } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(p) = particles {
                cfg.particles = p;
            }
            if let Some(h) = horizon {
                cfg.horizon = h;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            #[cfg(feature = "parallel")]
            if let Some(t) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
                    return fail(EXIT_VALIDATION, e);
                }
            }
            #[cfg(not(feature = "parallel"))]
            let _ = threads;
            let opts = RunOptions { exec: if sequential { Execution::Sequential } else { Execution::Parallel } };
            match pipeline::run_pipeline(&cfg, &opts) {
                Ok(outcome) => {
                    let s = &outcome.summary;
                    println!("run directory: {}", outcome.dir.display());
                    if let Some(stage) = &s.failed_stage {
                        eprintln!("stage '{stage}' failed: {}", s.error.as_deref().unwrap_or(""));
                    }
                    for c in &s.checks {
                        let mark = if c.passed { "pass" } else { "FAIL" };
                        let value = c.value.map_or("n/a".to_string(), |v| format!("{v:.6e}"));
                        println!("{mark} {:<24} {value} {} {:e}", c.name, c.relation, c.threshold);
                    }
                    println!("verdict: {}", s.verdict);
                    ExitCode::from(outcome.exit_code() as u8)
                }
                Err(e) => fail(EXIT_NUMERICAL, e),
            }
        }
        Command::Report { run, format } => {
            let fmt: ReportFormat = match format.parse() {
                Ok(f) => f,
                Err(e) => return fail(EXIT_VALIDATION, e),
            };
            match emit_report(&run, fmt) {
                Ok(files) => {
                    for f in files {
                        println!("{}", f.display());
                    }
                    ExitCode::from(EXIT_OK as u8)
                }
                Err(e) => fail(EXIT_NUMERICAL, e),
            }
        }
        Command::Distances { run } => match distances(&run) {
            Ok(v) => {
                println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
                ExitCode::SUCCESS
            }
            Err(e) => fail(EXIT_NUMERICAL, e),
        },
    }
}

fn distances(run: &std::path::Path) -> srb_core::Result<serde_json::Value> {
    let cfg: RunConfig = pipeline::read_json(&run.join(CONFIG_FILE))?;
    let sys = cfg.system()?;
    let domain = pipeline::system_domain(&*sys)?;
    let snap = read_snapshot(&run.join(SNAPSHOT_FILE))?;
    let mut rows = Vec::new();
    for m in pipeline::lp_horizons(cfg.horizon) {
        let a = snap.truncated(m)?;
        let b = snap.truncated(2 * m)?;
        let lp = levy_prokhorov(&a, &b, &domain, cfg.tolerances.lp_resolution)?;
        let w1 = wasserstein_greedy(&a, &b, &domain, MAX_ASSIGNMENT_POINTS, cfg.seed)?;
        rows.push(json!({
            "horizon": m,
            "doubled": 2 * m,
            "levy_prokhorov": lp.distance,
            "grid_diameter": lp.grid_diameter,
            "wasserstein_greedy": w1,
        }));
    }
    Ok(json!({ "schema": "srb-distances/1", "particles": snap.len(), "distances": rows }))
}
