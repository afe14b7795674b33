use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use koopman_eig_cli::config::{ExperimentConfig, SweepAxis};
use koopman_eig_cli::pipeline::{self, Stage, EXIT_CONFIG};
use koopman_eig_cli::{export, sweep};

#[derive(Parser)]
#[command(name = "koopman-eig", version, about = "Koopman eigenfunction identification and control experiments")]
struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline stages of an experiment.
    Run {
        config: PathBuf,
        /// Last stage to run (earlier stages always run).
        #[arg(long, value_enum, default_value = "control")]
        stage: Stage,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run once per value of a config scalar and tabulate the costs.
    Sweep {
        config: PathBuf,
        /// ridge (lambda_reg), gamma, subgrid, grid, interp, noise or n_lambda.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_enum, default_value = "optimize")]
        stage: Stage,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a config without running it.
    ValidateConfig { config: PathBuf },
    /// Bundle the model artifacts of a finished run into one JSON file.
    ExportModel {
        run_dir: PathBuf,
        /// Destination (default: <run_dir>/model.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, ExitCode> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(EXIT_CONFIG as u8)
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn stage_failure(e: pipeline::StageError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.stage.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = koopman_eig::par::configure_threads(n) {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    }
    match cli.command {
        Command::Run { config, stage, seed, out } => {
            let cfg = match load(&config, seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            match pipeline::run(&cfg, &dir, stage) {
                Ok(run) => {
                    println!("{} stages written to {}", run.stages_run.len(), dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => stage_failure(e),
            }
        }
        Command::Sweep { config, axis, values, stage, seed, out } => {
            let cfg = match load(&config, seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let axis: SweepAxis = match axis.parse() {
                Ok(a) => a,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
            };
            if let Err(e) = values.iter().try_for_each(|&v| axis.apply(&cfg, v).map(|_| ())) {
                eprintln!("error: {e:#}");
                return ExitCode::from(EXIT_CONFIG as u8);
            }
            let dir = out.unwrap_or_else(|| cfg.out_dir.join(format!("sweep_{}", axis.name())));
            match sweep::sweep(&cfg, axis, &values, &dir, stage) {
                Ok(t) => {
                    for r in &t.rows {
                        println!(
                            "{} = {:e}: J_temp {:.4e}  J_KPDE {:.4e}  ({:.1} s)",
                            axis.name(),
                            r.value,
                            r.j_temp,
                            r.j_kpde,
                            r.wall_seconds
                        );
                    }
                    println!("table written to {}", dir.join("sweep.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => stage_failure(e),
            }
        }
        Command::ValidateConfig { config } => match load(&config, None) {
            Ok(cfg) => {
                println!("{}: ok (hash {}, seed {})", cfg.name, cfg.hash(), cfg.seed);
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::ExportModel { run_dir, out } => {
            let dest = out.unwrap_or_else(|| run_dir.join("model.json"));
            match export::export_model(&run_dir, &dest).context("exporting model") {
                Ok(parts) => {
                    println!("wrote {} ({})", dest.display(), parts.join(", "));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
