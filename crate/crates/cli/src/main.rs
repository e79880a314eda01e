//! `pacpfl` command line: drives the experiment pipeline from a config
//! file. Four subcommands — `generate`, `train`, `evaluate`, `bounds` —
//! mirror the four orchestration entry points; every output lands under
//! `{output_dir}/{mode}_{seed}/` and is never overwritten without
//! `--force`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pacpfl::config::ExperimentConfig;
use pacpfl::runner;

#[derive(Parser)]
#[command(name = "pacpfl", version, about = "Federated learning of Gaussian-process priors with risk certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override both the federated seed and the synthetic-task seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite outputs that already exist.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic federation as per-client CSV files plus a manifest.
    Generate(Common),
    /// Train under the configured mode; writes particles, round log, and bound report.
    Train(Common),
    /// Personalize and score every client; writes per-client and summary metric tables.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Particle file to evaluate (defaults to the run directory's).
        #[arg(long, value_name = "PATH")]
        particles: Option<PathBuf>,
    },
    /// Term-by-term bound audit of a particle file (or a fresh hyper-prior draw).
    Bounds {
        #[command(flatten)]
        common: Common,
        /// Particle file to audit (defaults to the run directory's, then a prior draw).
        #[arg(long, value_name = "PATH")]
        particles: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> pacpfl::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.apply_seed_override(seed);
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> pacpfl::Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let config = load_config(&common)?;
            let report = runner::cmd_generate(&config, common.force)?;
            println!("wrote {} files under {}", report.files_written, report.data_dir.display());
            println!("manifest: {}", report.manifest_path.display());
        }
        Command::Train(common) => {
            let config = load_config(&common)?;
            let report = runner::cmd_train(&config, common.force)?;
            for warning in &report.warnings {
                eprintln!("warning: {warning}");
            }
            println!("particles: {}", report.particle_path.display());
            println!("round log: {}", report.round_log_path.display());
            println!("bound report: {}", report.bounds_path.display());
            println!("server bound total: {}", report.bounds.server.total);
        }
        Command::Evaluate { common, particles } => {
            let config = load_config(&common)?;
            let report = runner::cmd_evaluate(&config, particles.as_deref(), common.force)?;
            for gs in &report.summaries {
                println!(
                    "{} {}: mean {:.6} +- {:.6} (n = {})",
                    gs.group, gs.metric, gs.summary.mean, gs.summary.ci_half_width, gs.summary.count
                );
            }
            println!("per-client metrics: {}", report.client_metrics_path.display());
            println!("summary: {}", report.summary_path.display());
        }
        Command::Bounds { common, particles } => {
            let config = load_config(&common)?;
            let report = runner::cmd_bounds(&config, particles.as_deref(), common.force)?;
            print!("{}", runner::format_bounds_report(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
