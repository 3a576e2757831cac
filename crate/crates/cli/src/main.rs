//! Command-line harness for the reconstruction and noise-propagation
//! pipelines: dataset generation, reconstruction with quality metrics,
//! g-factor estimation by three estimators, replica normality testing, and
//! the acquisition-noise sweep. Every run writes a resolved-config snapshot
//! and a manifest referencing each output file.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;

/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
/// failure, 5 memory-budget failure.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Budget(String),
}

impl CliError {
    pub fn config(msg: String) -> Self {
        CliError::Config(msg)
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Budget(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) | CliError::Budget(m) => m,
        }
    }
}

impl From<recon_core::Error> for CliError {
    fn from(e: recon_core::Error) -> Self {
        use recon_core::Error as E;
        match &e {
            E::InvalidArgument(_) => CliError::Config(e.to_string()),
            E::Io(_)
            | E::Json(_)
            | E::ShapeMismatch(_)
            | E::ChannelMismatch { .. }
            | E::FootprintTooLarge { .. }
            | E::CombMismatch { .. }
            | E::UnderDetermined { .. }
            | E::FingerprintMismatch => CliError::Data(e.to_string()),
            E::NonFinite(_)
            | E::SingularCovariance
            | E::RankDeficient
            | E::Divergence { .. }
            | E::Degenerate(_)
            | E::ReplicaDiverged { .. } => CliError::Numeric(e.to_string()),
            E::BudgetExceeded { .. } => CliError::Budget(format!(
                "{e}; reduce the analysis grid or raise --budget"
            )),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json error: {e}"))
    }
}

#[derive(Parser)]
#[command(
    name = "recon-cli",
    about = "Multi-coil reconstruction experiments: synthetic data, k-space \
             interpolation (calibrated linear kernels or a scan-specific \
             network), and analytical/Monte-Carlo noise-amplification maps."
)]
struct Cli {
    /// Experiment configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the master seed (phantom noise, replica noise).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replica and Jacobian parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Peak resident tensor bytes allowed for Jacobian evaluation.
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the multi-coil dataset and write its tensors.
    Generate,
    /// Reconstruct with the configured method; run both the k-space and the
    /// frozen image-space inference and report their deviation plus quality
    /// metrics.
    Reconstruct,
    /// Analytical, Monte-Carlo, and finite-difference g-factor maps with a
    /// per-voxel scatter table and wall-clock report.
    Gfactor,
    /// Per-voxel normality testing of the pseudo-replica stack.
    Normality,
    /// Re-run the pipeline at elevated acquisition-noise levels and compare
    /// analytical vs Monte-Carlo g-factors at each level.
    SnrSweep,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli.config.ok_or_else(|| {
        CliError::Config("missing --config: every command needs an experiment config".into())
    })?;
    let cfg = ExperimentConfig::load(&config_path)?
        .with_overrides(cli.out, cli.seed, cli.threads, cli.budget);
    if let Some(t) = cfg.threads {
        // best effort: the global pool can only be installed once
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Command::Generate => commands::cmd_generate(&cfg),
        Command::Reconstruct => commands::cmd_reconstruct(&cfg),
        Command::Gfactor => commands::cmd_gfactor(&cfg),
        Command::Normality => commands::cmd_normality(&cfg),
        Command::SnrSweep => commands::cmd_snr_sweep(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
