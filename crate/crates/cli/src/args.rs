//! Command-line surface and exit codes.

use crate::config::ExperimentConfig;
use crate::pipeline::{self, MatrixOptions};
use crate::CliError;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use tunnelslam::eval::{CellOutcome, FilterMode};
use tunnelslam::graphcore::RobustKernel;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "TUNNEL_SLAM_OUTPUT";

#[derive(Debug, Parser)]
#[command(name = "tunnelslam", version, about = "Multi-robot LiDAR SLAM experiments in simulated tunnels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output root; falls back to the config's `output_dir`.
    #[arg(long, env = OUTPUT_ENV)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scans, ground truth and wheel odometry.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run both odometry modes on a simulated dataset and compare ATE.
    Odometry {
        #[command(flatten)]
        common: Common,
    },
    /// Run the pairwise merge matrix and write the tables.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Restrict to one keyframe regime.
        #[arg(long)]
        filter: Option<FilterArg>,
        /// Restrict to PCM on or off.
        #[arg(long)]
        pcm: Option<Switch>,
        /// Override the back-end kernel.
        #[arg(long)]
        robust: Option<RobustArg>,
    },
    /// Rebuild the tables from stored cell summaries.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FilterArg {
    All,
    Tunnel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RobustArg {
    None,
    Gnc,
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = common
        .output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config(format!("no output directory: pass --output, set {OUTPUT_ENV} or `output_dir`")))?;
    Ok((cfg, out))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, seed } => {
            let (cfg, out) = resolve(&common)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            pipeline::simulate(&cfg, seed, &out)?;
        }
        Command::Odometry { common } => {
            let (cfg, out) = resolve(&common)?;
            pipeline::odometry(&cfg, &out)?;
        }
        Command::Matrix { common, jobs, filter, pcm, robust } => {
            let (mut cfg, out) = resolve(&common)?;
            if jobs == 0 {
                return Err(CliError::Config("`--jobs` must be >= 1".into()));
            }
            match robust {
                Some(RobustArg::None) => cfg.merge.optimize.robust = RobustKernel::None,
                Some(RobustArg::Gnc) => cfg.merge.optimize.robust = RobustKernel::gnc(),
                None => {}
            }
            let opts = MatrixOptions {
                jobs,
                filters: match filter {
                    None => vec![FilterMode::All, FilterMode::Tunnel],
                    Some(FilterArg::All) => vec![FilterMode::All],
                    Some(FilterArg::Tunnel) => vec![FilterMode::Tunnel],
                },
                pcm: match pcm {
                    None => vec![false, true],
                    Some(Switch::Off) => vec![false],
                    Some(Switch::On) => vec![true],
                },
            };
            let cells = pipeline::matrix(&cfg, &out, &opts)?;
            let failed = cells.iter().filter(|c| matches!(c.outcome, CellOutcome::Failed(_))).count();
            if failed > 0 {
                return Err(CliError::CellsFailed(failed, cells.len()));
            }
        }
        Command::Report { common } => {
            let (cfg, out) = resolve(&common)?;
            pipeline::report(&cfg, &out)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage or config error, 2 data error,
/// 3 when some matrix cells failed.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
