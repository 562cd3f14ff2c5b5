//! `ksid`: simulate, identify and evaluate lifted linear pendulum models.
//!
//! Exit codes: 0 success, 2 usage or I/O error, 3 inadmissible
//! identification, 4 numeric divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopman_sysid::koopman::FeatureMode;

use commands::RolloutArgs;
use config::PipelineConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Inadmissible(String),
    Numeric(String),
}

impl CliError {
    fn input(e: koopman_sysid::Error) -> Self {
        CliError::Usage(e.to_string())
    }

    fn from_core(e: koopman_sysid::Error) -> Self {
        match e {
            koopman_sysid::Error::Divergence { .. } | koopman_sysid::Error::Numeric(_) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Inadmissible(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Inadmissible(m) | CliError::Numeric(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(name = "ksid", version, about = "Deep Koopman lifted-linear identification of a forced pendulum")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: config output_dir, then $KSID_OUT, then ./ksid-out].
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(PipelineConfig, PathBuf), CliError> {
        let mut cfg = PipelineConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let out = cfg.out_dir(self.out.as_deref());
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate training trajectories and write them with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Write Mel spectrograms and sample CAE images for a dataset.
    Spectrogram {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest written by gen-data.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the supervised lifting-dimension search and export the system.
    Identify {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest written by gen-data.
        #[arg(long)]
        manifest: PathBuf,
        /// Encoder input features: raw-only or raw+latent.
        #[arg(long, default_value = "raw-only")]
        mode: FeatureMode,
        /// Exit 0 even when no admissible lifting was found.
        #[arg(long)]
        allow_inadmissible: bool,
    },
    /// Open-loop prediction of an identified system against the simulator.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// System JSON written by identify.
        #[arg(long)]
        system: PathBuf,
        /// Initial angle from upright (rad).
        #[arg(long, allow_hyphen_values = true)]
        theta: f64,
        /// Initial angular rate (rad/s).
        #[arg(long, allow_hyphen_values = true)]
        theta_dot: f64,
        /// Number of steps [default: eval.horizon, or the controls length].
        #[arg(long)]
        horizon: Option<usize>,
        /// File with one torque per line; zero torque when omitted.
        #[arg(long)]
        controls: Option<PathBuf>,
    },
    /// MAE table over lifting dimensions, feature modes and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Pretty-print any JSON artifact.
    Inspect {
        /// Artifact to print.
        path: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => {
            let (cfg, out) = common.resolve()?;
            commands::gen_data(&cfg, &out)
        }
        Command::Spectrogram { common, manifest } => {
            let (cfg, out) = common.resolve()?;
            commands::spectrogram(&cfg, &manifest, &out)
        }
        Command::Identify {
            common,
            manifest,
            mode,
            allow_inadmissible,
        } => {
            let (cfg, out) = common.resolve()?;
            commands::identify(&cfg, &manifest, mode, allow_inadmissible, &out)
        }
        Command::Rollout {
            common,
            system,
            theta,
            theta_dot,
            horizon,
            controls,
        } => {
            let (cfg, out) = common.resolve()?;
            let args = RolloutArgs {
                system,
                theta,
                theta_dot,
                horizon,
                controls,
            };
            commands::rollout(&cfg, &args, &out)
        }
        Command::Compare { common } => {
            let (mut cfg, out) = common.resolve()?;
            if let Some(s) = common.seed {
                cfg.eval.seeds = vec![s];
            }
            commands::compare_cmd(&cfg, &out)
        }
        Command::Inspect { path } => commands::inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ksid: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
