//! Library side of the `svda-lab` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod tables;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use svda_core::harness::DiagnosticSettings;

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Generate synthetic scenes and manifests
    Gen,
    /// Train one model and export logs
    Train,
    /// Evaluate checkpoints on a manifest
    Eval,
    /// Per-layer indicator distributions for a checkpoint
    Diagnose,
    /// Train both attention mechanisms and summarize indicator trends
    Compare,
}

#[derive(Debug, Parser)]
#[command(name = "svda-lab", version, about = "Spectral attention experiments on synthetic depth scenes")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// Run configuration (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint file; repeat to evaluate several
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Manifest of image/depth tensor pairs
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Spectral sparsity threshold
    #[arg(long)]
    pub eps: Option<f64>,
    /// Standard deviation of the robustness perturbation
    #[arg(long = "noise-std")]
    pub noise_std: Option<f64>,
    /// Perturbation draws for robustness
    #[arg(long)]
    pub draws: Option<usize>,
    /// Output directory override
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn need<'a, T>(value: &'a Option<T>, flag: &str, command: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{command} requires --{flag}")))
}

impl Args {
    pub fn diagnostic_settings(&self) -> Result<DiagnosticSettings> {
        let mut s = DiagnosticSettings::default();
        if let Some(eps) = self.eps {
            if !(eps >= 0.0) {
                return Err(CliError::Usage(format!("--eps must be non-negative, got {eps}")));
            }
            s.sparsity_eps = eps;
        }
        if let Some(std) = self.noise_std {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(CliError::Usage(format!("--noise-std must be finite and non-negative, got {std}")));
            }
            s.noise_std = std;
        }
        if let Some(draws) = self.draws {
            if draws == 0 {
                return Err(CliError::Usage("--draws must be at least 1".into()));
            }
            s.draws = draws;
        }
        Ok(s)
    }
}

pub fn run(args: &Args, stdout: &mut dyn Write) -> Result<()> {
    let out = args.out.as_deref();
    match args.command {
        Command::Gen => commands::cmd_gen(need(&args.config, "config", "gen")?, out, stdout).map(drop),
        Command::Train => commands::cmd_train(need(&args.config, "config", "train")?, out, stdout).map(drop),
        Command::Eval => {
            commands::cmd_eval(&args.checkpoint, need(&args.manifest, "manifest", "eval")?, out, stdout).map(drop)
        }
        Command::Diagnose => {
            let checkpoint = match args.checkpoint.as_slice() {
                [one] => one,
                _ => return Err(CliError::Usage("diagnose requires exactly one --checkpoint".into())),
            };
            let manifest = need(&args.manifest, "manifest", "diagnose")?;
            commands::cmd_diagnose(checkpoint, manifest, &args.diagnostic_settings()?, out, stdout).map(drop)
        }
        Command::Compare => commands::cmd_compare(need(&args.config, "config", "compare")?, out, stdout).map(drop),
    }
}
