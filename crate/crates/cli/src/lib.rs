//! Experiment runner behind the `gatcons` binary.
//!
//! Besides the clap-parsed flags, any `--a.b.c=value` argument (and the
//! top-level leaves `--dataset=`, `--output_dir=`, `--runs=`) patches the
//! JSON config before it is deserialized.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod stats;

pub use config::{ExperimentConfig, Override};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gatcons", version, about = "Train and diagnose GATv2/GCN networks")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parallel runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Base seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train `runs` seeded networks and aggregate their results.
    Train,
    /// Check the conservation identities at a fresh initialization.
    Verify {
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Compare backpropagated gradients with finite differences.
    Gradcheck,
    /// Write per-neuron norms and balancedness of the configured init.
    InitInspect,
    /// Generate a stochastic block model dataset.
    Gen {
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated block sizes.
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
        #[arg(long)]
        p_in: Option<f64>,
        #[arg(long)]
        p_out: Option<f64>,
        #[arg(long)]
        feat_dim: Option<usize>,
        #[arg(long)]
        feature_shift: Option<f64>,
    },
}

const TOP_LEVEL_LEAVES: [&str; 3] = ["dataset", "output_dir", "runs"];

/// Separates config overrides from the arguments clap should see.
pub fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<Override>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let parsed = a.to_str().and_then(|s| s.strip_prefix("--")).and_then(|s| s.split_once('='));
        match parsed {
            Some((key, value)) if key.contains('.') || TOP_LEVEL_LEAVES.contains(&key) => {
                overrides.push(Override::parse(key, value));
            }
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (rest, overrides) = split_overrides(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, ov) =
            split_overrides(os(&["gatcons", "train", "--train.lr=0.05", "--seed=3", "--runs=2", "--jobs", "2"]));
        assert_eq!(rest, os(&["gatcons", "train", "--seed=3", "--jobs", "2"]));
        assert_eq!(ov.len(), 2);
        assert_eq!(ov[0].path, vec!["train", "lr"]);
        assert_eq!(ov[1].path, vec!["runs"]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Runtime(String::new()).exit_code(), 1);
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Verification(String::new()).exit_code(), 3);
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run(["gatcons", "frobnicate"]), 2);
    }
}
