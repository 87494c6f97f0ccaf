use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use tvcomb::smoother::KernelKind;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "tvcomb", version, about = "Time-varying forecast combination")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "TVC_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the weight path over the sample.
    Estimate(SmoothArgs),
    /// One-step-ahead combined forecast from the final CSV row.
    Forecast(SmoothArgs),
    /// Cross-validation curve over a bandwidth grid.
    Cv(SmoothArgs),
    /// Two-stage penalized estimation with forecast selection.
    TwoStage(TwoStageArgs),
    /// Monte Carlo tables.
    Simulate(SimulateArgs),
    /// Accuracy table and forecast comparison tests for OOS forecasts.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Input CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Name of the target column.
    #[arg(long)]
    pub target: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SmoothArgs {
    #[command(flatten)]
    pub common: Common,
    /// Fixed bandwidth as a fraction of the sample.
    #[arg(long, conflicts_with = "cv")]
    pub bandwidth: Option<f64>,
    /// Cross-validation grid `c1,c2,n` over `[c1 T^-1/5, c2 T^-1/5]`.
    #[arg(long)]
    pub cv: Option<String>,
    #[arg(long)]
    pub kernel: Option<KernelKind>,
}

#[derive(Debug, Args)]
pub struct TwoStageArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated stage-2 penalty grid (default: automatic log grid).
    #[arg(long)]
    pub lambda_grid: Option<String>,
    /// Constant `C` of the bandwidth rule.
    #[arg(long)]
    pub bandwidth_constant: Option<f64>,
    #[arg(long)]
    pub kernel: Option<KernelKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Table1,
    Table2,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub design: Option<Design>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated sample sizes.
    #[arg(long)]
    pub t_list: Option<String>,
    /// Comma-separated numbers of redundant forecasts.
    #[arg(long)]
    pub j_list: Option<String>,
    #[arg(long)]
    pub n_oos: Option<usize>,
    /// Cross-validation grid `c1,c2,n` for the two-forecast design.
    #[arg(long)]
    pub cv: Option<String>,
    #[arg(long)]
    pub kernel: Option<KernelKind>,
    /// Reduced run: 5 replications at T=50 (J=10 for table2).
    #[arg(long)]
    pub smoke: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// One-sided DM comparison `A<B` (repeatable).
    #[arg(long = "compare")]
    pub compare: Vec<String>,
    /// Benchmark column for the reality check against every other method.
    #[arg(long)]
    pub benchmark: Option<String>,
    /// Bootstrap replicates.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restart probability of the stationary bootstrap.
    #[arg(long)]
    pub q: Option<f64>,
}

/// Values readable from `--config`. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub target: Option<String>,
    pub out: Option<PathBuf>,
    pub bandwidth: Option<f64>,
    pub cv: Option<String>,
    pub kernel: Option<KernelKind>,
    pub lambda_grid: Option<String>,
    pub bandwidth_constant: Option<f64>,
    pub design: Option<Design>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub t_list: Option<String>,
    pub j_list: Option<String>,
    pub n_oos: Option<usize>,
    pub compare: Option<Vec<String>>,
    pub benchmark: Option<String>,
    pub q: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
            }
        }
    }
}

/// Parses `c1,c2,n`.
pub fn parse_cv(s: &str) -> Result<(f64, f64, usize), CliError> {
    let bad = || CliError::Usage(format!("--cv expects c1,c2,n, got `{s}`"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
    ))
}

pub fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{flag}: cannot parse `{v}`")))
        })
        .collect()
}
