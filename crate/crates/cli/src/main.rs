//! `pfunnel`: generate data, train DisPF/GenPF models, evaluate released
//! representations, sweep α, and run the MINE and discrete-oracle self-tests.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize, Serializer};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<privacy_funnel::Error> for CliError {
    fn from(e: privacy_funnel::Error) -> Self {
        use privacy_funnel::Error as E;
        match e {
            E::NonFinite { .. } | E::Numeric(_) => CliError::numeric(e.to_string()),
            other => CliError::usage(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "pfunnel", version, about = "Privacy-funnel training and evaluation")]
struct Cli {
    /// JSON config file (keys are flag names with underscores); flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// -v for progress, -vv for per-step detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory (train/test PFEMB1 files).
    GenData(GenDataFlags),
    /// Train one model and write its bundle and metrics.
    Train(TrainFlags),
    /// Evaluate a bundle on a dataset.
    Eval(EvalFlags),
    /// Train and evaluate one bundle per α; write the trade-off CSV.
    Sweep(SweepFlags),
    /// MINE self-test on a correlated bivariate Gaussian.
    Mi(MiFlags),
    /// Exact identity and bound checks on random discrete triples.
    Oracle(OracleFlags),
}

// ---------------------------------------------------------------------------
// Enumerated flag values
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    #[default]
    ColoredDigits,
    Embeddings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitiveArg {
    #[default]
    Color,
    Digit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    #[default]
    Dispf,
    Genpf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorArg {
    #[default]
    Learned,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisArg {
    /// Bernoulli for images, squared error for embeddings.
    #[default]
    Auto,
    Bernoulli,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XiModeArg {
    #[default]
    BoundTightening,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityArg {
    #[default]
    Auto,
    Probe,
    Verification,
}

// ---------------------------------------------------------------------------
// Flags. Every option is optional so that config-file values survive unless
// overridden; only options actually given are serialized.
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
struct GenDataFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<DataKind>,
    /// Number of colored digits.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    /// Color pmf over red,green,blue (default uniform).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    color_pmf: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sensitive: Option<SensitiveArg>,
    /// Tint digits read from IDX files instead of synthetic glyphs.
    #[arg(long, requires = "idx_labels")]
    #[serde(skip_serializing_if = "Option::is_none")]
    idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    #[serde(skip_serializing_if = "Option::is_none")]
    idx_labels: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    identities: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    per_identity: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    /// Sensitive-group pmf for embeddings (default uniform over 2).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    group_pmf: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    group_strength: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    within_noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

fn parse_group_lr(s: &str) -> Result<(String, f64), String> {
    let (g, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected GROUP=RATE, got `{s}`"))?;
    let v: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((g.trim().to_string(), v))
}

fn as_map<S: Serializer>(pairs: &[(String, f64)], s: S) -> Result<S::Ok, S::Error> {
    s.collect_map(pairs.iter().map(|(k, v)| (k, v)))
}

#[derive(Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelArg>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_start: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_end: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    linear_increment: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    latent_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    /// Learning rate for every parameter group.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    /// Per-group learning rate, e.g. `xi=0.01` (groups: phi, theta, xi,
    /// psi, eta, omega, tau). Repeatable.
    #[arg(long, value_parser = parse_group_lr)]
    #[serde(skip_serializing_if = "Vec::is_empty", serialize_with = "as_map")]
    group_lr: Vec<(String, f64)>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    prior: Option<PriorArg>,
    /// Add latent noise of variance 1/(2πe) to every latent sample.
    #[arg(long, num_args = 0, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dropout: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dis: Option<DisArg>,
    /// Encoder hidden widths, comma-separated (the decoder mirrors them).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    disc_hidden: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    xi_mode: Option<XiModeArg>,
    /// Classifier-only updates before each DisPF first step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    xi_steps: Option<usize>,
    /// Drop the closed-form KL term from the GenPF first step.
    #[arg(long = "no-analytic-kl", num_args = 0, default_missing_value = "false")]
    #[serde(skip_serializing_if = "Option::is_none")]
    analytic_kl: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_clip: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iterations: Option<usize>,
    /// Save a checkpoint under OUT/checkpoints every this many epochs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Serialize)]
struct EvalFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bundle: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Also write eval.json and run_config.json here.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Skip the (slow) MINE leakage estimate.
    #[arg(long = "no-mine", num_args = 0, default_missing_value = "false")]
    #[serde(skip_serializing_if = "Option::is_none")]
    mine: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mine_iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    target_fmr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    utility: Option<UtilityArg>,
}

#[derive(Args, Serialize)]
struct SweepFlags {
    /// Comma-separated α values; one bundle is trained per value.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    alphas: Option<Vec<f64>>,
    #[arg(long = "with-mine", num_args = 0, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    mine: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
}

#[derive(Args, Serialize)]
struct MiFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct OracleFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<usize>,
    /// Also report the exact decomposition of the triple in this file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    triple: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => config::read_config_file(p)?,
        None => Default::default(),
    };
    match cli.command {
        Command::GenData(f) => commands::gen_data(config::resolve(&file, &f)?),
        Command::Train(f) => commands::train(config::resolve(&file, &f)?),
        Command::Eval(f) => commands::eval(config::resolve(&file, &f)?),
        Command::Sweep(f) => commands::sweep(config::resolve(&file, &f)?),
        Command::Mi(f) => commands::mi(config::resolve(&file, &f)?),
        Command::Oracle(f) => commands::oracle(config::resolve(&file, &f)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
