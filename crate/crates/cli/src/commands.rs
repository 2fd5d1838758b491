//! Resolved per-command settings and their handlers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use privacy_funnel::data::{
    generate_colored_digits, generate_identity_embeddings, load_dataset, sample_correlated_gaussians,
    save_dataset_dir, split, ColoredDigitConfig, DigitSource, IdentityEmbeddingConfig, LabeledDataset,
    SensitiveAttribute,
};
use privacy_funnel::evaluation::{
    complexity_csv, evaluate_bundle, plot_tradeoff, tradeoff_csv, tradeoff_sweep, EvalOptions, UtilityMetric,
};
use privacy_funnel::infotheory::{exact_decomposition, oracle_checks, DiscreteTriple, LogBase, Pmf};
use privacy_funnel::mine::{estimate_mi, train_mine, MineConfig};
use privacy_funnel::models::PriorMode;
use privacy_funnel::objectives::DisMode;
use privacy_funnel::training::{
    load_bundle, save_bundle, train as train_model, write_metrics_csv, Group, ModelKind, StepRecord, TrainConfig,
    XiMode,
};

use crate::config::{parse_pmf, sub_seed, write_run_config};
use crate::{CliError, DataKind, DisArg, ModelArg, PriorArg, SensitiveArg, UtilityArg, XiModeArg};

// Independent streams of the root seed.
const STREAM_DATA: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, CliError> {
    p.as_ref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

fn load_data(path: &Path, seed: u64) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    if !path.exists() {
        return Err(CliError::usage(format!("data not found: {}", path.display())));
    }
    Ok(load_dataset(path, sub_seed(seed, STREAM_SPLIT))?)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataSettings {
    pub kind: DataKind,
    pub n: usize,
    pub color_pmf: Option<String>,
    pub sensitive: SensitiveArg,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub identities: usize,
    pub per_identity: usize,
    pub dim: usize,
    pub group_pmf: Option<String>,
    pub group_strength: f64,
    pub within_noise: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        GenDataSettings {
            kind: DataKind::ColoredDigits,
            n: 10_000,
            color_pmf: None,
            sensitive: SensitiveArg::Color,
            idx_images: None,
            idx_labels: None,
            identities: 100,
            per_identity: 20,
            dim: 32,
            group_pmf: None,
            group_strength: 0.8,
            within_noise: 0.15,
            test_fraction: 0.25,
            seed: 0,
            out: None,
        }
    }
}

pub fn gen_data(s: GenDataSettings) -> Result<(), CliError> {
    let out = require(&s.out, "out")?;
    if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
        return Err(CliError::usage("--test-fraction must lie in (0, 1)"));
    }
    let data_seed = sub_seed(s.seed, STREAM_DATA);
    let ds = match s.kind {
        DataKind::ColoredDigits => {
            let color_pmf = match &s.color_pmf {
                Some(t) => parse_pmf(t, "--color-pmf")?,
                None => Pmf::uniform(3)?,
            };
            if color_pmf.len() != 3 {
                return Err(CliError::usage("--color-pmf needs three entries (red, green, blue)"));
            }
            let source = match (&s.idx_images, &s.idx_labels) {
                (Some(images), Some(labels)) => DigitSource::IdxFiles {
                    images: images.clone(),
                    labels: labels.clone(),
                },
                (None, None) => DigitSource::SyntheticGlyphs,
                _ => return Err(CliError::usage("--idx-images and --idx-labels go together")),
            };
            generate_colored_digits(&ColoredDigitConfig {
                n: s.n,
                color_pmf,
                sensitive: match s.sensitive {
                    SensitiveArg::Color => SensitiveAttribute::Color,
                    SensitiveArg::Digit => SensitiveAttribute::Digit,
                },
                source,
                seed: data_seed,
            })?
        }
        DataKind::Embeddings => {
            let group_pmf = match &s.group_pmf {
                Some(t) => parse_pmf(t, "--group-pmf")?,
                None => Pmf::uniform(2)?,
            };
            generate_identity_embeddings(&IdentityEmbeddingConfig {
                n_identities: s.identities,
                samples_per_identity: s.per_identity,
                dim: s.dim,
                group_pmf,
                group_strength: s.group_strength,
                noise: s.within_noise,
                seed: data_seed,
            })?
        }
    };
    let mut parts = split(&ds, &[1.0 - s.test_fraction, s.test_fraction], sub_seed(s.seed, STREAM_SPLIT))?;
    let test = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    save_dataset_dir(&train, &test, out)?;
    write_run_config(out, "gen-data", &s)?;
    println!(
        "wrote {} train / {} test rows ({}, sensitive {}) to {}",
        train.len(),
        test.len(),
        ds.name,
        ds.sensitive_name,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelArg,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub linear_increment: f64,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub group_lr: BTreeMap<String, f64>,
    pub prior: PriorArg,
    pub noise: bool,
    pub dropout: f64,
    pub dis: DisArg,
    pub hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub xi_mode: XiModeArg,
    pub xi_steps: usize,
    pub analytic_kl: bool,
    pub grad_clip: f64,
    pub max_iterations: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSettings {
            data: None,
            out: None,
            seed: 0,
            model: ModelArg::Dispf,
            alpha_start: c.alpha_start,
            alpha_end: c.alpha_end,
            linear_increment: c.linear_increment,
            latent_dim: c.latent_dim,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: privacy_funnel::training::DEFAULT_LEARNING_RATE,
            group_lr: BTreeMap::new(),
            prior: PriorArg::Learned,
            noise: c.noise_enabled,
            dropout: c.dropout_rate,
            dis: DisArg::Auto,
            hidden: c.hidden_widths,
            disc_hidden: c.disc_hidden_widths,
            xi_mode: XiModeArg::BoundTightening,
            xi_steps: c.xi_inner_steps,
            analytic_kl: c.analytic_kl,
            grad_clip: c.grad_clip,
            max_iterations: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, ds: &LabeledDataset) -> Result<TrainConfig, CliError> {
        let mut learning_rates: BTreeMap<Group, f64> = Group::ALL.iter().map(|g| (*g, self.lr)).collect();
        for (name, lr) in &self.group_lr {
            let g: Group = serde_json::from_value(serde_json::Value::String(name.to_lowercase()))
                .map_err(|_| CliError::usage(format!("unknown parameter group `{name}`")))?;
            learning_rates.insert(g, *lr);
        }
        let dis_mode = match self.dis {
            DisArg::Auto if ds.shape.is_image() => DisMode::Bernoulli,
            DisArg::Auto | DisArg::Mse => DisMode::Mse,
            DisArg::Bernoulli => DisMode::Bernoulli,
        };
        let cfg = TrainConfig {
            model: match self.model {
                ModelArg::Dispf => ModelKind::Dispf,
                ModelArg::Genpf => ModelKind::Genpf,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            latent_dim: self.latent_dim,
            alpha_start: self.alpha_start,
            alpha_end: self.alpha_end,
            linear_increment: self.linear_increment,
            learning_rates,
            prior_mode: match self.prior {
                PriorArg::Learned => PriorMode::Learned,
                PriorArg::Fixed => PriorMode::FixedStandard,
            },
            noise_enabled: self.noise,
            dropout_rate: self.dropout,
            dis_mode,
            seed: sub_seed(self.seed, STREAM_TRAIN),
            hidden_widths: self.hidden.clone(),
            disc_hidden_widths: self.disc_hidden.clone(),
            xi_mode: match self.xi_mode {
                XiModeArg::BoundTightening => XiMode::BoundTightening,
                XiModeArg::Literal => XiMode::Literal,
            },
            xi_inner_steps: self.xi_steps,
            analytic_kl: self.analytic_kl,
            grad_clip: self.grad_clip,
            max_iterations: self.max_iterations,
            checkpoint_dir: match (&self.out, self.checkpoint_every) {
                (Some(out), k) if k > 0 => Some(out.join("checkpoints")),
                _ => None,
            },
            checkpoint_every: self.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn train(s: TrainSettings) -> Result<(), CliError> {
    let data = require(&s.data, "data")?;
    let out = require(&s.out, "out")?;
    let (train_ds, _) = load_data(data, s.seed)?;
    let cfg = s.to_config(&train_ds)?;
    write_run_config(out, "train", &s)?;
    let mut last_skip_logged = [false; 7];
    let mut hook = |r: &StepRecord, _: &privacy_funnel::training::Networks| {
        let k = r.step as usize;
        if r.skipped && k < last_skip_logged.len() && !last_skip_logged[k] {
            info!("step {} skipped (fixed prior)", r.step);
            last_skip_logged[k] = true;
        }
        log::debug!("iteration {} step {}: loss {:?}", r.iteration, r.step, r.loss);
    };
    let outcome = train_model(&cfg, &train_ds, Some(&mut hook))?;
    save_bundle(&outcome.bundle, out.join("bundle"))?;
    write_metrics_csv(&outcome.metrics, out.join("metrics.csv"))?;
    println!(
        "trained {} for {} iterations; bundle in {}",
        cfg.model.name(),
        outcome.metrics.len(),
        out.join("bundle").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub bundle: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub mine: bool,
    pub mine_iterations: usize,
    pub target_fmr: f64,
    pub utility: UtilityArg,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let o = EvalOptions::default();
        EvalSettings {
            bundle: None,
            data: None,
            out: None,
            seed: 0,
            mine: true,
            mine_iterations: o.mine_iterations,
            target_fmr: o.target_fmr,
            utility: UtilityArg::Auto,
        }
    }
}

impl EvalSettings {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            seed: sub_seed(self.seed, STREAM_EVAL),
            utility: match self.utility {
                UtilityArg::Auto => UtilityMetric::Auto,
                UtilityArg::Probe => UtilityMetric::ProbeAccuracy,
                UtilityArg::Verification => UtilityMetric::Verification,
            },
            target_fmr: self.target_fmr,
            mine: self.mine,
            mine_iterations: self.mine_iterations,
        }
    }
}

pub fn eval(s: EvalSettings) -> Result<(), CliError> {
    let bundle_dir = require(&s.bundle, "bundle")?;
    let data = require(&s.data, "data")?;
    if !bundle_dir.exists() {
        return Err(CliError::usage(format!("bundle not found: {}", bundle_dir.display())));
    }
    let bundle = load_bundle(bundle_dir)?;
    let (train_ds, test_ds) = load_data(data, s.seed)?;
    let r = evaluate_bundle(&bundle, &train_ds, &test_ds, &s.options())?;
    println!("label entropy H(S)       {:.4} bits", r.label_entropy_bits);
    println!("leakage (plugin)         {:.4} bits", r.leakage_plugin_bits);
    match r.leakage_mine_bits {
        Some(v) => println!("leakage (mine)           {v:.4} bits"),
        None => println!("leakage (mine)           skipped"),
    }
    println!("adversary accuracy       {:.4}", r.adversary_acc);
    let label = if r.utility_kind == "tmr_at_fmr" {
        format!("TMR@FMR={}", s.target_fmr)
    } else {
        r.utility_kind.replace('_', " ")
    };
    match r.utility {
        Some(v) => println!("{label:<24} {v:.4}"),
        None => println!("utility                  n/a (no identity labels)"),
    }
    println!("complexity               {:.4} nats", r.complexity_nats);
    if let Some(out) = &s.out {
        write_run_config(out, "eval", &s)?;
        let path = out.join("eval.json");
        let text = serde_json::to_string_pretty(&r).map_err(|e| CliError::usage(e.to_string()))?;
        write_text(&path, &(text + "\n"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub alphas: Vec<f64>,
    pub mine: bool,
    #[serde(flatten)]
    pub train: TrainSettings,
}

pub fn sweep(s: SweepSettings) -> Result<(), CliError> {
    let data = require(&s.train.data, "data")?;
    let out = require(&s.train.out, "out")?;
    if s.alphas.is_empty() {
        return Err(CliError::usage("--alphas needs at least one value"));
    }
    let (train_ds, test_ds) = load_data(data, s.train.seed)?;
    let template = s.train.to_config(&train_ds)?;
    write_run_config(out, "sweep", &s)?;
    let opts = EvalOptions {
        seed: sub_seed(s.train.seed, STREAM_EVAL),
        mine: s.mine,
        ..EvalOptions::default()
    };
    let (points, bundles) = tradeoff_sweep(&template, &s.alphas, &train_ds, &test_ds, &opts)?;
    for (p, b) in points.iter().zip(&bundles) {
        save_bundle(b, out.join(format!("alpha_{}", p.alpha)))?;
    }
    write_text(&out.join("tradeoff.csv"), &tradeoff_csv(&points))?;
    write_text(&out.join("complexity.csv"), &complexity_csv(&points))?;
    plot_tradeoff(&points, out.join("tradeoff.png"))?;
    println!("alpha,utility,leakage_bits,adversary_acc");
    for p in &points {
        println!(
            "{},{:.4},{:.4},{:.4}",
            p.alpha, p.utility_metric, p.leakage_mi_bits, p.adversary_acc
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// mi
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MiSettings {
    pub rho: f64,
    pub n: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub lr: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for MiSettings {
    fn default() -> Self {
        let m = MineConfig::new(1, 1);
        MiSettings {
            rho: 0.9,
            n: 100_000,
            iterations: m.n_iterations,
            batch_size: m.batch_size,
            hidden: m.hidden_size,
            lr: m.learning_rate,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct MiResult {
    rho: f64,
    n: usize,
    estimate_nats: f64,
    analytic_nats: f64,
}

pub fn mi(s: MiSettings) -> Result<(), CliError> {
    if !(s.rho > -1.0 && s.rho < 1.0) {
        return Err(CliError::usage("--rho must lie in (-1, 1)"));
    }
    let pairs = sample_correlated_gaussians(s.rho, s.n, sub_seed(s.seed, STREAM_DATA))?;
    let cfg = MineConfig {
        hidden_size: s.hidden,
        batch_size: s.batch_size,
        n_iterations: s.iterations,
        learning_rate: s.lr,
        n_window: MineConfig::new(1, 1).n_window.min(s.iterations),
        seed: sub_seed(s.seed, STREAM_TRAIN),
        ..MineConfig::new(1, 1)
    };
    let est = train_mine(cfg, &pairs.x, &pairs.y)?;
    let estimate = estimate_mi(&est, &pairs.x, &pairs.y, sub_seed(s.seed, STREAM_EVAL))?;
    println!("rho {}  n {}", s.rho, s.n);
    println!("mine estimate   {estimate:.5} nats");
    println!("analytic        {:.5} nats", pairs.analytic_mi);
    if let Some(out) = &s.out {
        write_run_config(out, "mi", &s)?;
        let r = MiResult {
            rho: s.rho,
            n: s.n,
            estimate_nats: estimate,
            analytic_nats: pairs.analytic_mi,
        };
        let text = serde_json::to_string_pretty(&r).map_err(|e| CliError::usage(e.to_string()))?;
        write_text(&out.join("mi.json"), &(text + "\n"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub trials: usize,
    pub triple: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            trials: 1000,
            triple: None,
            seed: 0,
            out: None,
        }
    }
}

pub fn oracle(s: OracleSettings) -> Result<(), CliError> {
    if let Some(path) = &s.triple {
        let t = DiscreteTriple::from_text_file(path)?;
        let d = exact_decomposition(&t);
        let bits = |v: f64| LogBase::Two.from_nats(v);
        println!("triple {}", path.display());
        println!("  I(S;Z)    {:.6} bits", bits(d.i_sz));
        println!("  I(X;Z)    {:.6} bits", bits(d.i_xz));
        println!("  H(X|S)    {:.6} bits", bits(d.h_x_given_s));
        println!("  H(X|S,Z)  {:.6} bits", bits(d.h_x_given_sz));
        println!("  identity violation {:.3e}", d.identity_violation());
    }
    let r = oracle_checks(s.trials, s.seed)?;
    println!("{} random triples, max violations (nats):", r.trials);
    println!("  decomposition  {:.3e}", r.decomposition);
    println!("  complexity     {:.3e}", r.complexity);
    println!("  sandwich       {:.3e}", r.sandwich);
    println!("  tightness      {:.3e}", r.tightness);
    if let Some(out) = &s.out {
        write_run_config(out, "oracle", &s)?;
        let text = serde_json::to_string_pretty(&r).map_err(|e| CliError::usage(e.to_string()))?;
        write_text(&out.join("oracle.json"), &(text + "\n"))?;
    }
    Ok(())
}
