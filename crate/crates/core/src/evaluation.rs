//! Measurements on released representations: label entropy, leakage MI,
//! an independent linear adversary, verification metrics and the α sweep.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, DataShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::infotheory::LogBase;
use crate::mine::{estimate_mi, train_mine, MineConfig};
use crate::models::{kl_batch, one_hot, GaussianBatch};
use crate::nn::{softmax_rows, Adam, Linear, Params};
use crate::training::{train, ModelKind, ModuleBundle, TrainConfig};

/// Plug-in entropy of the empirical label distribution, in bits.
pub fn label_entropy(labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("entropy of an empty label set"));
    }
    let k = labels.iter().max().expect("non-empty") + 1;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-4,
            steps: 300,
            learning_rate: 0.05,
        }
    }
}

/// Multinomial logistic regression on standardized features, trained
/// full-batch from zero weights (hence deterministic).
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    layer: Linear<f64>,
}

impl LinearProbe {
    pub fn fit(
        z: &Array2<f64>,
        labels: &[usize],
        classes: usize,
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        if z.nrows() != labels.len() || z.nrows() == 0 {
            return Err(Error::validation(
                "probe needs a non-empty set of paired rows",
            ));
        }
        let mean = z.mean_axis(Axis(0)).expect("non-empty");
        let scale = z
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
        let mut probe = LinearProbe {
            mean,
            scale,
            layer: Linear::from_parts(Array2::zeros((z.ncols(), classes)), Array1::zeros(classes)),
        };
        let x = probe.standardize(z);
        let target = one_hot::<f64>(labels, classes)?;
        let inv_n = 1.0 / z.nrows() as f64;
        let mut adam = Adam::new(cfg.learning_rate);
        for _ in 0..cfg.steps {
            probe.layer.zero_grad();
            let p = softmax_rows(&probe.layer.forward(&x));
            probe.layer.backward(&x, &((p - &target) * inv_n), true);
            let l2 = cfg.l2;
            probe
                .layer
                .visit_mut(&mut |w, g| g.iter_mut().zip(w.iter()).for_each(|(g, w)| *g += l2 * w));
            adam.step(&mut probe.layer);
        }
        Ok(probe)
    }

    fn standardize(&self, z: &Array2<f64>) -> Array2<f64> {
        (z - &self.mean) * &self.scale
    }

    pub fn predict_proba(&self, z: &Array2<f64>) -> Array2<f64> {
        softmax_rows(&self.layer.forward(&self.standardize(z)))
    }

    pub fn predict(&self, z: &Array2<f64>) -> Vec<usize> {
        argmax_rows(&self.predict_proba(z))
    }

    pub fn accuracy(&self, z: &Array2<f64>, labels: &[usize]) -> f64 {
        accuracy(&self.predict(z), labels)
    }
}

fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(i, _)| i)
        })
        .collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

fn check_split(
    z_train: &Array2<f64>,
    s_train: &[usize],
    z_test: &Array2<f64>,
    s_test: &[usize],
) -> Result<()> {
    if z_train.nrows() == 0 || z_test.nrows() == 0 {
        return Err(Error::validation("train and test splits must be non-empty"));
    }
    if z_train.nrows() != s_train.len() || z_test.nrows() != s_test.len() {
        return Err(Error::validation(
            "representations and labels differ in length",
        ));
    }
    if z_train.ncols() != z_test.ncols() {
        return Err(Error::DimensionMismatch {
            expected: z_train.ncols(),
            found: z_test.ncols(),
        });
    }
    Ok(())
}

/// Test accuracy of a probe trained on `(z_train, labels_train)`. Falls back
/// to the majority class when training labels contain a single class.
pub fn probe_accuracy(
    z_train: &Array2<f64>,
    s_train: &[usize],
    z_test: &Array2<f64>,
    s_test: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    check_split(z_train, s_train, z_test, s_test)?;
    let first = s_train[0];
    if s_train.iter().all(|s| *s == first) {
        warn!("adversary training set has a single class; reporting majority-class accuracy");
        return Ok(accuracy(&vec![first; s_test.len()], s_test));
    }
    let classes = s_train.iter().chain(s_test).max().expect("non-empty") + 1;
    Ok(LinearProbe::fit(z_train, s_train, classes, cfg)?.accuracy(z_test, s_test))
}

/// Accuracy of an independent linear adversary predicting `s` from `z`.
pub fn adversary_accuracy(
    z_train: &Array2<f64>,
    s_train: &[usize],
    z_test: &Array2<f64>,
    s_test: &[usize],
) -> Result<f64> {
    probe_accuracy(z_train, s_train, z_test, s_test, &ProbeConfig::default())
}

// ---------------------------------------------------------------------------
// Leakage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageMethod {
    Mine,
    PluginClassifier,
}

/// `I(S; Z)` in bits, clipped to `[0, H(S)]`. The classifier form splits the
/// pairs 50/50 (stratified, seeded) and reports `H(S) − H_ce(S | Z)` on the
/// held-out half.
pub fn leakage_mi(z: &Array2<f64>, s: &[usize], method: LeakageMethod, seed: u64) -> Result<f64> {
    match method {
        LeakageMethod::PluginClassifier => plugin_leakage(z, s, seed),
        LeakageMethod::Mine => {
            let classes = s.iter().max().map_or(0, |m| m + 1);
            let cfg = MineConfig {
                seed,
                ..MineConfig::new(z.ncols(), classes)
            };
            mine_leakage(z, s, cfg)
        }
    }
}

fn plugin_leakage(z: &Array2<f64>, s: &[usize], seed: u64) -> Result<f64> {
    if z.nrows() != s.len() || s.len() < 4 {
        return Err(Error::validation("need at least four paired rows"));
    }
    let h = label_entropy(s)?;
    let parts = split_indices(s, &[0.5, 0.5], seed)?;
    let (tr, te) = (&parts[0], &parts[1]);
    let s_tr: Vec<usize> = tr.iter().map(|&i| s[i]).collect();
    let s_te: Vec<usize> = te.iter().map(|&i| s[i]).collect();
    let z_tr = z.select(Axis(0), tr);
    let z_te = z.select(Axis(0), te);
    let classes = s.iter().max().expect("non-empty") + 1;
    if s_tr.iter().all(|v| *v == s_tr[0]) {
        return Ok(0.0);
    }
    let probe = LinearProbe::fit(&z_tr, &s_tr, classes, &ProbeConfig::default())?;
    let p = probe.predict_proba(&z_te);
    let ce = s_te
        .iter()
        .enumerate()
        .map(|(i, &c)| -p[[i, c]].max(1e-300).log2())
        .sum::<f64>()
        / s_te.len() as f64;
    Ok((h - ce).clamp(0.0, h))
}

/// MINE estimate on `(z, one_hot(s))`, converted to bits and clipped.
pub fn mine_leakage(z: &Array2<f64>, s: &[usize], cfg: MineConfig) -> Result<f64> {
    let h = label_entropy(s)?;
    let classes = s.iter().max().expect("non-empty") + 1;
    let y = one_hot::<f64>(s, classes)?;
    let seed = cfg.seed;
    let est = train_mine(cfg, z, &y)?;
    let nats = estimate_mi(&est, z, &y, seed ^ 0x5eed)?;
    Ok(LogBase::Two.from_nats(nats).clamp(0.0, h))
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

pub const DEFAULT_TARGET_FMR: f64 = 0.1;
pub const MAX_PAIRS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub threshold: f64,
    pub fmr: f64,
    pub tmr: f64,
    pub acc: f64,
    pub n_genuine: usize,
    pub n_imposter: usize,
}

/// Cosine similarities of genuine (same identity) and imposter pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn reservoir_push(buf: &mut Vec<f64>, seen: &mut usize, v: f64, cap: usize, rng: &mut ChaCha8Rng) {
    *seen += 1;
    if buf.len() < cap {
        buf.push(v);
    } else {
        let j = rng.random_range(0..*seen);
        if j < cap {
            buf[j] = v;
        }
    }
}

/// All pairs `i < j`, each class reservoir-sampled down to `max_pairs`.
pub fn pair_scores(
    emb: &Array2<f64>,
    ids: &[u32],
    max_pairs: usize,
    seed: u64,
) -> Result<PairScores> {
    if emb.nrows() != ids.len() {
        return Err(Error::validation(
            "embeddings and identities differ in length",
        ));
    }
    let mut distinct = ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::validation(
            "verification needs at least two identities",
        ));
    }
    let rows: Vec<Vec<f64>> = emb.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut genuine, mut imposter) = (Vec::new(), Vec::new());
    let (mut seen_g, mut seen_i) = (0, 0);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let sim = cosine_similarity(&rows[i], &rows[j]);
            if ids[i] == ids[j] {
                reservoir_push(&mut genuine, &mut seen_g, sim, max_pairs, &mut rng);
            } else {
                reservoir_push(&mut imposter, &mut seen_i, sim, max_pairs, &mut rng);
            }
        }
    }
    if genuine.is_empty() {
        return Err(Error::validation(
            "no genuine pairs: every identity has a single sample",
        ));
    }
    Ok(PairScores { genuine, imposter })
}

impl PairScores {
    /// A pair is accepted when its similarity is at least `threshold`.
    pub fn at_threshold(&self, threshold: f64) -> VerificationResult {
        let ta = self.genuine.iter().filter(|s| **s >= threshold).count();
        let fa = self.imposter.iter().filter(|s| **s >= threshold).count();
        let (ng, ni) = (self.genuine.len(), self.imposter.len());
        VerificationResult {
            threshold,
            fmr: fa as f64 / ni as f64,
            tmr: ta as f64 / ng as f64,
            acc: (ta + ni - fa) as f64 / (ng + ni) as f64,
            n_genuine: ng,
            n_imposter: ni,
        }
    }

    /// The operating point whose FMR is the largest value not above
    /// `target_fmr`; among equal FMRs the lowest threshold (highest TMR).
    pub fn tmr_at_fmr(&self, target_fmr: f64) -> VerificationResult {
        let mut imp = self.imposter.clone();
        imp.sort_by(f64::total_cmp);
        let mut gen = self.genuine.clone();
        gen.sort_by(f64::total_cmp);
        let ni = imp.len() as f64;
        let mut candidates: Vec<f64> = imp.iter().chain(&gen).copied().collect();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let count_ge = |v: &[f64], t: f64| v.len() - v.partition_point(|x| *x < t);
        for t in candidates {
            if count_ge(&imp, t) as f64 / ni <= target_fmr {
                return self.at_threshold(t);
            }
        }
        self.at_threshold(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub results: Vec<VerificationResult>,
    pub at_target: VerificationResult,
}

pub fn verification_metrics(
    emb: &Array2<f64>,
    ids: &[u32],
    thresholds: &[f64],
    target_fmr: f64,
    seed: u64,
) -> Result<VerificationReport> {
    let scores = pair_scores(emb, ids, MAX_PAIRS, seed)?;
    if scores.imposter.is_empty() {
        return Err(Error::validation("no imposter pairs"));
    }
    Ok(VerificationReport {
        results: thresholds.iter().map(|t| scores.at_threshold(*t)).collect(),
        at_target: scores.tmr_at_fmr(target_fmr),
    })
}

// ---------------------------------------------------------------------------
// Bundle evaluation and sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityMetric {
    /// Digit-probe accuracy for images, TMR@FMR for vector embeddings.
    Auto,
    /// Accuracy of a linear probe predicting identity labels.
    ProbeAccuracy,
    Verification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seed: u64,
    pub utility: UtilityMetric,
    pub target_fmr: f64,
    /// Also run the MINE leakage estimate (slow).
    pub mine: bool,
    pub mine_iterations: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            utility: UtilityMetric::Auto,
            target_fmr: DEFAULT_TARGET_FMR,
            mine: false,
            mine_iterations: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label_entropy_bits: f64,
    pub leakage_plugin_bits: f64,
    pub leakage_mine_bits: Option<f64>,
    pub adversary_acc: f64,
    pub utility: Option<f64>,
    pub utility_kind: String,
    /// Mean KL from the posterior to `N(0, I)`, in nats.
    pub complexity_nats: f64,
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

fn utility(
    opts: &EvalOptions,
    shape: &DataShape,
    z_train: &Array2<f64>,
    train: &LabeledDataset,
    z_test: &Array2<f64>,
    test: &LabeledDataset,
) -> Result<(Option<f64>, &'static str)> {
    let (Some(id_tr), Some(id_te)) = (&train.identity, &test.identity) else {
        return Ok((None, "none"));
    };
    let kind = match opts.utility {
        UtilityMetric::Auto if shape.is_image() => UtilityMetric::ProbeAccuracy,
        UtilityMetric::Auto => UtilityMetric::Verification,
        k => k,
    };
    match kind {
        UtilityMetric::ProbeAccuracy => {
            let a: Vec<usize> = id_tr.iter().map(|v| *v as usize).collect();
            let b: Vec<usize> = id_te.iter().map(|v| *v as usize).collect();
            Ok((
                Some(probe_accuracy(
                    z_train,
                    &a,
                    z_test,
                    &b,
                    &ProbeConfig::default(),
                )?),
                "identity_probe_accuracy",
            ))
        }
        _ => {
            let r = verification_metrics(z_test, id_te, &[], opts.target_fmr, opts.seed)?;
            Ok((Some(r.at_target.tmr), "tmr_at_fmr"))
        }
    }
}

/// Evaluates the released representations of a bundle. The adversary and
/// utility probes train on `train` and are scored on `test`; leakage is
/// measured on `test`.
pub fn evaluate_bundle(
    bundle: &ModuleBundle,
    train: &LabeledDataset,
    test: &LabeledDataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let z_train = to_f64(&bundle.release(&train.features, opts.seed)?);
    let z_test = to_f64(&bundle.release(&test.features, opts.seed ^ 1)?);
    let s_train = train.sensitive_usize();
    let s_test = test.sensitive_usize();
    let adversary_acc = adversary_accuracy(&z_train, &s_train, &z_test, &s_test)?;
    let leakage_plugin_bits =
        leakage_mi(&z_test, &s_test, LeakageMethod::PluginClassifier, opts.seed)?;
    let leakage_mine_bits = if opts.mine {
        let classes = s_test.iter().max().map_or(1, |m| m + 1);
        let base = MineConfig::new(z_test.ncols(), classes);
        let cfg = MineConfig {
            seed: opts.seed,
            n_iterations: opts.mine_iterations,
            n_window: base.n_window.min(opts.mine_iterations),
            ..base
        };
        Some(mine_leakage(&z_test, &s_test, cfg)?)
    } else {
        None
    };
    let (utility, kind) = utility(opts, &train.shape, &z_train, train, &z_test, test)?;
    let post = bundle.networks.encoder.forward(&test.features)?;
    let complexity_nats = kl_batch(&post, &GaussianBatch::standard(post.len(), post.dim()))?.value;
    Ok(EvalReport {
        label_entropy_bits: label_entropy(&s_test)?,
        leakage_plugin_bits,
        leakage_mine_bits,
        adversary_acc,
        utility,
        utility_kind: kind.into(),
        complexity_nats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub alpha: f64,
    pub utility_metric: f64,
    pub leakage_mi_bits: f64,
    pub adversary_acc: f64,
    pub model_kind: ModelKind,
    pub complexity_nats: f64,
}

pub const TRADEOFF_HEADER: &str = "alpha,utility,leakage_bits,adversary_acc";

pub fn tradeoff_csv(points: &[TradeoffPoint]) -> String {
    let mut out = format!("{TRADEOFF_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.alpha, p.utility_metric, p.leakage_mi_bits, p.adversary_acc
        );
    }
    out
}

pub fn complexity_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from("alpha,complexity_nats\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.alpha, p.complexity_nats);
    }
    out
}

/// Trains one bundle per α (fixed α, shared seed) and evaluates each on
/// `test`. Returns the points alongside the trained bundles.
pub fn tradeoff_sweep(
    template: &TrainConfig,
    alphas: &[f64],
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    opts: &EvalOptions,
) -> Result<(Vec<TradeoffPoint>, Vec<ModuleBundle>)> {
    if alphas.is_empty() {
        return Err(Error::validation("sweep needs at least one alpha"));
    }
    let mut points = Vec::with_capacity(alphas.len());
    let mut bundles = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = template.clone().with_alpha(alpha);
        let bundle = train(&cfg, train_ds, None)?.bundle;
        let r = evaluate_bundle(&bundle, train_ds, test_ds, opts)?;
        info!(
            "alpha {alpha}: utility {:?}, leakage {:.4} bits, adversary {:.4}",
            r.utility, r.leakage_plugin_bits, r.adversary_acc
        );
        points.push(TradeoffPoint {
            alpha,
            utility_metric: r.utility.unwrap_or(f64::NAN),
            leakage_mi_bits: r.leakage_plugin_bits,
            adversary_acc: r.adversary_acc,
            model_kind: template.model,
            complexity_nats: r.complexity_nats,
        });
        bundles.push(bundle);
    }
    Ok((points, bundles))
}

/// Line plot of utility (blue), adversary accuracy (red) and leakage
/// normalized to its maximum (green) against the sweep index.
pub fn plot_tradeoff(points: &[TradeoffPoint], path: impl AsRef<Path>) -> Result<()> {
    const W: u32 = 480;
    const H: u32 = 320;
    const PAD: f64 = 24.0;
    let path = path.as_ref();
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    for x in PAD as u32..W - PAD as u32 {
        img.put_pixel(x, H - PAD as u32, image::Rgb([0, 0, 0]));
    }
    for y in PAD as u32..=H - PAD as u32 {
        img.put_pixel(PAD as u32, y, image::Rgb([0, 0, 0]));
    }
    let max_leak = points
        .iter()
        .map(|p| p.leakage_mi_bits)
        .fold(0.0, f64::max)
        .max(1e-12);
    let n = points.len().max(2) - 1;
    let to_px = |i: usize, v: f64| {
        let x = PAD + (W as f64 - 2.0 * PAD) * i as f64 / n as f64;
        let y = H as f64 - PAD - (H as f64 - 2.0 * PAD) * v.clamp(0.0, 1.0);
        (x, y)
    };
    let series: [(fn(&TradeoffPoint) -> f64, [u8; 3]); 2] = [
        (|p| p.utility_metric, [30, 90, 220]),
        (|p| p.adversary_acc, [220, 40, 40]),
    ];
    let mut lines: Vec<(Vec<f64>, [u8; 3])> = series
        .iter()
        .map(|(f, c)| (points.iter().map(f).collect(), *c))
        .collect();
    lines.push((
        points
            .iter()
            .map(|p| p.leakage_mi_bits / max_leak)
            .collect(),
        [30, 160, 60],
    ));
    for (values, color) in lines {
        for i in 0..values.len() {
            let (x0, y0) = to_px(i, values[i]);
            let (x1, y1) = if i + 1 < values.len() {
                to_px(i + 1, values[i + 1])
            } else {
                (x0, y0)
            };
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                if x.is_finite()
                    && y.is_finite()
                    && x >= 0.0
                    && y >= 0.0
                    && (x as u32) < W
                    && (y as u32) < H
                {
                    img.put_pixel(x as u32, y as u32, image::Rgb(color));
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    fn balanced(n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|i| i % k).collect()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(label_entropy(&balanced(100, 2)).unwrap(), 1.0);
        assert!((label_entropy(&balanced(600, 6)).unwrap() - 2.585).abs() < 1e-3);
        assert!(label_entropy(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..100_000)
            .map(|_| {
                let u: f64 = rng.random();
                if u < 0.5 {
                    0
                } else if u < 0.5 + 1.0 / 6.0 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let direct = -(0.5f64 * 0.5f64.log2()
            + (1.0 / 6.0) * (1.0f64 / 6.0).log2()
            + (1.0 / 3.0) * (1.0f64 / 3.0).log2());
        assert!((label_entropy(&labels).unwrap() - direct).abs() < 0.01);
    }

    #[test]
    fn adversary_on_one_hot_noise_and_flips() {
        let s = balanced(600, 3);
        let z = one_hot::<f64>(&s, 3).unwrap();
        assert_eq!(adversary_accuracy(&z, &s, &z, &s).unwrap(), 1.0);

        let zt = noise(3000, 8, 2);
        let ze = noise(3000, 8, 3);
        let s3 = balanced(3000, 3);
        let acc = adversary_accuracy(&zt, &s3, &ze, &s3).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 0.05, "{acc}");

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut flipped = |s: &[usize]| -> Array2<f64> {
            let f: Vec<usize> = s
                .iter()
                .map(|&v| if rng.random::<f64>() < 0.2 { 1 - v } else { v })
                .collect();
            one_hot(&f, 2).unwrap()
        };
        let s2 = balanced(4000, 2);
        let (a, b) = (flipped(&s2), flipped(&s2));
        let acc = adversary_accuracy(&a, &s2, &b, &s2).unwrap();
        assert!((acc - 0.8).abs() < 0.05, "{acc}");
    }

    #[test]
    fn single_class_adversary_reports_majority() {
        let z = noise(10, 2, 0);
        let acc = adversary_accuracy(&z, &[1; 10], &z, &[1, 1, 1, 1, 1, 1, 1, 0, 0, 0]).unwrap();
        assert_eq!(acc, 0.7);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let s = balanced(3000, 4);
        let z = one_hot::<f64>(&s, 4).unwrap();
        let mut shuffled = s.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let acc = adversary_accuracy(
            &z.slice(ndarray::s![..1500, ..]).to_owned(),
            &shuffled[..1500],
            &z.slice(ndarray::s![1500.., ..]).to_owned(),
            &shuffled[1500..],
        )
        .unwrap();
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
    }

    #[test]
    fn plugin_leakage_limits() {
        let s = balanced(2000, 2);
        let z = one_hot::<f64>(&s, 2).unwrap();
        let full = leakage_mi(&z, &s, LeakageMethod::PluginClassifier, 0).unwrap();
        assert!(full >= 0.9 && full <= 1.0, "{full}");
        let indep = leakage_mi(&noise(2000, 4, 5), &s, LeakageMethod::PluginClassifier, 0).unwrap();
        assert!(indep <= 0.05, "{indep}");
    }

    #[test]
    fn mine_leakage_limits() {
        let s = balanced(2000, 2);
        let z = one_hot::<f64>(&s, 2).unwrap() + noise(2000, 2, 6) * 0.05;
        let cfg = MineConfig {
            batch_size: 256,
            n_iterations: 800,
            n_window: 200,
            ..MineConfig::new(2, 2)
        };
        let full = mine_leakage(&z, &s, cfg.clone()).unwrap();
        assert!(full >= 0.8 && full <= 1.0, "{full}");
        let indep = mine_leakage(&noise(2000, 2, 7), &s, cfg).unwrap();
        assert!((0.0..=0.05).contains(&indep), "{indep}");
    }

    #[test]
    fn verification_arithmetic() {
        let scores = PairScores {
            genuine: vec![0.9; 10],
            imposter: (0..100).map(|i| if i < 5 { 0.8 } else { 0.1 }).collect(),
        };
        let r = scores.at_threshold(0.5);
        assert_eq!((r.fmr, r.tmr), (0.05, 1.0));
        assert_eq!(r.acc, 105.0 / 110.0);
        let best = scores.tmr_at_fmr(0.1);
        assert_eq!((best.threshold, best.fmr, best.tmr), (0.8, 0.05, 1.0));
        let strict = scores.tmr_at_fmr(0.01);
        assert_eq!((strict.threshold, strict.fmr), (0.9, 0.0));
    }

    #[test]
    fn separated_clusters_verify_perfectly() {
        let emb = ndarray::array![[1.0, 0.0], [0.99, 0.05], [0.0, 1.0], [0.05, 0.99]];
        let r = verification_metrics(&emb, &[0, 0, 1, 1], &[0.5], 0.1, 0).unwrap();
        assert_eq!((r.results[0].tmr, r.results[0].fmr), (1.0, 0.0));
        assert!(verification_metrics(&emb, &[0, 0, 0, 0], &[0.5], 0.1, 0).is_err());
        assert!(verification_metrics(&emb, &[0, 1, 2, 3], &[0.5], 0.1, 0).is_err());
    }

    #[test]
    fn pair_subsampling_is_capped_and_seeded() {
        let emb = noise(60, 3, 1);
        let ids: Vec<u32> = (0..60).map(|i| i % 6).collect();
        let a = pair_scores(&emb, &ids, 50, 3).unwrap();
        assert_eq!((a.genuine.len(), a.imposter.len()), (50, 50));
        assert_eq!(a, pair_scores(&emb, &ids, 50, 3).unwrap());
    }

    #[test]
    fn csv_and_plot() {
        let p = |alpha: f64| TradeoffPoint {
            alpha,
            utility_metric: 0.9,
            leakage_mi_bits: 1.0 / alpha,
            adversary_acc: 0.5,
            model_kind: ModelKind::Dispf,
            complexity_nats: 2.0,
        };
        let pts = vec![p(0.5), p(2.0)];
        assert_eq!(
            tradeoff_csv(&pts),
            "alpha,utility,leakage_bits,adversary_acc\n0.5,0.9,2,0.5\n2,0.9,0.5,0.5\n"
        );
        assert_eq!(complexity_csv(&pts[..1]), "alpha,complexity_nats\n0.5,2\n");
        let dir = tempfile::tempdir().unwrap();
        plot_tradeoff(&pts, dir.path().join("t.png")).unwrap();
        assert!(dir.path().join("t.png").metadata().unwrap().len() > 0);
    }
}
