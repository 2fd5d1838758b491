//! Loss assembly for the six training steps.
//!
//! Step-1 objectives are written as quantities to minimize:
//! DisPF: `dis(x, x̂) + α·E[log P_ξ(s|z)]`;
//! GenPF: `dis(x, x̂) + α·KL(posterior ‖ prior) + α·dis(x, x̃)`.
//! Adversarial steps use binary cross-entropy on discriminator scores, with
//! the non-saturating form on the generator side. Each loss also has a
//! gradient helper so the training loop never differentiates by hand.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{kl_batch, GaussianBatch};
use crate::nn::{sigmoid, Real};

/// Discriminator scores are clamped into `[SCORE_CLAMP, 1 − SCORE_CLAMP]`.
pub const SCORE_CLAMP: f64 = 1e-7;
/// Smallest probability fed to a logarithm in the leakage term.
pub const PROB_CLAMP: f64 = 1e-12;

/// Distortion measure between data and reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisMode {
    /// Per-element Bernoulli cross-entropy; the reconstruction holds logits.
    Bernoulli,
    /// Per-element squared error.
    Mse,
}

fn check_same<F: Real>(x: &Array2<F>, out: &Array2<F>) -> Result<()> {
    if x.dim() != out.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: out.len(),
        });
    }
    Ok(())
}

fn softplus(l: f64) -> f64 {
    l.max(0.0) + (-l.abs()).exp().ln_1p()
}

/// A [`DisMode`] applied per pixel: element losses are summed over the
/// `channels` interleaved values of a pixel, then averaged over pixels and
/// rows. Vectors use `channels = 1`, i.e. a plain per-element mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Distortion {
    pub mode: DisMode,
    pub channels: usize,
}

impl From<DisMode> for Distortion {
    fn from(mode: DisMode) -> Self {
        Distortion { mode, channels: 1 }
    }
}

/// Distortion summed over channels and averaged over pixels and rows.
pub fn dis<F: Real>(x: &Array2<F>, out: &Array2<F>, d: impl Into<Distortion>) -> Result<f64> {
    check_same(x, out)?;
    let Distortion { mode, channels } = d.into();
    let n = x.len().max(1) as f64 / channels.max(1) as f64;
    let mut total = 0.0;
    Zip::from(x).and(out).for_each(|&xv, &ov| {
        let (xv, ov) = (
            xv.to_f64().unwrap_or(f64::NAN),
            ov.to_f64().unwrap_or(f64::NAN),
        );
        total += match mode {
            DisMode::Bernoulli => softplus(ov) - xv * ov,
            DisMode::Mse => (ov - xv) * (ov - xv),
        };
    });
    Ok(total / n)
}

/// Gradient of [`dis`] with respect to `out`.
pub fn dis_grad<F: Real>(
    x: &Array2<F>,
    out: &Array2<F>,
    d: impl Into<Distortion>,
) -> Result<Array2<F>> {
    check_same(x, out)?;
    let Distortion { mode, channels } = d.into();
    let scale = F::of(channels.max(1) as f64 / x.len().max(1) as f64);
    let mut g = out.clone();
    Zip::from(&mut g).and(x).for_each(|o, &xv| {
        *o = match mode {
            DisMode::Bernoulli => (sigmoid(*o) - xv) * scale,
            DisMode::Mse => F::of(2.0) * (*o - xv) * scale,
        }
    });
    Ok(g)
}

/// Additive parts of a step-1 objective. `total` is always
/// `reconstruction + alpha·(kl_prior + uncertainty_term)` with a missing
/// `kl_prior` counting as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_prior: Option<f64>,
    /// DisPF: mean `log P_ξ(s|z)` (≤ 0). GenPF: `dis(x, x̃)`.
    pub uncertainty_term: f64,
    pub adversarial_terms: BTreeMap<String, f64>,
    pub alpha: f64,
    pub total: f64,
    /// Set when some probability had to be clamped at [`PROB_CLAMP`].
    pub clamped: bool,
}

impl LossBreakdown {
    pub fn new(
        reconstruction: f64,
        kl_prior: Option<f64>,
        uncertainty_term: f64,
        alpha: f64,
    ) -> Self {
        let total = reconstruction + alpha * (kl_prior.unwrap_or(0.0) + uncertainty_term);
        LossBreakdown {
            reconstruction,
            kl_prior,
            uncertainty_term,
            adversarial_terms: BTreeMap::new(),
            alpha,
            total,
            clamped: false,
        }
    }

    /// The weighted leakage part of `total`.
    pub fn leakage_term(&self) -> f64 {
        self.alpha * (self.kl_prior.unwrap_or(0.0) + self.uncertainty_term)
    }

    pub fn recombined(&self) -> f64 {
        self.reconstruction + self.leakage_term()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::validation(format!(
            "alpha must be a non-negative real, got {alpha}"
        )));
    }
    Ok(())
}

/// Mean `log p[s_true]` over rows of `s_probs` (clamped at [`PROB_CLAMP`]),
/// plus a flag telling whether clamping happened.
pub fn mean_log_prob<F: Real>(s_probs: &Array2<F>, s_true: &[usize]) -> Result<(f64, bool)> {
    if s_probs.nrows() != s_true.len() {
        return Err(Error::DimensionMismatch {
            expected: s_true.len(),
            found: s_probs.nrows(),
        });
    }
    let mut clamped = false;
    let mut total = 0.0;
    for (row, &s) in s_probs.rows().into_iter().zip(s_true) {
        if s >= row.len() {
            return Err(Error::validation(format!(
                "label {s} outside [0, {})",
                row.len()
            )));
        }
        let p = row[s].to_f64().unwrap_or(f64::NAN);
        if p < PROB_CLAMP {
            clamped = true;
        }
        total += p.max(PROB_CLAMP).ln();
    }
    Ok((total / s_true.len().max(1) as f64, clamped))
}

/// DisPF step 1: `dis(x, x̂) + α·mean log s_probs[s_true]`.
pub fn p1_step1_loss<F: Real>(
    x: &Array2<F>,
    x_hat: &Array2<F>,
    s_true: &[usize],
    s_probs: &Array2<F>,
    alpha: f64,
    d: impl Into<Distortion>,
) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    let (log_p, clamped) = mean_log_prob(s_probs, s_true)?;
    let mut b = LossBreakdown::new(dis(x, x_hat, d)?, None, log_p, alpha);
    b.clamped = clamped;
    Ok(b)
}

/// Gradient of `mean log softmax(logits)[s_true]` with respect to the logits.
pub fn log_prob_grad<F: Real>(probs: &Array2<F>, s_true: &[usize]) -> Array2<F> {
    let scale = F::of(1.0 / s_true.len().max(1) as f64);
    let mut g = probs.mapv(|p| -p * scale);
    for (i, &s) in s_true.iter().enumerate() {
        g[[i, s]] = g[[i, s]] + scale;
    }
    g
}

/// GenPF step 1: `dis(x, x̂) + α·KL(posterior ‖ prior) + α·dis(x, x̃)`.
/// Passing `prior = None` drops the analytic KL term.
pub fn p2_step1_loss<F: Real>(
    x: &Array2<F>,
    x_hat: &Array2<F>,
    x_tilde: &Array2<F>,
    posterior: &GaussianBatch<F>,
    prior: Option<&GaussianBatch<F>>,
    alpha: f64,
    d: impl Into<Distortion>,
) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    let d = d.into();
    let kl = prior
        .map(|p| kl_batch(posterior, p).map(|k| k.value))
        .transpose()?;
    Ok(LossBreakdown::new(
        dis(x, x_hat, d)?,
        kl,
        dis(x, x_tilde, d)?,
        alpha,
    ))
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `mean(−log real) + mean(−log(1 − fake))` with scores clamped.
pub fn discriminator_loss(real_scores: &[f64], fake_scores: &[f64]) -> f64 {
    mean(real_scores.iter().map(|s| -clamp_score(*s).ln()))
        + mean(fake_scores.iter().map(|s| -(1.0 - clamp_score(*s)).ln()))
}

/// Non-saturating generator loss `mean(−log fake)`.
pub fn generator_adversarial_loss(fake_scores: &[f64]) -> f64 {
    mean(fake_scores.iter().map(|s| -clamp_score(*s).ln()))
}

/// Gradients with respect to discriminator logits.
///
/// `target_real` selects `−log σ(l)` (gradient `σ(l) − 1`) versus
/// `−log(1 − σ(l))` (gradient `σ(l)`); both are averaged over the batch.
pub fn bce_logit_grad<F: Real>(logits: &Array1<F>, target_real: bool) -> Array2<F> {
    let scale = F::of(1.0 / logits.len().max(1) as f64);
    let g = logits.mapv(|l| {
        let s = sigmoid(l);
        (if target_real { s - F::one() } else { s }) * scale
    });
    g.insert_axis(ndarray::Axis(1))
}

pub fn scores_f64<F: Real>(logits: &Array1<F>) -> Vec<f64> {
    logits
        .iter()
        .map(|l| sigmoid(l.to_f64().unwrap_or(f64::NAN)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn p1_examples() {
        let x = array![[0.0f64]];
        let s = array![[0.5f64, 0.5]];
        // dis = 2 with squared error
        let b = p1_step1_loss(&x, &array![[2f64.sqrt()]], &[0], &s, 1.0, DisMode::Mse).unwrap();
        assert!((b.total - 1.306_853).abs() < 1e-6, "{}", b.total);
        // α = 0 is pure reconstruction
        let b = p1_step1_loss(&x, &array![[3.0]], &[1], &s, 0.0, DisMode::Mse).unwrap();
        assert_eq!(b.total, 9.0);
        // perfect reconstruction, uniform over k = 4
        let u = Array2::from_elem((1, 4), 0.25f64);
        let b = p1_step1_loss(&x, &x, &[2], &u, 3.0, DisMode::Mse).unwrap();
        assert!((b.total - 3.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!(b.total < 0.0);
        assert!(p1_step1_loss(&x, &x, &[0], &s, -1.0, DisMode::Mse).is_err());
    }

    #[test]
    fn p1_clamps_zero_probability() {
        let x = array![[0.0f64]];
        let b = p1_step1_loss(&x, &x, &[1], &array![[1.0, 0.0]], 1.0, DisMode::Mse).unwrap();
        assert!(b.clamped);
        assert!((b.uncertainty_term - PROB_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn p2_examples() {
        let b = LossBreakdown::new(1.0, Some(0.5), 2.0, 10.0);
        assert_eq!(b.total, 26.0);
        let x = array![[0.1f64, 0.7]];
        let g = GaussianBatch {
            mean: array![[0.3, -0.2]],
            logvar: array![[0.1, -0.4]],
        };
        let b = p2_step1_loss(&x, &x, &x, &g, Some(&g), 5.0, DisMode::Mse).unwrap();
        assert_eq!(b.total, 0.0);
        let b = p2_step1_loss(
            &x,
            &(&x + 1.0),
            &x,
            &g,
            Some(&GaussianBatch::standard(1, 2)),
            0.0,
            DisMode::Mse,
        )
        .unwrap();
        assert_eq!(b.total, 1.0);
    }

    #[test]
    fn discriminator_examples() {
        assert!((discriminator_loss(&[0.5], &[0.5]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(discriminator_loss(&[1.0], &[0.0]) < 1e-6);
        let v = discriminator_loss(&[0.9, 0.8], &[0.1, 0.2]);
        assert!((v - 0.328_504).abs() < 1e-5, "{v}");
        assert!(discriminator_loss(&[0.0], &[1.0]).is_finite());
    }

    #[test]
    fn generator_examples() {
        assert!((generator_adversarial_loss(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
        assert!(generator_adversarial_loss(&[1.0]) < 1e-6);
        let v = generator_adversarial_loss(&[0.25, 0.75]);
        assert!((v - 0.836_988).abs() < 1e-5, "{v}");
    }

    #[test]
    fn dis_gradients_match_finite_differences() {
        let x = array![[0.0f64, 0.3, 1.0], [0.5, 0.9, 0.2]];
        let out = array![[0.4f64, -1.2, 2.0], [0.1, 0.0, -0.7]];
        for mode in [DisMode::Bernoulli, DisMode::Mse] {
            let g = dis_grad(&x, &out, mode).unwrap();
            let h = 1e-6;
            for ((i, j), gv) in g.indexed_iter() {
                let (mut up, mut down) = (out.clone(), out.clone());
                up[[i, j]] += h;
                down[[i, j]] -= h;
                let fd = (dis(&x, &up, mode).unwrap() - dis(&x, &down, mode).unwrap()) / (2.0 * h);
                assert!((fd - gv).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn channel_distortion_sums_channels_and_averages_pixels() {
        let x = array![[0.0f64, 1.0, 0.5, 0.5]];
        let out = array![[1.0f64, 1.0, 0.0, 0.5]];
        let per_value = dis(&x, &out, DisMode::Mse).unwrap();
        assert!((per_value - 1.25 / 4.0).abs() < 1e-12);
        let two = Distortion { mode: DisMode::Mse, channels: 2 };
        assert!((dis(&x, &out, two).unwrap() - 1.25 / 2.0).abs() < 1e-12);
        let g = dis_grad(&x, &out, two).unwrap();
        let g1 = dis_grad(&x, &out, DisMode::Mse).unwrap();
        assert!(g.iter().zip(&g1).all(|(a, b)| (a - 2.0 * b).abs() < 1e-12));
    }

    #[test]
    fn bce_logit_gradients_match_losses() {
        let logits = array![0.3f64, -1.5, 2.2];
        let h = 1e-6;
        for target_real in [true, false] {
            let g = bce_logit_grad(&logits, target_real);
            let loss = |l: &Array1<f64>| {
                let s = scores_f64(l);
                if target_real {
                    generator_adversarial_loss(&s)
                } else {
                    discriminator_loss(&[], &s)
                }
            };
            for i in 0..3 {
                let (mut up, mut down) = (logits.clone(), logits.clone());
                up[i] += h;
                down[i] -= h;
                assert!(((loss(&up) - loss(&down)) / (2.0 * h) - g[[i, 0]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn log_prob_grad_matches_finite_differences() {
        let logits = array![[0.2f64, -0.4, 1.0], [1.5, 0.0, -2.0]];
        let labels = [2, 0];
        let f = |l: &Array2<f64>| {
            mean_log_prob(&crate::nn::softmax_rows(l), &labels)
                .unwrap()
                .0
        };
        let g = log_prob_grad(&crate::nn::softmax_rows(&logits), &labels);
        let h = 1e-6;
        for ((i, j), gv) in g.indexed_iter() {
            let (mut up, mut down) = (logits.clone(), logits.clone());
            up[[i, j]] += h;
            down[[i, j]] -= h;
            assert!(((f(&up) - f(&down)) / (2.0 * h) - gv).abs() < 1e-8);
        }
    }
}
