//! Mutual information neural estimation (MINE).
//!
//! A critic `T(x, y)` is trained to maximize the Donsker–Varadhan bound
//! `E_joint[T] − log E_marginal[e^T]`. The gradient of the log-partition term
//! uses a moving average of `E[e^T]` in the denominator, which removes the
//! minibatch bias of the naive gradient.

use log::info;
use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::infotheory::{dv_value, log_mean_exp};
use crate::nn::{Activation, Adam, Mlp, NetworkSpec, Params};

/// Multiplicative learning-rate decay applied every [`LR_DECAY_EVERY`] iterations.
pub const LR_DECAY: f64 = 0.98;
pub const LR_DECAY_EVERY: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineConfig {
    pub dim_x: usize,
    pub dim_y: usize,
    pub hidden_size: usize,
    pub network_type: CriticKind,
    pub batch_size: usize,
    pub n_iterations: usize,
    pub n_window: usize,
    /// Log progress every `n_verbose` iterations; 0 disables logging.
    pub n_verbose: usize,
    pub moving_average_rate: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl MineConfig {
    pub fn new(dim_x: usize, dim_y: usize) -> Self {
        MineConfig {
            dim_x,
            dim_y,
            hidden_size: 64,
            network_type: CriticKind::Mlp,
            batch_size: 512,
            n_iterations: 3000,
            n_window: 500,
            n_verbose: 0,
            moving_average_rate: 0.01,
            learning_rate: 1e-3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_x == 0 || self.dim_y == 0 || self.hidden_size == 0 {
            return Err(Error::validation("MINE dimensions must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("MINE batch size must be at least 2"));
        }
        if self.n_window == 0 || self.n_window > self.n_iterations {
            return Err(Error::validation("n_window must lie in [1, n_iterations]"));
        }
        if !(self.moving_average_rate > 0.0 && self.moving_average_rate <= 1.0) {
            return Err(Error::validation("moving_average_rate must lie in (0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MineEstimator {
    config: MineConfig,
    critic: Mlp<f64>,
    moving_average_exp_t: f64,
    history: Vec<f64>,
}

impl MineEstimator {
    pub fn new(config: MineConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spec = NetworkSpec::new(
            config.dim_x + config.dim_y,
            vec![config.hidden_size, config.hidden_size],
            1,
        )
        .with_activation(Activation::Elu);
        let critic = Mlp::new(spec, &mut rng)?;
        Ok(MineEstimator {
            config,
            critic,
            moving_average_exp_t: 1.0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &MineConfig {
        &self.config
    }

    pub fn critic(&self) -> &Mlp<f64> {
        &self.critic
    }

    pub fn moving_average_exp_t(&self) -> f64 {
        self.moving_average_exp_t
    }

    /// Per-iteration DV estimates in nats.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Mean of the last `n_window` training estimates (nats).
    pub fn windowed_estimate(&self) -> Option<f64> {
        let w = self.config.n_window.min(self.history.len());
        (w > 0).then(|| self.history[self.history.len() - w..].iter().sum::<f64>() / w as f64)
    }

    /// Critic scores for the rows of `[x | y]`.
    pub fn scores(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<Vec<f64>> {
        ensure_dim(self.config.dim_x, x.ncols())?;
        ensure_dim(self.config.dim_y, y.ncols())?;
        let xy = concatenate![Axis(1), *x, *y];
        Ok(self.critic.forward(&xy)?.column(0).to_vec())
    }
}

fn check_pairs(cfg: &MineConfig, x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    ensure_dim(cfg.dim_x, x.ncols())?;
    ensure_dim(cfg.dim_y, y.ncols())?;
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: y.nrows(),
        });
    }
    Ok(())
}

fn gather(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

/// Trains a fresh critic on paired rows `(x[i], y[i])`.
pub fn train_mine(config: MineConfig, x: &Array2<f64>, y: &Array2<f64>) -> Result<MineEstimator> {
    let mut est = MineEstimator::new(config)?;
    let cfg = est.config.clone();
    check_pairs(&cfg, x, y)?;
    let n = x.nrows();
    if n < 2 * cfg.batch_size {
        return Err(Error::validation(format!(
            "MINE needs at least {} samples, got {n}",
            2 * cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = Adam::new(cfg.learning_rate);
    let b = cfg.batch_size;
    let r = cfg.moving_average_rate;

    for it in 0..cfg.n_iterations {
        if cursor + b > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + b];
        cursor += b;
        let mut perm = idx.to_vec();
        perm.shuffle(&mut rng);

        let xb = gather(x, idx);
        let joint = concatenate![Axis(1), xb, gather(y, idx)];
        let marginal = concatenate![Axis(1), xb, gather(y, &perm)];
        let both = concatenate![Axis(0), joint, marginal];
        let (out, tape) = est.critic.forward_train::<ChaCha8Rng>(&both, None)?;
        let t_joint: Vec<f64> = out.slice(s![..b, 0]).to_vec();
        let t_marg: Vec<f64> = out.slice(s![b.., 0]).to_vec();

        let mi = dv_value(&t_joint, &t_marg)?;
        if !mi.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite MINE estimate at iteration {it}"
            )));
        }
        // mean(e^T) computed through the log domain so large scores stay finite
        let mean_exp = log_mean_exp(&t_marg).exp();
        est.moving_average_exp_t = (1.0 - r) * est.moving_average_exp_t + r * mean_exp;
        let ma = est.moving_average_exp_t;
        if !(ma.is_finite() && ma > 0.0) {
            return Err(Error::Numeric(format!(
                "moving average of exp(T) degenerated at iteration {it}"
            )));
        }

        // loss = −(mean T_joint − mean(e^{T_marg}) / ma)
        let mut grad = Array2::zeros((2 * b, 1));
        for i in 0..b {
            grad[[i, 0]] = -1.0 / b as f64;
            grad[[b + i, 0]] = t_marg[i].exp() / (b as f64 * ma);
        }
        est.critic.zero_grad();
        est.critic.backward(&tape, &grad, true);
        adam.step(&mut est.critic);
        if (it + 1) % LR_DECAY_EVERY == 0 {
            adam.lr *= LR_DECAY;
        }
        est.history.push(mi);
        if cfg.n_verbose > 0 && (it + 1) % cfg.n_verbose == 0 {
            info!("mine iteration {}: estimate {mi:.4} nats", it + 1);
        }
    }
    Ok(est)
}

/// Batched DV value over `(x, y)`, averaged across batches of the configured
/// size. Marginal rows come from a within-batch permutation seeded by `seed`.
pub fn estimate_mi(
    est: &MineEstimator,
    x: &Array2<f64>,
    y: &Array2<f64>,
    seed: u64,
) -> Result<f64> {
    check_pairs(&est.config, x, y)?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::validation("need at least two paired rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = est.config.batch_size.min(n);
    let mut total = 0.0;
    let mut batches = 0;
    let mut start = 0;
    while start < n {
        let end = (start + b).min(n);
        if end - start < 2 {
            break;
        }
        let idx: Vec<usize> = (start..end).collect();
        let mut perm = idx.clone();
        perm.shuffle(&mut rng);
        let xb = gather(x, &idx);
        let t_joint = est.scores(&xb, &gather(y, &idx))?;
        let t_marg = est.scores(&xb, &gather(y, &perm))?;
        total += dv_value(&t_joint, &t_marg)?;
        batches += 1;
        start = end;
    }
    Ok(total / batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_correlated_gaussians;

    fn quick(dim: usize) -> MineConfig {
        MineConfig {
            batch_size: 64,
            n_iterations: 200,
            n_window: 50,
            ..MineConfig::new(dim, dim)
        }
    }

    #[test]
    fn config_validation() {
        assert!(MineConfig::new(1, 1).validate().is_ok());
        assert!(MineConfig {
            batch_size: 1,
            ..MineConfig::new(1, 1)
        }
        .validate()
        .is_err());
        assert!(MineConfig {
            n_window: 5000,
            ..MineConfig::new(1, 1)
        }
        .validate()
        .is_err());
        assert!(MineConfig {
            moving_average_rate: 0.0,
            ..MineConfig::new(1, 1)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let x = Array2::zeros((100, 1));
        assert!(train_mine(quick(1), &x, &x).is_err());
    }

    #[test]
    fn history_tracks_iterations_and_is_deterministic() {
        let g = sample_correlated_gaussians(0.5, 2000, 1).unwrap();
        let a = train_mine(quick(1), &g.x, &g.y).unwrap();
        let b = train_mine(quick(1), &g.x, &g.y).unwrap();
        assert_eq!(a.history().len(), 200);
        assert_eq!(a.history(), b.history());
        assert!(a.moving_average_exp_t() > 0.0);
    }

    #[test]
    fn single_batch_estimate_is_dv_value() {
        let g = sample_correlated_gaussians(0.5, 2000, 2).unwrap();
        let est = train_mine(quick(1), &g.x, &g.y).unwrap();
        let (x, y) = (
            g.x.slice(s![..64, ..]).to_owned(),
            g.y.slice(s![..64, ..]).to_owned(),
        );
        let value = estimate_mi(&est, &x, &y, 9).unwrap();
        let mut perm: Vec<usize> = (0..64).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let tj = est.scores(&x, &y).unwrap();
        let tm = est.scores(&x, &gather(&y, &perm)).unwrap();
        assert_eq!(value, dv_value(&tj, &tm).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = sample_correlated_gaussians(0.5, 2000, 2).unwrap();
        let est = train_mine(quick(1), &g.x, &g.y).unwrap();
        let wide = Array2::zeros((10, 2));
        assert!(estimate_mi(&est, &wide, &wide, 0).is_err());
    }

    #[test]
    fn one_hot_copy_reaches_most_of_ln4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8000;
        let mut x = Array2::zeros((n, 4));
        for i in 0..n {
            x[[i, rand::Rng::random_range(&mut rng, 0..4)]] = 1.0;
        }
        let cfg = MineConfig {
            batch_size: 256,
            n_iterations: 1500,
            n_window: 300,
            ..MineConfig::new(4, 4)
        };
        let est = train_mine(cfg, &x, &x).unwrap();
        let v = est.windowed_estimate().unwrap();
        assert!(v >= 0.9 * 4f64.ln(), "{v}");
    }
}
