//! Six-step alternating training for DisPF and GenPF.
//!
//! Every minibatch runs the steps in order 1→6. Each step zeroes the
//! gradients of the groups it updates, backpropagates only into them (other
//! networks pass gradients through without accumulating), clips, and takes
//! one Adam step per group.

mod bundle;
mod schedule;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bundle::{
    load_bundle, save_bundle, Architecture, BundleMetadata, ModuleBundle, WEIGHT_MAGIC,
};
pub use schedule::AlphaSchedule;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{
    inject_latent_noise, kl_batch, one_hot, reparameterize_backward, reparameterize_batch,
    standard_normal, Classifier, Discriminator, Encoder, FilmGenerator, GaussianBatch,
    PriorGenerator, PriorMode,
};
use crate::nn::{
    clip_grad_norm, param_fingerprint, sigmoid, softmax_rows, Adam, Mlp, NetworkSpec, Params,
};
use crate::objectives::{
    bce_logit_grad, dis_grad, discriminator_loss, generator_adversarial_loss, log_prob_grad,
    p1_step1_loss, p2_step1_loss, scores_f64, DisMode, Distortion,
};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dispf,
    Genpf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dispf => "dispf",
            ModelKind::Genpf => "genpf",
        }
    }
}

/// Parameter groups, each with its own optimizer. `Xi` is the classifier
/// for DisPF and the FiLM generator for GenPF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Phi,
    Theta,
    Xi,
    Psi,
    Eta,
    Omega,
    Tau,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Phi,
        Group::Theta,
        Group::Xi,
        Group::Psi,
        Group::Eta,
        Group::Omega,
        Group::Tau,
    ];
}

/// How the classifier is updated in the DisPF first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiMode {
    /// The classifier ascends the α-weighted log-likelihood of the true
    /// label (tightening the leakage estimate) while encoder and decoder
    /// descend it.
    BoundTightening,
    /// All three groups descend the same step-1 loss.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub linear_increment: f64,
    /// Missing groups use [`DEFAULT_LEARNING_RATE`].
    pub learning_rates: BTreeMap<Group, f64>,
    pub prior_mode: PriorMode,
    pub noise_enabled: bool,
    pub dropout_rate: f64,
    pub dis_mode: DisMode,
    pub seed: u64,
    pub hidden_widths: Vec<usize>,
    pub disc_hidden_widths: Vec<usize>,
    pub xi_mode: XiMode,
    /// Classifier-only updates on fresh batches before each DisPF first step
    /// (bound-tightening mode only).
    pub xi_inner_steps: usize,
    /// Keep the closed-form KL term in the GenPF first step.
    pub analytic_kl: bool,
    pub grad_clip: f64,
    /// Stop after this many iterations in total.
    pub max_iterations: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Dispf,
            epochs: 10,
            batch_size: 64,
            latent_dim: 16,
            alpha_start: 1.0,
            alpha_end: 1.0,
            linear_increment: 0.0,
            learning_rates: BTreeMap::new(),
            prior_mode: PriorMode::Learned,
            noise_enabled: false,
            dropout_rate: 0.1,
            dis_mode: DisMode::Bernoulli,
            seed: 0,
            hidden_widths: vec![256, 256],
            disc_hidden_widths: vec![128],
            xi_mode: XiMode::BoundTightening,
            xi_inner_steps: 5,
            analytic_kl: true,
            grad_clip: DEFAULT_GRAD_CLIP,
            max_iterations: None,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(model: ModelKind) -> Self {
        TrainConfig {
            model,
            ..Default::default()
        }
    }

    /// Fixed α for the whole run.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha_start = alpha;
        self.alpha_end = alpha;
        self.linear_increment = 0.0;
        self
    }

    /// Same learning rate for every group.
    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rates = Group::ALL.iter().map(|g| (*g, lr)).collect();
        self
    }

    pub fn learning_rate(&self, g: Group) -> f64 {
        self.learning_rates
            .get(&g)
            .copied()
            .unwrap_or(DEFAULT_LEARNING_RATE)
    }

    pub fn schedule(&self) -> Result<AlphaSchedule> {
        AlphaSchedule::new(
            self.epochs,
            self.alpha_start,
            self.alpha_end,
            self.linear_increment,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::validation(
                "batch size and latent dimension must be at least 1",
            ));
        }
        if self.hidden_widths.is_empty() || self.disc_hidden_widths.is_empty() {
            return Err(Error::validation("networks need at least one hidden layer"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("dropout rate must lie in [0, 1)"));
        }
        if self
            .learning_rates
            .values()
            .any(|lr| !(*lr > 0.0 && lr.is_finite()))
        {
            return Err(Error::validation("learning rates must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::validation("gradient clip must be positive"));
        }
        Ok(())
    }
}

/// All networks of one model.
#[derive(Debug, Clone)]
pub struct Networks {
    pub encoder: Encoder<f32>,
    pub decoder: Mlp<f32>,
    /// DisPF only.
    pub classifier: Option<Classifier<f32>>,
    /// GenPF only.
    pub film: Option<FilmGenerator<f32>>,
    pub prior: PriorGenerator<f32>,
    pub d_eta: Discriminator<f32>,
    pub d_omega: Discriminator<f32>,
    /// DisPF only.
    pub d_tau: Option<Discriminator<f32>>,
}

impl Networks {
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d17_0000);
        let d = arch.input_dim;
        let h = arch.hidden_widths.clone();
        let dh = arch.disc_hidden_widths.clone();
        let encoder = Encoder::new(d, h.clone(), arch.latent_dim, arch.dropout_rate, &mut rng)?;
        let decoder = Mlp::new(
            NetworkSpec::new(arch.latent_dim, h.iter().rev().copied().collect(), d)
                .with_dropout(arch.dropout_rate),
            &mut rng,
        )?;
        let (classifier, film, d_tau) = match arch.model {
            ModelKind::Dispf => (
                Some(Classifier::new(
                    arch.latent_dim,
                    dh.clone(),
                    arch.classes,
                    arch.dropout_rate,
                    &mut rng,
                )?),
                None,
                Some(Discriminator::new(arch.classes, dh.clone(), 0.0, &mut rng)?),
            ),
            ModelKind::Genpf => (
                None,
                Some(FilmGenerator::new(
                    arch.latent_dim,
                    h.iter().rev().copied().collect(),
                    d,
                    arch.classes,
                    &mut rng,
                )?),
                None,
            ),
        };
        let prior = PriorGenerator::new(arch.latent_dim, dh.clone(), arch.prior_mode, &mut rng)?;
        let d_eta = Discriminator::new(arch.latent_dim, dh.clone(), 0.0, &mut rng)?;
        let d_omega = Discriminator::new(d, dh, 0.0, &mut rng)?;
        Ok(Networks {
            encoder,
            decoder,
            classifier,
            film,
            prior,
            d_eta,
            d_omega,
            d_tau,
        })
    }

    pub fn group(&self, g: Group) -> Option<&dyn Params<f32>> {
        match g {
            Group::Phi => Some(&self.encoder),
            Group::Theta => Some(&self.decoder),
            Group::Xi => match (&self.classifier, &self.film) {
                (Some(c), _) => Some(c),
                (None, Some(f)) => Some(f),
                _ => None,
            },
            Group::Psi => Some(&self.prior),
            Group::Eta => Some(&self.d_eta),
            Group::Omega => Some(&self.d_omega),
            Group::Tau => self.d_tau.as_ref().map(|d| d as &dyn Params<f32>),
        }
    }

    pub fn group_mut(&mut self, g: Group) -> Option<&mut dyn Params<f32>> {
        match g {
            Group::Phi => Some(&mut self.encoder),
            Group::Theta => Some(&mut self.decoder),
            Group::Xi => match (&mut self.classifier, &mut self.film) {
                (Some(c), _) => Some(c),
                (None, Some(f)) => Some(f),
                _ => None,
            },
            Group::Psi => Some(&mut self.prior),
            Group::Eta => Some(&mut self.d_eta),
            Group::Omega => Some(&mut self.d_omega),
            Group::Tau => self.d_tau.as_mut().map(|d| d as &mut dyn Params<f32>),
        }
    }

    pub fn fingerprints(&self) -> BTreeMap<Group, u64> {
        Group::ALL
            .iter()
            .filter_map(|g| self.group(*g).map(|p| (*g, param_fingerprint(p))))
            .collect()
    }
}

/// What happened in one step of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub step: u8,
    pub updated: Vec<Group>,
    pub skipped: bool,
    pub loss: Option<f64>,
}

/// One row of the metrics CSV. Discriminator columns are empty for skipped
/// steps. The last column holds the step-6 discriminator loss (D_τ for
/// DisPF, the conditional pass of D_ω for GenPF).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub alpha: f64,
    pub step1_total: f64,
    pub reconstruction: f64,
    pub leakage_term: f64,
    pub d_eta: Option<f64>,
    pub d_omega: Option<f64>,
    pub d_tau: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "iteration,alpha,step1_total,reconstruction,leakage_term,d_eta,d_omega,d_tau";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.alpha,
            r.step1_total,
            r.reconstruction,
            r.leakage_term,
            opt(r.d_eta),
            opt(r.d_omega),
            opt(r.d_tau)
        );
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModuleBundle,
    pub metrics: Vec<MetricsRow>,
}

pub type StepHook<'a> = &'a mut dyn FnMut(&StepRecord, &Networks);

pub fn train_dispf(cfg: &TrainConfig, ds: &LabeledDataset) -> Result<TrainOutcome> {
    if cfg.model != ModelKind::Dispf {
        return Err(Error::validation("train_dispf needs model = dispf"));
    }
    train(cfg, ds, None)
}

pub fn train_genpf(cfg: &TrainConfig, ds: &LabeledDataset) -> Result<TrainOutcome> {
    if cfg.model != ModelKind::Genpf {
        return Err(Error::validation("train_genpf needs model = genpf"));
    }
    train(cfg, ds, None)
}

/// Trains the model named in `cfg`, calling `hook` after every step.
pub fn train(
    cfg: &TrainConfig,
    ds: &LabeledDataset,
    hook: Option<StepHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    if ds.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if cfg.dis_mode == DisMode::Bernoulli && !ds.shape.is_image() {
        return Err(Error::validation(
            "bernoulli distortion needs image data in [0, 1]; use mse for embeddings",
        ));
    }
    let arch = Architecture::from_config(cfg, ds);
    let mut trainer = Trainer::new(cfg, Networks::new(&arch, cfg.seed)?, ds.shape.channels());
    let schedule = cfg.schedule()?;
    let m = cfg.batch_size.min(ds.len());
    let per_epoch = ds.len() / m;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let labels = ds.sensitive_usize();
    let mut metrics = Vec::new();
    let mut hook = hook;
    let mut iteration = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let alpha = schedule.alpha_at(epoch)?;
        order.shuffle(&mut trainer.data_rng);
        for b in 0..per_epoch {
            if cfg.max_iterations.is_some_and(|max| iteration >= max) {
                break 'epochs;
            }
            iteration += 1;
            let idx = &order[b * m..(b + 1) * m];
            let x = ds.features.select(Axis(0), idx);
            let s: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            if cfg.model == ModelKind::Dispf && cfg.xi_mode == XiMode::BoundTightening {
                trainer.tighten_classifier(ds, &labels, m)?;
            }
            let row = trainer.iteration(iteration, alpha, &x, &s, &mut hook)?;
            metrics.push(row);
        }
        debug!("epoch {} done (alpha {alpha:.4})", epoch + 1);
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let b = ModuleBundle::new(
                    trainer.nets.clone(),
                    arch.clone(),
                    BundleMetadata::from_config(cfg, ds),
                );
                save_bundle(&b, dir.join(format!("epoch_{:04}", epoch + 1)))?;
            }
        }
    }
    info!("trained {} for {iteration} iterations", cfg.model.name());
    let bundle = ModuleBundle::new(trainer.nets, arch, BundleMetadata::from_config(cfg, ds));
    Ok(TrainOutcome { bundle, metrics })
}

struct Trainer {
    cfg: TrainConfig,
    nets: Networks,
    optimizers: BTreeMap<Group, Adam<f32>>,
    dist: Distortion,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

fn check(v: f64, step: u8, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { step, iteration })
    }
}

fn softmax_backward(probs: &Array2<f32>, d_probs: &Array2<f32>) -> Array2<f32> {
    let dot = (probs * d_probs).sum_axis(Axis(1)).insert_axis(Axis(1));
    probs * &(d_probs - &dot)
}

impl Trainer {
    fn new(cfg: &TrainConfig, nets: Networks, channels: usize) -> Self {
        Trainer {
            dist: Distortion {
                mode: cfg.dis_mode,
                channels,
            },
            cfg: cfg.clone(),
            nets,
            optimizers: BTreeMap::new(),
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a),
            noise_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0123_4567),
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0d0),
        }
    }

    fn learned_prior(&self) -> bool {
        self.cfg.prior_mode == PriorMode::Learned
    }

    fn zero(&mut self, groups: &[Group]) {
        for g in groups {
            if let Some(p) = self.nets.group_mut(*g) {
                p.zero_grad();
            }
        }
    }

    /// Clips and steps every group.
    fn apply(&mut self, groups: &[Group]) {
        for g in groups {
            let lr = self.cfg.learning_rate(*g);
            let opt = self.optimizers.entry(*g).or_insert_with(|| Adam::new(lr));
            if let Some(p) = self.nets.group_mut(*g) {
                clip_grad_norm(p, self.cfg.grad_clip);
                opt.step(p);
            }
        }
    }

    fn to_data_space(&self, out: &Array2<f32>) -> Array2<f32> {
        match self.cfg.dis_mode {
            DisMode::Bernoulli => out.mapv(sigmoid),
            DisMode::Mse => out.clone(),
        }
    }

    /// Chain rule through [`Self::to_data_space`].
    fn data_space_backward(&self, out: &Array2<f32>, grad: Array2<f32>) -> Array2<f32> {
        match self.cfg.dis_mode {
            DisMode::Bernoulli => {
                let mut g = grad;
                ndarray::Zip::from(&mut g).and(out).for_each(|g, &o| {
                    let s = sigmoid(o);
                    *g *= s * (1.0 - s);
                });
                g
            }
            DisMode::Mse => grad,
        }
    }

    fn eps(&mut self, n: usize) -> Array2<f32> {
        standard_normal(n, self.cfg.latent_dim, &mut self.noise_rng)
    }

    /// Eval-mode prior sample.
    fn prior_sample(&mut self, n: usize) -> Result<(GaussianBatch<f32>, Array2<f32>)> {
        let noise = self.eps(n);
        let eps = self.eps(n);
        self.nets.prior.sample_prior(&noise, &eps)
    }

    /// Eval-mode encoder sample including latent noise.
    fn encoder_sample(&mut self, x: &Array2<f32>) -> Result<Array2<f32>> {
        let g = self.nets.encoder.forward(x)?;
        let eps = self.eps(x.nrows());
        let mut z = reparameterize_batch(&g, &eps)?;
        inject_latent_noise(&mut z, self.cfg.noise_enabled, &mut self.noise_rng);
        Ok(z)
    }

    fn iteration(
        &mut self,
        it: usize,
        alpha: f64,
        x: &Array2<f32>,
        s: &[usize],
        hook: &mut Option<StepHook<'_>>,
    ) -> Result<MetricsRow> {
        let mut emit = |rec: StepRecord, nets: &Networks| {
            if rec.skipped {
                debug!("iteration {it}: step {} skipped", rec.step);
            }
            if let Some(h) = hook.as_mut() {
                h(&rec, nets);
            }
        };
        let genpf = self.cfg.model == ModelKind::Genpf;

        let (groups, breakdown) = if genpf {
            self.p2_step1(it, alpha, x, s)?
        } else {
            self.p1_step1(it, alpha, x, s)?
        };
        emit(
            StepRecord {
                iteration: it,
                step: 1,
                updated: groups,
                skipped: false,
                loss: Some(breakdown.total),
            },
            &self.nets,
        );

        let skip_latent = genpf && !self.learned_prior();
        let d_eta = if skip_latent {
            emit(
                StepRecord {
                    iteration: it,
                    step: 2,
                    updated: vec![],
                    skipped: true,
                    loss: None,
                },
                &self.nets,
            );
            emit(
                StepRecord {
                    iteration: it,
                    step: 3,
                    updated: vec![],
                    skipped: true,
                    loss: None,
                },
                &self.nets,
            );
            None
        } else {
            let l2 = self.step2(it, alpha, x)?;
            emit(
                StepRecord {
                    iteration: it,
                    step: 2,
                    updated: vec![Group::Eta],
                    skipped: false,
                    loss: Some(l2),
                },
                &self.nets,
            );
            let (g3, l3) = self.step3(it, alpha, x)?;
            emit(
                StepRecord {
                    iteration: it,
                    step: 3,
                    updated: g3,
                    skipped: false,
                    loss: Some(l3),
                },
                &self.nets,
            );
            Some(l2)
        };

        let l4 = self.step4(it, x)?;
        emit(
            StepRecord {
                iteration: it,
                step: 4,
                updated: vec![Group::Omega],
                skipped: false,
                loss: Some(l4),
            },
            &self.nets,
        );

        let (g5, l5) = if genpf {
            self.p2_step5(it, s)?
        } else {
            self.p1_step5(it)?
        };
        emit(
            StepRecord {
                iteration: it,
                step: 5,
                updated: g5,
                skipped: false,
                loss: Some(l5),
            },
            &self.nets,
        );

        let (g6, l6) = if genpf {
            self.p2_step6(it, x, s)?
        } else {
            self.p1_step6(it, s)?
        };
        emit(
            StepRecord {
                iteration: it,
                step: 6,
                updated: g6,
                skipped: false,
                loss: Some(l6),
            },
            &self.nets,
        );

        Ok(MetricsRow {
            iteration: it,
            alpha,
            step1_total: breakdown.total,
            reconstruction: breakdown.reconstruction,
            leakage_term: breakdown.leakage_term(),
            d_eta,
            d_omega: Some(l4),
            d_tau: Some(l6),
        })
    }

    /// Classifier-only ascent steps on `log P_ξ(s|z)`, each on a fresh
    /// random batch, so the leakage estimate the encoder sees next is close
    /// to the best one available rather than fitted to a single batch.
    fn tighten_classifier(
        &mut self,
        ds: &LabeledDataset,
        labels: &[usize],
        m: usize,
    ) -> Result<()> {
        for _ in 0..self.cfg.xi_inner_steps {
            let idx = rand::seq::index::sample(&mut self.data_rng, ds.len(), m).into_vec();
            let x = ds.features.select(Axis(0), &idx);
            let s: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let z = self.encoder_sample(&x)?;
            self.zero(&[Group::Xi]);
            let cls = self
                .nets
                .classifier
                .as_mut()
                .expect("dispf has a classifier");
            let (logits, tape) = cls.net.forward_train(&z, Some(&mut self.dropout_rng))?;
            let lp = log_prob_grad(&softmax_rows(&logits), &s);
            cls.net.backward(&tape, &(lp * -1.0), true);
            self.apply(&[Group::Xi]);
        }
        Ok(())
    }

    fn p1_step1(
        &mut self,
        it: usize,
        alpha: f64,
        x: &Array2<f32>,
        s: &[usize],
    ) -> Result<(Vec<Group>, crate::objectives::LossBreakdown)> {
        let groups = vec![Group::Phi, Group::Theta, Group::Xi];
        self.zero(&groups);
        let mode = self.dist;
        let (g, etape) = self
            .nets
            .encoder
            .forward_train(x, Some(&mut self.dropout_rng))?;
        let eps = self.eps(x.nrows());
        let mut z = reparameterize_batch(&g, &eps)?;
        inject_latent_noise(&mut z, self.cfg.noise_enabled, &mut self.noise_rng);
        let (x_hat, dtape) = self
            .nets
            .decoder
            .forward_train(&z, Some(&mut self.dropout_rng))?;
        let cls = self
            .nets
            .classifier
            .as_mut()
            .expect("dispf has a classifier");
        let (logits, ctape) = cls.net.forward_train(&z, Some(&mut self.dropout_rng))?;
        let probs = softmax_rows(&logits);
        let loss = p1_step1_loss(x, &x_hat, s, &probs, alpha, mode)?;
        check(loss.total, 1, it)?;

        let a = alpha as f32;
        let lp = log_prob_grad(&probs, s);
        let dz_cls = match self.cfg.xi_mode {
            XiMode::Literal => cls.net.backward(&ctape, &(&lp * a), true),
            XiMode::BoundTightening => {
                cls.net.backward(&ctape, &(&lp * -a), true);
                cls.net.backward(&ctape, &(&lp * a), false)
            }
        };
        let dz_dec = self
            .nets
            .decoder
            .backward(&dtape, &dis_grad(x, &x_hat, mode)?, true);
        let (dm, dl) = reparameterize_backward(&g, &eps, &(dz_dec + dz_cls));
        self.nets.encoder.backward(&etape, &dm, &dl, true);
        self.apply(&groups);
        Ok((groups, loss))
    }

    fn p2_step1(
        &mut self,
        it: usize,
        alpha: f64,
        x: &Array2<f32>,
        s: &[usize],
    ) -> Result<(Vec<Group>, crate::objectives::LossBreakdown)> {
        let groups = vec![Group::Phi, Group::Theta, Group::Xi];
        self.zero(&groups);
        let mode = self.dist;
        let n = x.nrows();
        let s_onehot = one_hot::<f32>(
            s,
            self.nets
                .film
                .as_ref()
                .expect("genpf has a film generator")
                .classes(),
        )?;
        let (g, etape) = self
            .nets
            .encoder
            .forward_train(x, Some(&mut self.dropout_rng))?;
        let eps = self.eps(n);
        let mut z = reparameterize_batch(&g, &eps)?;
        inject_latent_noise(&mut z, self.cfg.noise_enabled, &mut self.noise_rng);
        let prior = if self.learned_prior() {
            self.prior_sample(n)?.0
        } else {
            GaussianBatch::standard(n, self.cfg.latent_dim)
        };
        let (x_hat, dtape) = self
            .nets
            .decoder
            .forward_train(&z, Some(&mut self.dropout_rng))?;
        let film = self.nets.film.as_mut().expect("genpf has a film generator");
        let (x_tilde, ftape) = film.forward_train(&z, &s_onehot)?;
        let use_kl = self.cfg.analytic_kl;
        let loss = p2_step1_loss(
            x,
            &x_hat,
            &x_tilde,
            &g,
            use_kl.then_some(&prior),
            alpha,
            mode,
        )?;
        check(loss.total, 1, it)?;

        let a = alpha as f32;
        let dz_film = film.backward(&ftape, &(dis_grad(x, &x_tilde, mode)? * a), true);
        let dz_dec = self
            .nets
            .decoder
            .backward(&dtape, &dis_grad(x, &x_hat, mode)?, true);
        let (mut dm, mut dl) = reparameterize_backward(&g, &eps, &(dz_dec + dz_film));
        if use_kl {
            let kl = kl_batch(&g, &prior)?;
            dm.scaled_add(a, &kl.d_post_mean);
            dl.scaled_add(a, &kl.d_post_logvar);
        }
        self.nets.encoder.backward(&etape, &dm, &dl, true);
        self.apply(&groups);
        Ok((groups, loss))
    }

    /// D_η separates encoder latents (label 1) from prior latents (label 0).
    fn step2(&mut self, it: usize, alpha: f64, x: &Array2<f32>) -> Result<f64> {
        self.zero(&[Group::Eta]);
        let n = x.nrows();
        let z_enc = self.encoder_sample(x)?;
        let (_, z_prior) = self.prior_sample(n)?;
        let both = concatenate![Axis(0), z_enc, z_prior];
        let (out, tape) = self
            .nets
            .d_eta
            .net
            .forward_train::<ChaCha8Rng>(&both, None)?;
        let logits = out.column(0).to_owned();
        let (real, fake) = (
            logits.slice(s![..n]).to_owned(),
            logits.slice(s![n..]).to_owned(),
        );
        let loss = check(
            discriminator_loss(&scores_f64(&real), &scores_f64(&fake)),
            2,
            it,
        )?;
        let a = alpha as f32;
        let grad = concatenate![
            Axis(0),
            bce_logit_grad(&real, true) * a,
            bce_logit_grad(&fake, false) * a
        ];
        self.nets.d_eta.net.backward(&tape, &grad, true);
        self.apply(&[Group::Eta]);
        Ok(loss)
    }

    /// Encoder latents try to look like prior samples and vice versa.
    fn step3(&mut self, it: usize, alpha: f64, x: &Array2<f32>) -> Result<(Vec<Group>, f64)> {
        let learned = self.learned_prior();
        let groups = if learned {
            vec![Group::Phi, Group::Psi]
        } else {
            vec![Group::Phi]
        };
        self.zero(&groups);
        let n = x.nrows();
        let (g, etape) = self
            .nets
            .encoder
            .forward_train(x, Some(&mut self.dropout_rng))?;
        let eps = self.eps(n);
        let mut z = reparameterize_batch(&g, &eps)?;
        inject_latent_noise(&mut z, self.cfg.noise_enabled, &mut self.noise_rng);
        let noise = self.eps(n);
        let eps_p = self.eps(n);
        let (gp, zp, ptape) = self.nets.prior.sample_prior_train(&noise, &eps_p)?;
        let both = concatenate![Axis(0), z, zp];
        let (out, tape) = self
            .nets
            .d_eta
            .net
            .forward_train::<ChaCha8Rng>(&both, None)?;
        let logits = out.column(0).to_owned();
        let (enc_l, prior_l) = (
            logits.slice(s![..n]).to_owned(),
            logits.slice(s![n..]).to_owned(),
        );
        let enc_scores: Vec<f64> = scores_f64(&enc_l).iter().map(|p| 1.0 - p).collect();
        let loss = generator_adversarial_loss(&enc_scores)
            + if learned {
                generator_adversarial_loss(&scores_f64(&prior_l))
            } else {
                0.0
            };
        check(loss, 3, it)?;
        let a = alpha as f32;
        let grad = concatenate![
            Axis(0),
            bce_logit_grad(&enc_l, false) * a,
            bce_logit_grad(&prior_l, true) * a
        ];
        let dz = self.nets.d_eta.net.backward(&tape, &grad, false);
        let (dz_enc, dz_prior) = (
            dz.slice(s![..n, ..]).to_owned(),
            dz.slice(s![n.., ..]).to_owned(),
        );
        let (dm, dl) = reparameterize_backward(&g, &eps, &dz_enc);
        self.nets.encoder.backward(&etape, &dm, &dl, true);
        self.nets.prior.backward(&ptape, &gp, Some(&dz_prior), None);
        self.apply(&groups);
        Ok((groups, loss))
    }

    /// D_ω separates real data (1) from decoded prior samples (0).
    fn step4(&mut self, it: usize, x: &Array2<f32>) -> Result<f64> {
        let (_, zp) = self.prior_sample(x.nrows())?;
        let fake = self.to_data_space(&self.nets.decoder.forward(&zp)?);
        self.train_omega(4, it, x, &fake)
    }

    fn train_omega(
        &mut self,
        step: u8,
        it: usize,
        real: &Array2<f32>,
        fake: &Array2<f32>,
    ) -> Result<f64> {
        self.zero(&[Group::Omega]);
        let n = real.nrows();
        let both = concatenate![Axis(0), *real, *fake];
        let (out, tape) = self
            .nets
            .d_omega
            .net
            .forward_train::<ChaCha8Rng>(&both, None)?;
        let logits = out.column(0).to_owned();
        let (rl, fl) = (
            logits.slice(s![..n]).to_owned(),
            logits.slice(s![n..]).to_owned(),
        );
        let loss = check(
            discriminator_loss(&scores_f64(&rl), &scores_f64(&fl)),
            step,
            it,
        )?;
        let grad = concatenate![
            Axis(0),
            bce_logit_grad(&rl, true),
            bce_logit_grad(&fl, false)
        ];
        self.nets.d_omega.net.backward(&tape, &grad, true);
        self.apply(&[Group::Omega]);
        Ok(loss)
    }

    /// Decoded prior samples try to fool D_ω; returns (loss, dL/dz^prior).
    fn fool_omega_through_decoder(&mut self, zp: &Array2<f32>) -> Result<(f64, Array2<f32>)> {
        let (out, dtape) = self
            .nets
            .decoder
            .forward_train(zp, Some(&mut self.dropout_rng))?;
        let data = self.to_data_space(&out);
        let (lo, wtape) = self
            .nets
            .d_omega
            .net
            .forward_train::<ChaCha8Rng>(&data, None)?;
        let logits = lo.column(0).to_owned();
        let loss = generator_adversarial_loss(&scores_f64(&logits));
        let d_data = self
            .nets
            .d_omega
            .net
            .backward(&wtape, &bce_logit_grad(&logits, true), false);
        let d_out = self.data_space_backward(&out, d_data);
        Ok((loss, self.nets.decoder.backward(&dtape, &d_out, true)))
    }

    fn p1_step5(&mut self, it: usize) -> Result<(Vec<Group>, f64)> {
        let mut groups = vec![Group::Theta, Group::Xi];
        if self.learned_prior() {
            groups.insert(0, Group::Psi);
        }
        self.zero(&groups);
        let n = self.cfg.batch_size;
        let noise = self.eps(n);
        let eps_p = self.eps(n);
        let (gp, zp, ptape) = self.nets.prior.sample_prior_train(&noise, &eps_p)?;
        let (l_omega, dz1) = self.fool_omega_through_decoder(&zp)?;

        let cls = self
            .nets
            .classifier
            .as_mut()
            .expect("dispf has a classifier");
        let (logits, ctape) = cls.net.forward_train(&zp, Some(&mut self.dropout_rng))?;
        let probs = softmax_rows(&logits);
        let d_tau = self.nets.d_tau.as_mut().expect("dispf has D_tau");
        let (lt, ttape) = d_tau.net.forward_train::<ChaCha8Rng>(&probs, None)?;
        let tl = lt.column(0).to_owned();
        let l_tau = generator_adversarial_loss(&scores_f64(&tl));
        let d_probs = d_tau
            .net
            .backward(&ttape, &bce_logit_grad(&tl, true), false);
        let dz2 = cls
            .net
            .backward(&ctape, &softmax_backward(&probs, &d_probs), true);

        let loss = check(l_omega + l_tau, 5, it)?;
        self.nets
            .prior
            .backward(&ptape, &gp, Some(&(dz1 + dz2)), None);
        self.apply(&groups);
        Ok((groups, loss))
    }

    /// D_τ separates one-hot labels (1) from classifier outputs on prior samples (0).
    fn p1_step6(&mut self, it: usize, s: &[usize]) -> Result<(Vec<Group>, f64)> {
        let groups = vec![Group::Tau];
        self.zero(&groups);
        let n = s.len();
        let (_, zp) = self.prior_sample(n)?;
        let cls = self
            .nets
            .classifier
            .as_ref()
            .expect("dispf has a classifier");
        let real = one_hot::<f32>(s, cls.classes())?;
        let fake = cls.classify(&zp)?;
        let d_tau = self.nets.d_tau.as_mut().expect("dispf has D_tau");
        let both = concatenate![Axis(0), real, fake];
        let (out, tape) = d_tau.net.forward_train::<ChaCha8Rng>(&both, None)?;
        let logits = out.column(0).to_owned();
        let (rl, fl) = (
            logits.slice(s![..n]).to_owned(),
            logits.slice(s![n..]).to_owned(),
        );
        let loss = check(
            discriminator_loss(&scores_f64(&rl), &scores_f64(&fl)),
            6,
            it,
        )?;
        let grad = concatenate![
            Axis(0),
            bce_logit_grad(&rl, true),
            bce_logit_grad(&fl, false)
        ];
        d_tau.net.backward(&tape, &grad, true);
        self.apply(&groups);
        Ok((groups, loss))
    }

    fn p2_step5(&mut self, it: usize, s: &[usize]) -> Result<(Vec<Group>, f64)> {
        let mut groups = vec![Group::Theta, Group::Xi];
        if self.learned_prior() {
            groups.insert(0, Group::Psi);
        }
        self.zero(&groups);
        let n = s.len();
        let noise = self.eps(n);
        let eps_p = self.eps(n);
        let (gp, zp, ptape) = self.nets.prior.sample_prior_train(&noise, &eps_p)?;
        let (l_hat, dz1) = self.fool_omega_through_decoder(&zp)?;

        let film = self.nets.film.as_mut().expect("genpf has a film generator");
        let s_onehot = one_hot::<f32>(s, film.classes())?;
        let (out, ftape) = film.forward_train(&zp, &s_onehot)?;
        let data = self.to_data_space(&out);
        let (lo, wtape) = self
            .nets
            .d_omega
            .net
            .forward_train::<ChaCha8Rng>(&data, None)?;
        let logits = lo.column(0).to_owned();
        let l_tilde = generator_adversarial_loss(&scores_f64(&logits));
        let d_data = self
            .nets
            .d_omega
            .net
            .backward(&wtape, &bce_logit_grad(&logits, true), false);
        let d_out = self.data_space_backward(&out, d_data);
        let film = self.nets.film.as_mut().expect("genpf has a film generator");
        let dz2 = film.backward(&ftape, &d_out, true);

        let loss = check(l_hat + l_tilde, 5, it)?;
        self.nets
            .prior
            .backward(&ptape, &gp, Some(&(dz1 + dz2)), None);
        self.apply(&groups);
        Ok((groups, loss))
    }

    /// D_ω separates real data (1) from conditional generations (0).
    fn p2_step6(&mut self, it: usize, x: &Array2<f32>, s: &[usize]) -> Result<(Vec<Group>, f64)> {
        let (_, zp) = self.prior_sample(s.len())?;
        let film = self.nets.film.as_ref().expect("genpf has a film generator");
        let fake = self.to_data_space(&film.forward(&zp, &one_hot::<f32>(s, film.classes())?)?);
        let loss = self.train_omega(6, it, x, &fake)?;
        Ok((vec![Group::Omega], loss))
    }
}
