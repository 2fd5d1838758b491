//! The trainable networks and the stochastic primitives around them.
//!
//! Every network owns its parameters and exposes an eval-mode `forward`, a
//! tape-recording `forward_train`, and a `backward` that returns the input
//! gradient (parameter gradients are accumulated only when asked for, so a
//! frozen network can still pass gradients through).

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::infotheory::{GaussianDiag, LATENT_NOISE_VARIANCE};
use crate::nn::{
    sigmoid, softmax_rows, Activation, Linear, Mlp, MlpTape, NetworkSpec, Params, Real,
};

/// Log-variance heads are clamped to this range before exponentiation.
pub const LOGVAR_MIN: f64 = -12.0;
pub const LOGVAR_MAX: f64 = 8.0;

/// A batch of diagonal Gaussians, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch<F: Real> {
    pub mean: Array2<F>,
    pub logvar: Array2<F>,
}

impl<F: Real> GaussianBatch<F> {
    pub fn standard(n: usize, d: usize) -> Self {
        GaussianBatch {
            mean: Array2::zeros((n, d)),
            logvar: Array2::zeros((n, d)),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn variance(&self) -> Array2<F> {
        self.logvar.mapv(|v| v.exp())
    }

    pub fn row(&self, i: usize) -> Result<GaussianDiag> {
        let to64 =
            |a: ndarray::ArrayView1<F>| a.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        GaussianDiag::new(
            to64(self.mean.row(i)),
            to64(self.logvar.row(i).mapv(|v| v.exp()).view()),
        )
    }
}

/// `mean + exp(logvar / 2) ⊙ eps`, row-wise.
pub fn reparameterize_batch<F: Real>(g: &GaussianBatch<F>, eps: &Array2<F>) -> Result<Array2<F>> {
    if eps.dim() != g.mean.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.mean.len(),
            found: eps.len(),
        });
    }
    let half = F::of(0.5);
    let mut z = g.mean.clone();
    Zip::from(&mut z)
        .and(&g.logvar)
        .and(eps)
        .for_each(|z, &lv, &e| *z = *z + (lv * half).exp() * e);
    Ok(z)
}

/// Pulls `dL/dz` back to `(dL/dmean, dL/dlogvar)` for a reparameterized sample.
pub fn reparameterize_backward<F: Real>(
    g: &GaussianBatch<F>,
    eps: &Array2<F>,
    grad_z: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let half = F::of(0.5);
    let mut d_logvar = grad_z.clone();
    Zip::from(&mut d_logvar)
        .and(&g.logvar)
        .and(eps)
        .for_each(|d, &lv, &e| *d = *d * e * half * (lv * half).exp());
    (grad_z.clone(), d_logvar)
}

/// Single-sample reparameterization: `z = mean + sqrt(variance) ⊙ eps`.
pub fn reparameterize(g: &GaussianDiag, eps: &[f64]) -> Result<Vec<f64>> {
    ensure_dim(g.dim(), eps.len())?;
    Ok(g.mean()
        .iter()
        .zip(g.variance())
        .zip(eps)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect())
}

pub fn standard_normal<F: Real, R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_fn((n, d), |_| {
        let v: f64 = StandardNormal.sample(rng);
        F::of(v)
    })
}

/// Adds `N(0, I/(2πe))` noise to every latent when `enabled`.
pub fn inject_latent_noise<F: Real, R: Rng + ?Sized>(
    z: &mut Array2<F>,
    enabled: bool,
    rng: &mut R,
) {
    if !enabled {
        return;
    }
    let std = LATENT_NOISE_VARIANCE.sqrt();
    z.mapv_inplace(|v| {
        let n: f64 = StandardNormal.sample(rng);
        v + F::of(std * n)
    });
}

pub fn one_hot<F: Real>(labels: &[usize], k: usize) -> Result<Array2<F>> {
    let mut out = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::validation(format!("label {l} outside [0, {k})")));
        }
        out[[i, l]] = F::one();
    }
    Ok(out)
}

fn check_one_hot<F: Real>(s: &Array2<F>, k: usize) -> Result<()> {
    ensure_dim(k, s.ncols())?;
    for row in s.rows() {
        let ones = row.iter().filter(|v| **v == F::one()).count();
        let zeros = row.iter().filter(|v| **v == F::zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::validation(
                "sensitive input is not a valid one-hot row",
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Encoder f_φ
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Encoder<F: Real> {
    net: Mlp<F>,
    latent_dim: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderTape<F: Real> {
    tape: MlpTape<F>,
    /// +1 / −1 where the raw log-variance was clamped at the top / bottom,
    /// 0 inside the range.
    logvar_side: Array2<F>,
}

impl<F: Real> Encoder<F> {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: Vec<usize>,
        latent_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = NetworkSpec::new(input_dim, hidden, 2 * latent_dim).with_dropout(dropout);
        Self::from_spec(spec, rng)
    }

    pub fn from_spec<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        if spec.output_dim % 2 != 0 {
            return Err(Error::validation(
                "encoder output must hold mean and log-variance heads",
            ));
        }
        let latent_dim = spec.output_dim / 2;
        Ok(Encoder {
            net: Mlp::new(spec, rng)?,
            latent_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn net(&self) -> &Mlp<F> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<F> {
        &mut self.net
    }

    fn split(&self, out: &Array2<F>) -> (GaussianBatch<F>, Array2<F>) {
        let d = self.latent_dim;
        let mean = out.slice(s![.., ..d]).to_owned();
        let raw = out.slice(s![.., d..]);
        let (lo, hi) = (F::of(LOGVAR_MIN), F::of(LOGVAR_MAX));
        let logvar = raw.mapv(|v| v.max(lo).min(hi));
        let side = raw.mapv(|v| {
            if v >= hi {
                F::one()
            } else if v <= lo {
                -F::one()
            } else {
                F::zero()
            }
        });
        (GaussianBatch { mean, logvar }, side)
    }

    /// Eval-mode posterior parameters for every row of `x`.
    pub fn forward(&self, x: &Array2<F>) -> Result<GaussianBatch<F>> {
        Ok(self.split(&self.net.forward(x)?).0)
    }

    /// Per-row posteriors as [`GaussianDiag`] values.
    pub fn encode(&self, x: &Array2<F>) -> Result<Vec<GaussianDiag>> {
        let g = self.forward(x)?;
        (0..g.len()).map(|i| g.row(i)).collect()
    }

    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &Array2<F>,
        rng: Option<&mut R>,
    ) -> Result<(GaussianBatch<F>, EncoderTape<F>)> {
        let (out, tape) = self.net.forward_train(x, rng)?;
        let (g, logvar_side) = self.split(&out);
        Ok((g, EncoderTape { tape, logvar_side }))
    }

    pub fn backward(
        &mut self,
        tape: &EncoderTape<F>,
        d_mean: &Array2<F>,
        d_logvar: &Array2<F>,
        accumulate: bool,
    ) -> Array2<F> {
        let d = self.latent_dim;
        let mut grad = Array2::zeros((d_mean.nrows(), 2 * d));
        grad.slice_mut(s![.., ..d]).assign(d_mean);
        // A clamped head only receives gradients that move it back inside.
        let mut d_lv = d_logvar.clone();
        Zip::from(&mut d_lv)
            .and(&tape.logvar_side)
            .for_each(|g, &side| {
                if side * *g < F::zero() {
                    *g = F::zero();
                }
            });
        grad.slice_mut(s![.., d..]).assign(&d_lv);
        self.net.backward(&tape.tape, &grad, accumulate)
    }
}

impl<F: Real> Params<F> for Encoder<F> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        self.net.visit_mut(f)
    }
    fn visit_tensors(&self, f: &mut dyn FnMut(&[usize], &[F])) {
        self.net.visit_tensors(f)
    }
    fn load_tensors(&mut self, t: &mut dyn Iterator<Item = (Vec<usize>, Vec<F>)>) -> Result<()> {
        self.net.load_tensors(t)
    }
}

// ---------------------------------------------------------------------------
// Plain heads: utility decoder g_θ, classifier g_ξ, discriminators
// ---------------------------------------------------------------------------

/// Utility decoder: emits per-pixel Bernoulli logits in image mode and a real
/// vector in embedding mode.
pub type UtilityDecoder<F> = Mlp<F>;

/// Sensitive-attribute classifier producing softmax probabilities.
#[derive(Debug, Clone)]
pub struct Classifier<F: Real> {
    pub net: Mlp<F>,
}

impl<F: Real> Classifier<F> {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = NetworkSpec::new(latent_dim, hidden, classes).with_dropout(dropout);
        Ok(Classifier {
            net: Mlp::new(spec, rng)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, z: &Array2<F>) -> Result<Array2<F>> {
        self.net.forward(z)
    }

    /// Row-wise pmfs over S.
    pub fn classify(&self, z: &Array2<F>) -> Result<Array2<F>> {
        Ok(softmax_rows(&self.logits(z)?))
    }
}

impl<F: Real> Params<F> for Classifier<F> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        self.net.visit_mut(f)
    }
    fn visit_tensors(&self, f: &mut dyn FnMut(&[usize], &[F])) {
        self.net.visit_tensors(f)
    }
    fn load_tensors(&mut self, t: &mut dyn Iterator<Item = (Vec<usize>, Vec<F>)>) -> Result<()> {
        self.net.load_tensors(t)
    }
}

/// Binary discriminator; its network emits a logit and `discriminate`
/// applies the sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator<F: Real> {
    pub net: Mlp<F>,
}

impl<F: Real> Discriminator<F> {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: Vec<usize>,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = NetworkSpec::new(input_dim, hidden, 1).with_dropout(dropout);
        Ok(Discriminator {
            net: Mlp::new(spec, rng)?,
        })
    }

    pub fn logits(&self, x: &Array2<F>) -> Result<Array1<F>> {
        Ok(self.net.forward(x)?.column(0).to_owned())
    }

    /// Scores in (0, 1).
    pub fn discriminate(&self, x: &Array2<F>) -> Result<Array1<F>> {
        Ok(self.logits(x)?.mapv(sigmoid))
    }
}

impl<F: Real> Params<F> for Discriminator<F> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        self.net.visit_mut(f)
    }
    fn visit_tensors(&self, f: &mut dyn FnMut(&[usize], &[F])) {
        self.net.visit_tensors(f)
    }
    fn load_tensors(&mut self, t: &mut dyn Iterator<Item = (Vec<usize>, Vec<F>)>) -> Result<()> {
        self.net.load_tensors(t)
    }
}

// ---------------------------------------------------------------------------
// FiLM conditional generator g_φ′
// ---------------------------------------------------------------------------

/// Width of the hidden layer inside each FiLM head.
pub const FILM_HEAD_HIDDEN: usize = 32;

/// Per-layer modulation parameters for a batch.
#[derive(Debug, Clone)]
pub struct FilmParams<F: Real> {
    pub gamma: Vec<Array2<F>>,
    pub beta: Vec<Array2<F>>,
}

/// Decoder whose hidden layers are modulated as `γ(s) ⊙ h + β(s)`, with
/// `γ, β` produced by small heads from one-hot `s`.
#[derive(Debug, Clone)]
pub struct FilmGenerator<F: Real> {
    trunk: Vec<Linear<F>>,
    heads: Vec<Mlp<F>>,
    activation: Activation,
    classes: usize,
}

#[derive(Debug, Clone)]
pub struct FilmTape<F: Real> {
    inputs: Vec<Array2<F>>,
    pre: Vec<Array2<F>>,
    act: Vec<Array2<F>>,
    head_tapes: Vec<MlpTape<F>>,
    film: FilmParams<F>,
}

impl<F: Real> FilmGenerator<F> {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() || hidden.iter().any(|w| *w == 0) || classes == 0 || output_dim == 0 {
            return Err(Error::validation(
                "FiLM generator needs at least one hidden layer and positive widths",
            ));
        }
        let mut widths = vec![latent_dim];
        widths.extend(&hidden);
        widths.push(output_dim);
        let trunk = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        let mut heads = Vec::with_capacity(hidden.len());
        for &w in &hidden {
            let mut head = Mlp::new(
                NetworkSpec::new(classes, vec![FILM_HEAD_HIDDEN], 2 * w),
                rng,
            )?;
            // γ starts at 1: unit bias on the γ half of the last layer
            let last = head.layers_mut().last_mut().expect("two layers");
            last.weight.mapv_inplace(|v| v * F::of(0.1));
            last.bias.slice_mut(s![..w]).fill(F::one());
            heads.push(head);
        }
        Ok(FilmGenerator {
            trunk,
            heads,
            activation: Activation::LeakyRelu,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn output_dim(&self) -> usize {
        self.trunk.last().expect("non-empty").output_dim()
    }

    pub fn heads_mut(&mut self) -> &mut [Mlp<F>] {
        &mut self.heads
    }

    pub fn film_params(&self, s_onehot: &Array2<F>) -> Result<FilmParams<F>> {
        check_one_hot(s_onehot, self.classes)?;
        let mut gamma = Vec::new();
        let mut beta = Vec::new();
        for head in &self.heads {
            let out = head.forward(s_onehot)?;
            let w = out.ncols() / 2;
            gamma.push(out.slice(s![.., ..w]).to_owned());
            beta.push(out.slice(s![.., w..]).to_owned());
        }
        Ok(FilmParams { gamma, beta })
    }

    /// Eval-mode conditional reconstruction from `z` and one-hot `s`.
    pub fn forward(&self, z: &Array2<F>, s_onehot: &Array2<F>) -> Result<Array2<F>> {
        let film = self.film_params(s_onehot)?;
        self.trunk_forward(z, Some(&film))
    }

    /// The same decoder with γ ≡ 1, β ≡ 0.
    pub fn forward_unmodulated(&self, z: &Array2<F>) -> Result<Array2<F>> {
        self.trunk_forward(z, None)
    }

    fn trunk_forward(&self, z: &Array2<F>, film: Option<&FilmParams<F>>) -> Result<Array2<F>> {
        ensure_dim(self.trunk[0].input_dim(), z.ncols())?;
        let last = self.trunk.len() - 1;
        let mut a = z.clone();
        for (i, layer) in self.trunk.iter().enumerate() {
            a = layer.forward(&a);
            if i < last {
                a.mapv_inplace(|v| self.activation.apply(v));
                if let Some(f) = film {
                    a = &a * &f.gamma[i] + &f.beta[i];
                }
            }
        }
        Ok(a)
    }

    pub fn forward_train(
        &self,
        z: &Array2<F>,
        s_onehot: &Array2<F>,
    ) -> Result<(Array2<F>, FilmTape<F>)> {
        ensure_dim(self.trunk[0].input_dim(), z.ncols())?;
        check_one_hot(s_onehot, self.classes)?;
        let mut head_tapes = Vec::new();
        let mut film = FilmParams {
            gamma: Vec::new(),
            beta: Vec::new(),
        };
        for head in &self.heads {
            let (out, tape) = head.forward_train::<rand_chacha::ChaCha8Rng>(s_onehot, None)?;
            let w = out.ncols() / 2;
            film.gamma.push(out.slice(s![.., ..w]).to_owned());
            film.beta.push(out.slice(s![.., w..]).to_owned());
            head_tapes.push(tape);
        }
        let last = self.trunk.len() - 1;
        let mut tape = FilmTape {
            inputs: Vec::new(),
            pre: Vec::new(),
            act: Vec::new(),
            head_tapes,
            film,
        };
        let mut a = z.clone();
        for (i, layer) in self.trunk.iter().enumerate() {
            let pre = layer.forward(&a);
            tape.inputs.push(a);
            if i < last {
                let h = pre.mapv(|v| self.activation.apply(v));
                a = &h * &tape.film.gamma[i] + &tape.film.beta[i];
                tape.act.push(h);
            } else {
                a = pre.clone();
            }
            tape.pre.push(pre);
        }
        Ok((a, tape))
    }

    /// Returns dL/dz; parameter gradients (trunk and heads) accumulate when asked.
    pub fn backward(
        &mut self,
        tape: &FilmTape<F>,
        grad_out: &Array2<F>,
        accumulate: bool,
    ) -> Array2<F> {
        let last = self.trunk.len() - 1;
        let mut g = grad_out.clone();
        for i in (0..self.trunk.len()).rev() {
            if i < last {
                if accumulate {
                    let w = tape.film.gamma[i].ncols();
                    let mut head_grad = Array2::zeros((g.nrows(), 2 * w));
                    head_grad
                        .slice_mut(s![.., ..w])
                        .assign(&(&g * &tape.act[i]));
                    head_grad.slice_mut(s![.., w..]).assign(&g);
                    self.heads[i].backward(&tape.head_tapes[i], &head_grad, true);
                }
                g = &g * &tape.film.gamma[i];
                let act = self.activation;
                Zip::from(&mut g)
                    .and(&tape.pre[i])
                    .for_each(|gv, &p| *gv = *gv * act.derivative(p));
            }
            g = self.trunk[i].backward(&tape.inputs[i], &g, accumulate);
        }
        g
    }
}

impl<F: Real> Params<F> for FilmGenerator<F> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        self.trunk.iter_mut().for_each(|l| l.visit_mut(f));
        self.heads.iter_mut().for_each(|h| h.visit_mut(f));
    }
    fn visit_tensors(&self, f: &mut dyn FnMut(&[usize], &[F])) {
        self.trunk.iter().for_each(|l| l.visit_tensors(f));
        self.heads.iter().for_each(|h| h.visit_tensors(f));
    }
    fn load_tensors(&mut self, t: &mut dyn Iterator<Item = (Vec<usize>, Vec<F>)>) -> Result<()> {
        self.trunk.iter_mut().try_for_each(|l| l.load_tensors(t))?;
        self.heads.iter_mut().try_for_each(|h| h.load_tensors(t))
    }
}

// ---------------------------------------------------------------------------
// Prior generator g_ψ
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    FixedStandard,
    Learned,
}

/// Maps standard-normal noise to a diagonal Gaussian over the latent space.
/// In fixed mode the network is bypassed and the prior is `N(0, I)`.
#[derive(Debug, Clone)]
pub struct PriorGenerator<F: Real> {
    encoder: Encoder<F>,
    mode: PriorMode,
}

#[derive(Debug, Clone)]
pub struct PriorTape<F: Real> {
    tape: Option<EncoderTape<F>>,
    eps: Array2<F>,
}

impl<F: Real> PriorGenerator<F> {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: Vec<usize>,
        mode: PriorMode,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(PriorGenerator {
            encoder: Encoder::new(latent_dim, hidden, latent_dim, 0.0, rng)?,
            mode,
        })
    }

    pub fn mode(&self) -> PriorMode {
        self.mode
    }

    pub fn noise_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Eval-mode `(prior Gaussian, z^prior)`; `eps` drives the
    /// reparameterized sample.
    pub fn sample_prior(
        &self,
        noise: &Array2<F>,
        eps: &Array2<F>,
    ) -> Result<(GaussianBatch<F>, Array2<F>)> {
        ensure_dim(self.noise_dim(), noise.ncols())?;
        match self.mode {
            PriorMode::FixedStandard => Ok((
                GaussianBatch::standard(noise.nrows(), noise.ncols()),
                noise.clone(),
            )),
            PriorMode::Learned => {
                let g = self.encoder.forward(noise)?;
                let z = reparameterize_batch(&g, eps)?;
                Ok((g, z))
            }
        }
    }

    pub fn sample_prior_train(
        &self,
        noise: &Array2<F>,
        eps: &Array2<F>,
    ) -> Result<(GaussianBatch<F>, Array2<F>, PriorTape<F>)> {
        ensure_dim(self.noise_dim(), noise.ncols())?;
        match self.mode {
            PriorMode::FixedStandard => Ok((
                GaussianBatch::standard(noise.nrows(), noise.ncols()),
                noise.clone(),
                PriorTape {
                    tape: None,
                    eps: eps.clone(),
                },
            )),
            PriorMode::Learned => {
                let (g, tape) = self
                    .encoder
                    .forward_train::<rand_chacha::ChaCha8Rng>(noise, None)?;
                let z = reparameterize_batch(&g, eps)?;
                Ok((
                    g,
                    z,
                    PriorTape {
                        tape: Some(tape),
                        eps: eps.clone(),
                    },
                ))
            }
        }
    }

    /// Backpropagates `dL/dz^prior` plus optional direct gradients on the
    /// prior's parameters into ψ. No-op in fixed mode.
    pub fn backward(
        &mut self,
        tape: &PriorTape<F>,
        g: &GaussianBatch<F>,
        grad_z: Option<&Array2<F>>,
        grad_params: Option<(&Array2<F>, &Array2<F>)>,
    ) {
        let Some(t) = &tape.tape else { return };
        let (mut d_mean, mut d_logvar) = match grad_z {
            Some(gz) => reparameterize_backward(g, &tape.eps, gz),
            None => (
                Array2::zeros(g.mean.raw_dim()),
                Array2::zeros(g.mean.raw_dim()),
            ),
        };
        if let Some((dm, dl)) = grad_params {
            d_mean += dm;
            d_logvar += dl;
        }
        self.encoder.backward(t, &d_mean, &d_logvar, true);
    }
}

impl<F: Real> Params<F> for PriorGenerator<F> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        self.encoder.visit_mut(f)
    }
    fn visit_tensors(&self, f: &mut dyn FnMut(&[usize], &[F])) {
        self.encoder.visit_tensors(f)
    }
    fn load_tensors(&mut self, t: &mut dyn Iterator<Item = (Vec<usize>, Vec<F>)>) -> Result<()> {
        self.encoder.load_tensors(t)
    }
}

/// Row-mean of `KL(posterior ‖ prior)` and its gradients with respect to
/// both sides' means and log-variances (already divided by the batch size).
pub struct KlWithGrad<F: Real> {
    pub value: f64,
    pub d_post_mean: Array2<F>,
    pub d_post_logvar: Array2<F>,
    pub d_prior_mean: Array2<F>,
    pub d_prior_logvar: Array2<F>,
}

pub fn kl_batch<F: Real>(
    post: &GaussianBatch<F>,
    prior: &GaussianBatch<F>,
) -> Result<KlWithGrad<F>> {
    if post.mean.dim() != prior.mean.dim() {
        return Err(Error::DimensionMismatch {
            expected: post.mean.len(),
            found: prior.mean.len(),
        });
    }
    let n = post.len().max(1) as f64;
    let inv_n = F::of(1.0 / n);
    let half = F::of(0.5);
    let mut total = 0.0f64;
    let shape = post.mean.raw_dim();
    let (mut dpm, mut dpl, mut dqm, mut dql) = (
        Array2::zeros(shape.clone()),
        Array2::zeros(shape.clone()),
        Array2::zeros(shape.clone()),
        Array2::zeros(shape),
    );
    Zip::indexed(&post.mean).for_each(|ij, &mp| {
        let (lp, mq, lq) = (post.logvar[ij], prior.mean[ij], prior.logvar[ij]);
        let vp = lp.exp();
        let vq = lq.exp();
        let diff = mp - mq;
        let ratio = (vp + diff * diff) / vq;
        total += (half * (lq - lp + ratio - F::one()))
            .to_f64()
            .unwrap_or(f64::NAN);
        dpm[ij] = diff / vq * inv_n;
        dpl[ij] = half * (vp / vq - F::one()) * inv_n;
        dqm[ij] = -diff / vq * inv_n;
        dql[ij] = half * (F::one() - ratio) * inv_n;
    });
    Ok(KlWithGrad {
        value: total / n,
        d_post_mean: dpm,
        d_post_logvar: dpl,
        d_prior_mean: dqm,
        d_prior_logvar: dql,
    })
}

/// Mean over rows of `sum(axis 1)`; handy for reporting.
pub fn row_mean_of_sums<F: Real>(a: &Array2<F>) -> f64 {
    let n = a.nrows().max(1) as f64;
    a.sum_axis(Axis(1))
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infotheory::kl_gaussian_diag;
    use crate::nn::Params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn encoder_variances_positive_and_eval_deterministic() {
        let mut r = rng();
        let enc = Encoder::<f32>::new(6, vec![16], 3, 0.1, &mut r).unwrap();
        let x = standard_normal::<f32, _>(5, 6, &mut r);
        let a = enc.encode(&x).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|g| g.variance().iter().all(|v| *v > 0.0)));
        assert_eq!(enc.forward(&x).unwrap(), enc.forward(&x).unwrap());
        // batching preserves order
        let single = enc.forward(&x.slice(s![2..3, ..]).to_owned()).unwrap();
        assert_eq!(single.mean.row(0), enc.forward(&x).unwrap().mean.row(2));
        assert!(enc.forward(&Array2::zeros((1, 4))).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let g = GaussianDiag::new(vec![1.0, 2.0], vec![0.25, 0.25]).unwrap();
        assert_eq!(reparameterize(&g, &[2.0, -2.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert!(reparameterize(&g, &[0.0]).is_err());
        let tiny = GaussianDiag::new(vec![3.0], vec![1e-300]).unwrap();
        assert!((reparameterize(&tiny, &[5.0]).unwrap()[0] - 3.0).abs() < 1e-100);
    }

    #[test]
    fn latent_noise_variance_and_determinism() {
        let mut z = Array2::<f64>::zeros((100_000, 1));
        inject_latent_noise(&mut z, true, &mut rng());
        let var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        assert!((var - LATENT_NOISE_VARIANCE).abs() / LATENT_NOISE_VARIANCE < 0.05);
        let mut again = Array2::<f64>::zeros((100_000, 1));
        inject_latent_noise(&mut again, true, &mut rng());
        assert_eq!(z, again);
        let mut off = Array2::<f64>::ones((3, 2));
        inject_latent_noise(&mut off, false, &mut rng());
        assert_eq!(off, Array2::<f64>::ones((3, 2)));
    }

    #[test]
    fn classifier_rows_are_pmfs_and_zero_layer_is_uniform() {
        let mut r = rng();
        let mut cls = Classifier::<f64>::new(4, vec![8], 3, 0.0, &mut r).unwrap();
        let z = standard_normal::<f64, _>(7, 4, &mut r);
        let p = cls.classify(&z).unwrap();
        assert_eq!(p.nrows(), 7);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let last = cls.net.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        assert!(cls
            .classify(&z)
            .unwrap()
            .iter()
            .all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn discriminator_range_and_zero_weights() {
        let mut r = rng();
        let mut d = Discriminator::<f64>::new(3, vec![8], 0.0, &mut r).unwrap();
        let x = standard_normal::<f64, _>(20, 3, &mut r).mapv(|v| v * 10.0);
        assert!(d
            .discriminate(&x)
            .unwrap()
            .iter()
            .all(|v| *v > 0.0 && *v < 1.0));
        d.net
            .visit_mut(&mut |p, _| p.iter_mut().for_each(|v| *v = 0.0));
        assert!(d.discriminate(&x).unwrap().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn film_identity_modulation_matches_plain_decoder() {
        let mut r = rng();
        let mut g = FilmGenerator::<f64>::new(4, vec![8, 8], 5, 3, &mut r).unwrap();
        for head in g.heads_mut() {
            let last = head.layers_mut().last_mut().unwrap();
            last.weight.fill(0.0);
            let w = last.bias.len() / 2;
            last.bias.fill(0.0);
            last.bias.slice_mut(s![..w]).fill(1.0);
        }
        let z = standard_normal::<f64, _>(6, 4, &mut r);
        let s = one_hot::<f64>(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        assert_eq!(
            g.forward(&z, &s).unwrap(),
            g.forward_unmodulated(&z).unwrap()
        );
        let bad = Array2::from_elem((6, 3), 0.5);
        assert!(g.forward(&z, &bad).is_err());
    }

    #[test]
    fn film_gradients_match_finite_differences() {
        let mut r = rng();
        let mut g = FilmGenerator::<f64>::new(3, vec![5], 2, 2, &mut r).unwrap();
        g.activation = Activation::Tanh;
        let z = standard_normal::<f64, _>(4, 3, &mut r);
        let s = one_hot::<f64>(&[0, 1, 1, 0], 2).unwrap();
        let weights = standard_normal::<f64, _>(4, 2, &mut r);
        let loss =
            |g: &FilmGenerator<f64>, z: &Array2<f64>| (&g.forward(z, &s).unwrap() * &weights).sum();
        let (_, tape) = g.forward_train(&z, &s).unwrap();
        g.zero_grad();
        let dz = g.backward(&tape, &weights, true);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[[i, j]] += h;
                zm[[i, j]] -= h;
                let fd = (loss(&g, &zp) - loss(&g, &zm)) / (2.0 * h);
                assert!((fd - dz[[i, j]]).abs() < 1e-6, "{fd} vs {}", dz[[i, j]]);
            }
        }
        // a head bias parameter
        let mut grads = Vec::new();
        g.visit_mut(&mut |_, gr| grads.push(gr.to_vec()));
        let head_bias_grad = grads.last().unwrap()[0];
        let perturb =
            |g: &mut FilmGenerator<f64>, d: f64| g.heads_mut()[0].layers_mut()[1].bias[0] += d;
        perturb(&mut g, h);
        let up = loss(&g, &z);
        perturb(&mut g, -2.0 * h);
        let down = loss(&g, &z);
        assert!(((up - down) / (2.0 * h) - head_bias_grad).abs() < 1e-6);
    }

    #[test]
    fn prior_fixed_mode_is_standard() {
        let mut r = rng();
        let pg = PriorGenerator::<f64>::new(4, vec![8], PriorMode::FixedStandard, &mut r).unwrap();
        let noise = standard_normal::<f64, _>(3, 4, &mut r);
        let eps = standard_normal::<f64, _>(3, 4, &mut r);
        let (g, z) = pg.sample_prior(&noise, &eps).unwrap();
        assert_eq!(z, noise);
        assert_eq!(g, GaussianBatch::standard(3, 4));
        let learned = PriorGenerator::<f64>::new(4, vec![8], PriorMode::Learned, &mut r).unwrap();
        let (g, z) = learned.sample_prior(&noise, &eps).unwrap();
        assert!(g.variance().iter().all(|v| *v > 0.0));
        assert_eq!(z, learned.sample_prior(&noise, &eps).unwrap().1);
    }

    #[test]
    fn kl_batch_matches_closed_form_and_gradients() {
        let mut r = rng();
        let post = GaussianBatch {
            mean: standard_normal::<f64, _>(3, 2, &mut r),
            logvar: standard_normal::<f64, _>(3, 2, &mut r),
        };
        let prior = GaussianBatch {
            mean: standard_normal::<f64, _>(3, 2, &mut r),
            logvar: standard_normal::<f64, _>(3, 2, &mut r),
        };
        let k = kl_batch(&post, &prior).unwrap();
        let direct: f64 = (0..3)
            .map(|i| kl_gaussian_diag(&post.row(i).unwrap(), &prior.row(i).unwrap()).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((k.value - direct).abs() < 1e-12);
        let h = 1e-6;
        let mut p2 = post.clone();
        p2.logvar[[1, 0]] += h;
        let mut p3 = post.clone();
        p3.logvar[[1, 0]] -= h;
        let fd = (kl_batch(&p2, &prior).unwrap().value - kl_batch(&p3, &prior).unwrap().value)
            / (2.0 * h);
        assert!((fd - k.d_post_logvar[[1, 0]]).abs() < 1e-7);
        let mut q2 = prior.clone();
        q2.mean[[2, 1]] += h;
        let mut q3 = prior.clone();
        q3.mean[[2, 1]] -= h;
        let fd =
            (kl_batch(&post, &q2).unwrap().value - kl_batch(&post, &q3).unwrap().value) / (2.0 * h);
        assert!((fd - k.d_prior_mean[[2, 1]]).abs() < 1e-7);
    }
}
