//! Minimal dense-network machinery with explicit backward passes.
//!
//! Forward passes that need gradients return a tape; `backward` consumes the
//! tape, accumulates parameter gradients into the layers and returns the
//! gradient with respect to the input. Optimizers only touch the parameter
//! group they are given, which is what the block-coordinate training loops
//! rely on.

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::{Array1, Array2, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Floating point element type of a network.
pub trait Real: NdFloat + FromPrimitive + Sum + Debug {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// Leaky ReLU with negative slope 0.2.
    LeakyRelu,
    Tanh,
    Elu,
    Sigmoid,
}

const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply<F: Real>(self, x: F) -> F {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(F::zero()),
            Activation::LeakyRelu => {
                if x > F::zero() {
                    x
                } else {
                    x * F::of(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > F::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation value.
    pub fn derivative<F: Real>(self, x: F) -> F {
        match self {
            Activation::Identity => F::one(),
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::of(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                F::one() - t * t
            }
            Activation::Elu => {
                if x > F::zero() {
                    F::one()
                } else {
                    x.exp()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (F::one() - s)
            }
        }
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Visits parameters and their gradient buffers in a fixed order.
pub trait Params<F: Real> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F]));
    /// Visits `(shape, values)` of every parameter tensor.
    fn visit_tensors(&self, f: &mut dyn FnMut(&[usize], &[F]));
    /// Overwrites parameters from `(shape, values)` pairs in visit order.
    fn load_tensors(
        &mut self,
        tensors: &mut dyn Iterator<Item = (Vec<usize>, Vec<F>)>,
    ) -> Result<()>;

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, g| g.iter_mut().for_each(|v| *v = F::zero()));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |_, v| n += v.len());
        n
    }

    fn grad_norm(&mut self) -> F {
        let mut sq = F::zero();
        self.visit_mut(&mut |_, g| sq += g.iter().map(|v| *v * *v).sum::<F>());
        sq.sqrt()
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    grad_weight: Array2<F>,
    grad_bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight =
            Array2::from_shape_fn((input, output), |_| F::of(rng.random_range(-bound..bound)));
        Self::from_parts(weight, Array1::zeros(output))
    }

    pub fn from_parts(weight: Array2<F>, bias: Array1<F>) -> Self {
        let (i, o) = weight.dim();
        assert_eq!(o, bias.len(), "bias length must equal output width");
        Linear {
            weight,
            bias,
            grad_weight: Array2::zeros((i, o)),
            grad_bias: Array1::zeros(o),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients (when `accumulate`) and returns dL/dx.
    pub fn backward(
        &mut self,
        input: &Array2<F>,
        grad_out: &Array2<F>,
        accumulate: bool,
    ) -> Array2<F> {
        if accumulate {
            self.grad_weight += &input.t().dot(grad_out);
            self.grad_bias += &grad_out.sum_axis(Axis(0));
        }
        grad_out.dot(&self.weight.t())
    }

    pub fn grads(&self) -> (&Array2<F>, &Array1<F>) {
        (&self.grad_weight, &self.grad_bias)
    }
}

impl<F: Real> Params<F> for Linear<F> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        f(
            self.weight.as_slice_mut().expect("standard layout"),
            self.grad_weight.as_slice_mut().expect("standard layout"),
        );
        f(
            self.bias.as_slice_mut().expect("standard layout"),
            self.grad_bias.as_slice_mut().expect("standard layout"),
        );
    }

    fn visit_tensors(&self, f: &mut dyn FnMut(&[usize], &[F])) {
        f(
            self.weight.shape(),
            self.weight.as_slice().expect("standard layout"),
        );
        f(
            self.bias.shape(),
            self.bias.as_slice().expect("standard layout"),
        );
    }

    fn load_tensors(
        &mut self,
        tensors: &mut dyn Iterator<Item = (Vec<usize>, Vec<F>)>,
    ) -> Result<()> {
        let (shape, w) = tensors
            .next()
            .ok_or_else(|| Error::validation("missing weight tensor"))?;
        if shape != self.weight.shape() {
            return Err(Error::validation(format!(
                "weight shape {shape:?} does not match {:?}",
                self.weight.shape()
            )));
        }
        self.weight = Array2::from_shape_vec(self.weight.raw_dim(), w)
            .map_err(|e| Error::validation(e.to_string()))?;
        let (shape, b) = tensors
            .next()
            .ok_or_else(|| Error::validation("missing bias tensor"))?;
        if shape != self.bias.shape() {
            return Err(Error::validation(format!(
                "bias shape {shape:?} does not match {:?}",
                self.bias.shape()
            )));
        }
        self.bias = Array1::from(b);
        Ok(())
    }
}

/// Architecture of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    #[serde(default = "default_output_activation")]
    pub output_activation: Activation,
}

fn default_output_activation() -> Activation {
    Activation::Identity
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Self {
        NetworkSpec {
            input_dim,
            hidden_widths,
            output_dim,
            dropout_rate: 0.0,
            activation: Activation::LeakyRelu,
            output_activation: Activation::Identity,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.iter().any(|w| *w == 0)
        {
            return Err(Error::validation("network widths must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Cached activations from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape<F: Real> {
    inputs: Vec<Array2<F>>,
    pre: Vec<Array2<F>>,
    masks: Vec<Option<Array2<F>>>,
}

#[derive(Debug, Clone)]
pub struct Mlp<F: Real> {
    spec: NetworkSpec,
    layers: Vec<Linear<F>>,
}

impl<F: Real> Mlp<F> {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden_widths);
        widths.push(spec.output_dim);
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<F>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Eval-mode forward pass: no dropout, no tape.
    pub fn forward(&self, x: &Array2<F>) -> Result<Array2<F>> {
        ensure_dim(self.spec.input_dim, x.ncols())?;
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = if i == last {
                self.spec.output_activation
            } else {
                self.spec.activation
            };
            a = layer.forward(&a);
            a.mapv_inplace(|v| act.apply(v));
        }
        Ok(a)
    }

    /// Forward pass recording a tape. Dropout is active only when an rng is
    /// supplied.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &Array2<F>,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<F>, MlpTape<F>)> {
        ensure_dim(self.spec.input_dim, x.ncols())?;
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.spec.dropout_rate;
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&a);
            tape.inputs.push(a);
            let act = if i == last {
                self.spec.output_activation
            } else {
                self.spec.activation
            };
            let mut h = pre.mapv(|v| act.apply(v));
            let mut mask = None;
            if i != last && self.spec.dropout_rate > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    let scale = F::of(1.0 / keep);
                    let m = Array2::from_shape_fn(h.raw_dim(), |_| {
                        if r.random::<f64>() < keep {
                            scale
                        } else {
                            F::zero()
                        }
                    });
                    h *= &m;
                    mask = Some(m);
                }
            }
            tape.pre.push(pre);
            tape.masks.push(mask);
            a = h;
        }
        Ok((a, tape))
    }

    /// Backpropagates `grad_out` (dL/d output). Parameter gradients are
    /// accumulated only when `accumulate` is set; the input gradient is
    /// always returned.
    pub fn backward(
        &mut self,
        tape: &MlpTape<F>,
        grad_out: &Array2<F>,
        accumulate: bool,
    ) -> Array2<F> {
        let last = self.layers.len() - 1;
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if let Some(mask) = &tape.masks[i] {
                g *= mask;
            }
            let act = if i == last {
                self.spec.output_activation
            } else {
                self.spec.activation
            };
            if act != Activation::Identity {
                Zip::from(&mut g)
                    .and(&tape.pre[i])
                    .for_each(|gv, &p| *gv = *gv * act.derivative(p));
            }
            g = self.layers[i].backward(&tape.inputs[i], &g, accumulate);
        }
        g
    }
}

impl<F: Real> Params<F> for Mlp<F> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F], &mut [F])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }

    fn visit_tensors(&self, f: &mut dyn FnMut(&[usize], &[F])) {
        self.layers.iter().for_each(|l| l.visit_tensors(f));
    }

    fn load_tensors(
        &mut self,
        tensors: &mut dyn Iterator<Item = (Vec<usize>, Vec<F>)>,
    ) -> Result<()> {
        self.layers
            .iter_mut()
            .try_for_each(|l| l.load_tensors(tensors))
    }
}

/// Adam with bias correction. State is allocated lazily on the first step
/// and tied to the visit order of the parameter group it is used with.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut dyn Params<F>) {
        self.t += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(self.t));
        let c2 = F::of(1.0 - self.beta2.powi(self.t));
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        let init = self.m.is_empty();
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |p, g| {
            if init {
                ms.push(vec![F::zero(); p.len()]);
                vs.push(vec![F::zero(); p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(params: &mut dyn Params<F>, max_norm: f64) -> F {
    let norm = params.grad_norm();
    let max = F::of(max_norm);
    if norm > max && norm.is_finite() {
        let scale = max / (norm + F::of(1e-12));
        params.visit_mut(&mut |_, g| g.iter_mut().for_each(|v| *v = *v * scale));
    }
    norm
}

/// Order-sensitive FNV-1a hash over parameter bit patterns.
pub fn param_fingerprint<F: Real>(params: &dyn Params<F>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    params.visit_tensors(&mut |_, values| {
        for v in values {
            let bits = v.to_f64().expect("finite").to_bits();
            for byte in bits.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    });
    h
}
