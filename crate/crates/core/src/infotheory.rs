//! Exact information-theoretic quantities on finite distributions, plus the
//! closed-form Gaussian formulas used by the variational objectives.
//!
//! Everything here is computed in nats; [`LogBase`] converts at the surface.
//! These functions are the ground truth the neural estimators are checked
//! against: the leakage decomposition, the complexity identity, and both
//! variational leakage bounds evaluate exactly on a [`DiscreteTriple`].

use std::f64::consts::{E, LN_2, PI};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Probabilities below this are exact zeros in oracle computations.
pub const ZERO_MASS: f64 = 1e-15;

const SUM_TOLERANCE: f64 = 1e-12;

/// 2πe, the normalizer that makes a Gaussian of variance 1/(2πe) have zero
/// differential entropy per coordinate.
pub const TWO_PI_E: f64 = 2.0 * PI * E;

/// Variance of the latent noise injected during training, 1/(2πe).
pub const LATENT_NOISE_VARIANCE: f64 = 1.0 / TWO_PI_E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogBase {
    Two,
    E,
}

impl LogBase {
    pub fn from_nats(self, nats: f64) -> f64 {
        match self {
            LogBase::Two => nats / LN_2,
            LogBase::E => nats,
        }
    }
}

/// A probability mass function over a finite alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Pmf(Vec<f64>);

impl Pmf {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_pmf(&probs)?;
        Ok(Pmf(probs))
    }

    /// Uniform pmf over `k` outcomes.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::validation("pmf needs at least one outcome"));
        }
        Ok(Pmf(vec![1.0 / k as f64; k]))
    }

    /// Normalizes non-negative weights into a pmf.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::validation("weights sum to zero"));
        }
        Pmf::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for Pmf {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Pmf::new(v)
    }
}

impl From<Pmf> for Vec<f64> {
    fn from(p: Pmf) -> Self {
        p.0
    }
}

fn validate_pmf(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::validation("pmf is empty"));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::validation(format!(
            "pmf entry {p} is negative or not finite"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::validation(format!("pmf sums to {total}, not 1")));
    }
    Ok(())
}

/// A conditional pmf table: row `i` is the distribution given conditioning
/// index `i`. Rows conditioning on null events may be any valid pmf.
#[derive(Debug, Clone, PartialEq)]
pub struct CondPmf {
    table: Array2<f64>,
}

impl CondPmf {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        for (i, row) in table.rows().into_iter().enumerate() {
            validate_pmf(row.as_slice().unwrap_or(&row.to_vec()))
                .map_err(|e| Error::validation(format!("conditional row {i}: {e}")))?;
        }
        Ok(CondPmf { table })
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn n_conditions(&self) -> usize {
        self.table.nrows()
    }

    pub fn n_outcomes(&self) -> usize {
        self.table.ncols()
    }
}

/// A diagonal-covariance Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDiag {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        ensure_dim(mean.len(), variance.len())?;
        if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::validation(
                "variance entries must be positive and finite",
            ));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::validation("mean entries must be finite"));
        }
        Ok(GaussianDiag { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianDiag {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density at `x` in nats.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.variance)
            .zip(x)
            .map(|((m, v), xi)| -0.5 * ((2.0 * PI * v).ln() + (xi - m).powi(2) / v))
            .sum()
    }
}

/// Shannon entropy with 0·log 0 = 0.
pub fn shannon_entropy(p: &Pmf, base: LogBase) -> f64 {
    base.from_nats(entropy_nats(p.probs().iter().copied()))
}

fn entropy_nats(probs: impl Iterator<Item = f64>) -> f64 {
    probs
        .filter(|p| *p > ZERO_MASS)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// KL(p ‖ q) between diagonal Gaussians, in nats.
///
/// Standard closed form: ½ Σ [ln(v_q/v_p) + (v_p + (μ_p − μ_q)²)/v_q − 1].
pub fn kl_gaussian_diag(p: &GaussianDiag, q: &GaussianDiag) -> Result<f64> {
    ensure_dim(p.dim(), q.dim())?;
    let kl: f64 = p
        .mean
        .iter()
        .zip(&p.variance)
        .zip(q.mean.iter().zip(&q.variance))
        .map(|((mp, vp), (mq, vq))| (vq / vp).ln() + (vp + (mp - mq).powi(2)) / vq - 1.0)
        .sum::<f64>()
        * 0.5;
    Ok(kl.max(0.0))
}

/// Differential entropy of an isotropic Gaussian with the given per-coordinate
/// variance in `d` dimensions: (d/2)·ln(2πe·variance).
pub fn gaussian_differential_entropy(variance: f64, d: usize) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::validation(format!(
            "variance must be positive, got {variance}"
        )));
    }
    if d == 0 {
        return Err(Error::validation("dimension must be positive"));
    }
    Ok(0.5 * d as f64 * (TWO_PI_E * variance).ln())
}

/// A finite joint P(S,X) together with a channel P(Z|X). The induced joint
/// P(S,X,Z) = P(S,X)·P(Z|X) satisfies the Markov chain S – X – Z.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTriple {
    joint_sx: Array2<f64>,
    channel_zx: Array2<f64>,
}

/// The four terms of the leakage decomposition, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoDecomposition {
    pub i_sz: f64,
    pub i_xz: f64,
    pub h_x_given_s: f64,
    pub h_x_given_sz: f64,
}

impl InfoDecomposition {
    /// |I(S;Z) − (I(X;Z) − H(X|S) + H(X|S,Z))|.
    pub fn identity_violation(&self) -> f64 {
        (self.i_sz - (self.i_xz - self.h_x_given_s + self.h_x_given_sz)).abs()
    }
}

impl DiscreteTriple {
    pub fn new(joint_sx: Array2<f64>, channel_zx: Array2<f64>) -> Result<Self> {
        ensure_dim(joint_sx.ncols(), channel_zx.nrows())?;
        if joint_sx.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::validation(
                "joint P(S,X) has negative or non-finite entries",
            ));
        }
        let total = joint_sx.sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::validation(format!(
                "joint P(S,X) sums to {total}, not 1"
            )));
        }
        CondPmf::new(channel_zx.clone())
            .map_err(|e| Error::validation(format!("channel P(Z|X): {e}")))?;
        Ok(DiscreteTriple {
            joint_sx,
            channel_zx,
        })
    }

    /// Reads a triple from a plain-text file: the |S|×|X| joint matrix, a
    /// blank line, then the |X|×|Z| channel matrix. One row per line,
    /// whitespace-separated decimals; lines starting with `#` are ignored.
    pub fn from_text_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| match e {
            Error::Validation(reason) => Error::format(path, reason),
            other => other,
        })
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut blocks: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
        for line in text.lines() {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            if line.is_empty() {
                if !blocks.last().map_or(true, Vec::is_empty) {
                    blocks.push(Vec::new());
                }
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::validation(format!("bad number {tok:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.last_mut().expect("non-empty").push(row);
        }
        blocks.retain(|b| !b.is_empty());
        if blocks.len() != 2 {
            return Err(Error::validation(format!(
                "expected 2 matrices separated by a blank line, found {}",
                blocks.len()
            )));
        }
        let joint = rows_to_matrix(&blocks[0])?;
        let channel = rows_to_matrix(&blocks[1])?;
        DiscreteTriple::new(joint, channel)
    }

    pub fn joint_sx(&self) -> &Array2<f64> {
        &self.joint_sx
    }

    pub fn channel_zx(&self) -> &Array2<f64> {
        &self.channel_zx
    }

    pub fn n_s(&self) -> usize {
        self.joint_sx.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.joint_sx.ncols()
    }

    pub fn n_z(&self) -> usize {
        self.channel_zx.ncols()
    }

    /// P(s,x,z) indexed `[s, x, z]`.
    pub fn joint_sxz(&self) -> Array3<f64> {
        let (ns, nx, nz) = (self.n_s(), self.n_x(), self.n_z());
        Array3::from_shape_fn((ns, nx, nz), |(s, x, z)| {
            self.joint_sx[[s, x]] * self.channel_zx[[x, z]]
        })
    }

    pub fn p_s(&self) -> Vec<f64> {
        self.joint_sx.sum_axis(Axis(1)).to_vec()
    }

    pub fn p_x(&self) -> Vec<f64> {
        self.joint_sx.sum_axis(Axis(0)).to_vec()
    }

    pub fn p_z(&self) -> Vec<f64> {
        let px = self.p_x();
        (0..self.n_z())
            .map(|z| {
                px.iter()
                    .enumerate()
                    .map(|(x, p)| p * self.channel_zx[[x, z]])
                    .sum()
            })
            .collect()
    }

    /// P(s,z) indexed `[s, z]`.
    pub fn p_sz(&self) -> Array2<f64> {
        self.joint_sxz().sum_axis(Axis(1))
    }

    /// P(x,z) indexed `[x, z]`.
    pub fn p_xz(&self) -> Array2<f64> {
        self.joint_sxz().sum_axis(Axis(0))
    }

    /// The exact posterior P(S|Z), rows indexed by z. Rows for null z are uniform.
    pub fn posterior_s_given_z(&self) -> CondPmf {
        let psz = self.p_sz();
        let (ns, nz) = psz.dim();
        let table = Array2::from_shape_fn((nz, ns), |(z, s)| {
            let pz: f64 = psz.column(z).sum();
            if pz > ZERO_MASS {
                psz[[s, z]] / pz
            } else {
                1.0 / ns as f64
            }
        });
        CondPmf { table }
    }

    /// The exact uncertainty decoder P(X|S,Z), rows indexed by `s·|Z| + z`.
    pub fn posterior_x_given_sz(&self) -> CondPmf {
        let j = self.joint_sxz();
        let (ns, nx, nz) = j.dim();
        let mut table = Array2::zeros((ns * nz, nx));
        for s in 0..ns {
            for z in 0..nz {
                let psz: f64 = (0..nx).map(|x| j[[s, x, z]]).sum();
                for x in 0..nx {
                    table[[s * nz + z, x]] = if psz > ZERO_MASS {
                        j[[s, x, z]] / psz
                    } else {
                        1.0 / nx as f64
                    };
                }
            }
        }
        CondPmf { table }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::validation("ragged matrix rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| Error::validation(e.to_string()))
}

fn entropy_of<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    entropy_nats(values.into_iter().copied())
}

/// Exact I(S;Z), I(X;Z), H(X|S) and H(X|S,Z) of the induced joint.
pub fn exact_decomposition(t: &DiscreteTriple) -> InfoDecomposition {
    let sxz = t.joint_sxz();
    let sz = t.p_sz();
    let xz = t.p_xz();
    let h_s = entropy_of(&t.p_s());
    let h_x = entropy_of(&t.p_x());
    let h_z = entropy_of(&t.p_z());
    let h_sx = entropy_of(t.joint_sx.iter());
    let h_sz = entropy_of(sz.iter());
    let h_xz = entropy_of(xz.iter());
    let h_sxz = entropy_of(sxz.iter());
    InfoDecomposition {
        i_sz: (h_s + h_z - h_sz).max(0.0),
        i_xz: (h_x + h_z - h_xz).max(0.0),
        h_x_given_s: (h_sx - h_s).max(0.0),
        h_x_given_sz: (h_sxz - h_sz).max(0.0),
    }
}

/// KL(p ‖ q) over a finite alphabet; infinite when q has no mass where p does.
fn kl_discrete(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > ZERO_MASS)
        .map(|(pi, qi)| {
            if *qi > 0.0 {
                pi * (pi / qi).ln()
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

fn conditional_kl_to_marginal(t: &DiscreteTriple, q_z: &Pmf) -> f64 {
    let px = t.p_x();
    px.iter()
        .enumerate()
        .filter(|(_, p)| **p > ZERO_MASS)
        .map(|(x, p)| {
            p * kl_discrete(
                t.channel_zx.row(x).as_slice().expect("standard layout"),
                q_z.probs(),
            )
        })
        .sum()
}

fn check_q_z(t: &DiscreteTriple, q_z: &Pmf) -> Result<Vec<f64>> {
    ensure_dim(t.n_z(), q_z.len())?;
    let pz = t.p_z();
    if let Some(z) = (0..pz.len()).find(|&z| pz[z] > ZERO_MASS && q_z.probs()[z] <= 0.0) {
        return Err(Error::validation(format!(
            "q_z has zero mass at z={z} where P_Z is positive"
        )));
    }
    Ok(pz)
}

/// Returns `(I(X;Z), KL(P_{Z|X} ‖ q_z | P_X) − KL(P_Z ‖ q_z))`. The two agree
/// for any q_z that is positive on the support of P_Z.
pub fn complexity_identity_check(t: &DiscreteTriple, q_z: &Pmf) -> Result<(f64, f64)> {
    let pz = check_q_z(t, q_z)?;
    let lhs = exact_decomposition(t).i_xz;
    let rhs = conditional_kl_to_marginal(t, q_z) - kl_discrete(&pz, q_z.probs());
    Ok((lhs, rhs))
}

/// Variational upper bound on I(S;Z):
/// KL(P_{Z|X} ‖ q_z | P_X) − KL(P_Z ‖ q_z) + H_ce(X|S,Z; q) − H(X|S).
///
/// `q_x_given_sz` rows are indexed by `s·|Z| + z`.
pub fn leakage_upper_bound(t: &DiscreteTriple, q_z: &Pmf, q_x_given_sz: &CondPmf) -> Result<f64> {
    let pz = check_q_z(t, q_z)?;
    let (ns, nx, nz) = (t.n_s(), t.n_x(), t.n_z());
    ensure_dim(ns * nz, q_x_given_sz.n_conditions())?;
    ensure_dim(nx, q_x_given_sz.n_outcomes())?;
    let q = q_x_given_sz.table();
    let sxz = t.joint_sxz();
    let mut cross_entropy = 0.0;
    for ((s, x, z), p) in sxz.indexed_iter() {
        if *p <= ZERO_MASS {
            continue;
        }
        let qv = q[[s * nz + z, x]];
        if qv <= 0.0 {
            return Err(Error::validation(format!(
                "q(x={x}|s={s},z={z}) is zero where P is positive"
            )));
        }
        cross_entropy -= p * qv.ln();
    }
    let h_x_given_s = exact_decomposition(t).h_x_given_s;
    Ok(
        conditional_kl_to_marginal(t, q_z) - kl_discrete(&pz, q_z.probs()) + cross_entropy
            - h_x_given_s,
    )
}

/// Variational lower bound on I(S;Z): E[log q(S|Z)] + H(S).
///
/// `q_s_given_z` rows are indexed by z.
pub fn leakage_lower_bound(t: &DiscreteTriple, q_s_given_z: &CondPmf) -> Result<f64> {
    let (ns, nz) = (t.n_s(), t.n_z());
    ensure_dim(nz, q_s_given_z.n_conditions())?;
    ensure_dim(ns, q_s_given_z.n_outcomes())?;
    let q = q_s_given_z.table();
    let psz = t.p_sz();
    let mut expected_log = 0.0;
    for ((s, z), p) in psz.indexed_iter() {
        if *p <= ZERO_MASS {
            continue;
        }
        let qv = q[[z, s]];
        if qv <= 0.0 {
            return Err(Error::validation(format!(
                "q(s={s}|z={z}) is zero where P is positive"
            )));
        }
        expected_log += p * qv.ln();
    }
    Ok(expected_log + entropy_of(&t.p_s()))
}

/// Donsker–Varadhan value mean(T_joint) − log mean(exp(T_marginal)).
pub fn dv_value(t_joint: &[f64], t_marginal: &[f64]) -> Result<f64> {
    if t_joint.is_empty() || t_marginal.is_empty() {
        return Err(Error::validation("critic outputs must be non-empty"));
    }
    let mean_joint = t_joint.iter().sum::<f64>() / t_joint.len() as f64;
    Ok(mean_joint - log_mean_exp(t_marginal))
}

/// log(mean(exp(v))) with max subtraction.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = v.iter().map(|t| (t - max).exp()).sum();
    max + (sum / v.len() as f64).ln()
}

// ---------------------------------------------------------------------------
// Randomized oracle checks
// ---------------------------------------------------------------------------

/// Random conditional table with `rows` rows over `cols` outcomes. With
/// `sparse`, entries are zeroed with probability 1/4 (each row keeps at
/// least one positive entry).
pub fn random_cond_pmf<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, sparse: bool) -> CondPmf {
    let mut t = Array2::zeros((rows, cols));
    for mut row in t.rows_mut() {
        for v in row.iter_mut() {
            *v = if sparse && rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.01..1.0) };
        }
        if row.sum() == 0.0 {
            row[rng.random_range(0..cols)] = 1.0;
        }
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    CondPmf::new(t).expect("rows are normalized")
}

/// Random triple with every alphabet size drawn from `1..=max_card`.
pub fn random_triple<R: Rng + ?Sized>(rng: &mut R, max_card: usize) -> DiscreteTriple {
    let max_card = max_card.max(1);
    let (ns, nx, nz) = (
        rng.random_range(1..=max_card),
        rng.random_range(1..=max_card),
        rng.random_range(1..=max_card),
    );
    let flat = random_cond_pmf(rng, 1, ns * nx, true);
    let joint = flat.table().clone().into_shape_with_order((ns, nx)).expect("same size");
    let channel = random_cond_pmf(rng, nx, nz, true);
    DiscreteTriple::new(joint, channel.table().clone()).expect("valid by construction")
}

/// Worst violations found by [`oracle_checks`], all in nats.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub trials: usize,
    /// max |I(S;Z) − (I(X;Z) − H(X|S) + H(X|S,Z))|
    pub decomposition: f64,
    /// max |lhs − rhs| of the complexity identity over random q_z
    pub complexity: f64,
    /// max amount by which a bound lands on the wrong side of I(S;Z)
    pub sandwich: f64,
    /// max gap between either bound and I(S;Z) at the optimal variational tables
    pub tightness: f64,
}

/// Runs every exact identity and bound check on `trials` random triples
/// with alphabets of size at most 5.
pub fn oracle_checks(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = OracleReport { trials, ..Default::default() };
    for _ in 0..trials {
        let t = random_triple(&mut rng, 5);
        let d = exact_decomposition(&t);
        r.decomposition = r.decomposition.max(d.identity_violation());

        let q_z = Pmf::new(random_cond_pmf(&mut rng, 1, t.n_z(), false).table().row(0).to_vec())?;
        let (lhs, rhs) = complexity_identity_check(&t, &q_z)?;
        r.complexity = r.complexity.max((lhs - rhs).abs());

        let q_x = random_cond_pmf(&mut rng, t.n_s() * t.n_z(), t.n_x(), false);
        let q_s = random_cond_pmf(&mut rng, t.n_z(), t.n_s(), false);
        let upper = leakage_upper_bound(&t, &q_z, &q_x)?;
        let lower = leakage_lower_bound(&t, &q_s)?;
        r.sandwich = r.sandwich.max(lower - d.i_sz).max(d.i_sz - upper);

        let p_z = Pmf::from_weights(&t.p_z())?;
        let tight_upper = leakage_upper_bound(&t, &p_z, &t.posterior_x_given_sz())?;
        let tight_lower = leakage_lower_bound(&t, &t.posterior_s_given_z())?;
        r.tightness = r
            .tightness
            .max((tight_upper - d.i_sz).abs())
            .max((tight_lower - d.i_sz).abs());
    }
    Ok(r)
}
