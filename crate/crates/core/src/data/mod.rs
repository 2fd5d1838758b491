//! Dataset construction and ingestion.
//!
//! Colored digits are the desk-scale stand-in for the image experiments:
//! every grayscale digit is tinted by a color drawn from a configurable pmf,
//! and either the color or the digit is declared sensitive. Embedding files
//! (PFEMB1) cover the embedding-based scenario.

pub mod glyphs;
pub mod idx;

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infotheory::Pmf;

pub use idx::{load_idx_images, load_idx_labels, IdxImages};

/// Attenuation applied to the two channels that do not carry the tint.
pub const TINT_ATTENUATION: f32 = 0.15;

pub const COLOR_NAMES: [&str; 3] = ["red", "green", "blue"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataShape {
    Vector {
        dim: usize,
    },
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl DataShape {
    pub fn flat_dim(&self) -> usize {
        match *self {
            DataShape::Vector { dim } => dim,
            DataShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    /// Interleaved values per pixel; 1 for vectors.
    pub fn channels(&self) -> usize {
        match *self {
            DataShape::Vector { .. } => 1,
            DataShape::Image { channels, .. } => channels,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, DataShape::Image { .. })
    }
}

/// Features with a categorical sensitive label and optional identity labels.
/// Image features are stored flattened in height × width × channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub features: Array2<f32>,
    pub shape: DataShape,
    pub sensitive: Vec<u16>,
    pub sensitive_classes: usize,
    pub sensitive_name: String,
    pub identity: Option<Vec<u32>>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        features: Array2<f32>,
        shape: DataShape,
        sensitive: Vec<u16>,
        sensitive_classes: usize,
        sensitive_name: impl Into<String>,
        identity: Option<Vec<u32>>,
    ) -> Result<Self> {
        let ds = LabeledDataset {
            name: name.into(),
            features,
            shape,
            sensitive,
            sensitive_classes,
            sensitive_name: sensitive_name.into(),
            identity,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.features.ncols() != self.shape.flat_dim() {
            return Err(Error::validation(format!(
                "feature width {} does not match shape {:?}",
                self.features.ncols(),
                self.shape
            )));
        }
        if self.sensitive.len() != n {
            return Err(Error::validation(
                "sensitive label count differs from row count",
            ));
        }
        if let Some(id) = &self.identity {
            if id.len() != n {
                return Err(Error::validation(
                    "identity label count differs from row count",
                ));
            }
        }
        if self.sensitive_classes == 0 {
            return Err(Error::validation(
                "sensitive attribute needs at least one class",
            ));
        }
        if let Some(s) = self
            .sensitive
            .iter()
            .find(|s| **s as usize >= self.sensitive_classes)
        {
            return Err(Error::validation(format!(
                "sensitive label {s} outside [0, {})",
                self.sensitive_classes
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("features contain non-finite values"));
        }
        if self.shape.is_image() && self.features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("image values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sensitive_usize(&self) -> Vec<usize> {
        self.sensitive.iter().map(|&s| s as usize).collect()
    }

    /// Number of distinct identity classes (max label + 1).
    pub fn identity_classes(&self) -> Option<usize> {
        self.identity
            .as_ref()
            .map(|ids| ids.iter().copied().max().map_or(0, |m| m as usize + 1))
    }

    /// A new dataset holding rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let d = self.features.ncols();
        let mut features = Array2::zeros((indices.len(), d));
        for (row, &i) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(i));
        }
        LabeledDataset {
            name: self.name.clone(),
            features,
            shape: self.shape,
            sensitive: indices.iter().map(|&i| self.sensitive[i]).collect(),
            sensitive_classes: self.sensitive_classes,
            sensitive_name: self.sensitive_name.clone(),
            identity: self
                .identity
                .as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitiveAttribute {
    Color,
    Digit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DigitSource {
    SyntheticGlyphs,
    IdxFiles { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredDigitConfig {
    pub n: usize,
    pub color_pmf: Pmf,
    pub sensitive: SensitiveAttribute,
    pub source: DigitSource,
    pub seed: u64,
}

impl ColoredDigitConfig {
    /// `n` synthetic glyphs with uniformly distributed colors, color sensitive.
    pub fn balanced(n: usize, seed: u64) -> Self {
        ColoredDigitConfig {
            n,
            color_pmf: Pmf::uniform(3).expect("three colors"),
            sensitive: SensitiveAttribute::Color,
            source: DigitSource::SyntheticGlyphs,
            seed,
        }
    }
}

fn sample_categorical<R: Rng + ?Sized>(pmf: &Pmf, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pmf.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in rounding slack above the cumulative sum: last positive entry.
    pmf.probs().iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Tints a grayscale image into HWC RGB: the selected channel keeps the
/// intensity, the others are attenuated.
pub fn tint(gray: &[f32], color: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(gray.len() * 3);
    for &g in gray {
        for ch in 0..3 {
            out.push(if ch == color { g } else { g * TINT_ATTENUATION });
        }
    }
    out
}

/// Colored-digit dataset: digits tinted red/green/blue with colors drawn
/// i.i.d. from `color_pmf`. Identity labels always carry the digit.
pub fn generate_colored_digits(cfg: &ColoredDigitConfig) -> Result<LabeledDataset> {
    if cfg.n == 0 {
        return Err(Error::validation("n must be at least 1"));
    }
    if cfg.color_pmf.len() != 3 {
        return Err(Error::validation(
            "color pmf must have 3 entries (red, green, blue)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source = match &cfg.source {
        DigitSource::SyntheticGlyphs => None,
        DigitSource::IdxFiles { images, labels } => {
            let imgs = load_idx_images(images)?;
            let labs = load_idx_labels(labels)?;
            if imgs.is_empty() || imgs.len() != labs.len() {
                return Err(Error::validation(
                    "IDX images and labels must be non-empty and equal in count",
                ));
            }
            if (imgs.rows, imgs.cols) != (glyphs::GLYPH_SIZE, glyphs::GLYPH_SIZE) {
                return Err(Error::validation("IDX images must be 28×28"));
            }
            Some((imgs, labs))
        }
    };

    let size = glyphs::GLYPH_SIZE;
    let mut features = Array2::zeros((cfg.n, size * size * 3));
    let mut sensitive = Vec::with_capacity(cfg.n);
    let mut identity = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (gray, digit) = match &source {
            None => {
                let digit = rng.random_range(0..10u8);
                (glyphs::render_digit(digit, &mut rng), digit)
            }
            Some((imgs, labs)) => {
                let j = i % imgs.len();
                (imgs.pixels[j].clone(), labs[j])
            }
        };
        let color = sample_categorical(&cfg.color_pmf, &mut rng);
        let rgb = tint(&gray, color);
        features.row_mut(i).assign(&ndarray::ArrayView1::from(&rgb));
        sensitive.push(match cfg.sensitive {
            SensitiveAttribute::Color => color as u16,
            SensitiveAttribute::Digit => digit as u16,
        });
        identity.push(digit as u32);
    }
    let (classes, name) = match cfg.sensitive {
        SensitiveAttribute::Color => (3, "color"),
        SensitiveAttribute::Digit => (10, "digit"),
    };
    LabeledDataset::new(
        "colored-digits",
        features,
        DataShape::Image {
            height: size,
            width: size,
            channels: 3,
        },
        sensitive,
        classes,
        name,
        Some(identity),
    )
}

/// Recovers color labels from rendered colored digits: the channel with the
/// most ink.
pub fn dominant_channel(image_hwc: &[f32]) -> usize {
    let mut sums = [0.0f64; 3];
    for (i, v) in image_hwc.iter().enumerate() {
        sums[i % 3] += *v as f64;
    }
    (0..3)
        .max_by(|a, b| sums[*a].total_cmp(&sums[*b]))
        .expect("three channels")
}

/// Synthetic face-embedding stand-in: identities are clusters on the unit
/// sphere, each identity belongs to one sensitive group, and group membership
/// shifts the cluster center along a group direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbeddingConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub dim: usize,
    pub group_pmf: Pmf,
    /// Length of the group offset relative to the unit identity center.
    pub group_strength: f64,
    /// Per-coordinate standard deviation of within-identity noise.
    pub noise: f64,
    pub seed: u64,
}

pub fn generate_identity_embeddings(cfg: &IdentityEmbeddingConfig) -> Result<LabeledDataset> {
    if cfg.n_identities < 2 || cfg.samples_per_identity == 0 || cfg.dim == 0 {
        return Err(Error::validation(
            "need ≥ 2 identities, ≥ 1 sample each and dim ≥ 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gauss = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };
    let normalize = |v: &mut Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
    };
    let groups = cfg.group_pmf.len();
    let group_dirs: Vec<Vec<f64>> = (0..groups)
        .map(|_| {
            let mut v = gauss(cfg.dim, &mut rng);
            normalize(&mut v);
            v
        })
        .collect();
    let n = cfg.n_identities * cfg.samples_per_identity;
    let mut features = Array2::zeros((n, cfg.dim));
    let mut sensitive = Vec::with_capacity(n);
    let mut identity = Vec::with_capacity(n);
    for id in 0..cfg.n_identities {
        let group = sample_categorical(&cfg.group_pmf, &mut rng);
        let mut center = gauss(cfg.dim, &mut rng);
        normalize(&mut center);
        center
            .iter_mut()
            .zip(&group_dirs[group])
            .for_each(|(c, g)| *c += cfg.group_strength * g);
        for k in 0..cfg.samples_per_identity {
            let row = id * cfg.samples_per_identity + k;
            let noise = gauss(cfg.dim, &mut rng);
            let mut v: Vec<f64> = center
                .iter()
                .zip(&noise)
                .map(|(c, e)| c + cfg.noise * e)
                .collect();
            normalize(&mut v);
            for (j, x) in v.iter().enumerate() {
                features[[row, j]] = *x as f32;
            }
            sensitive.push(group as u16);
            identity.push(id as u32);
        }
    }
    LabeledDataset::new(
        "identity-embeddings",
        features,
        DataShape::Vector { dim: cfg.dim },
        sensitive,
        groups,
        "group",
        Some(identity),
    )
}

/// Paired samples from a bivariate standard normal with correlation `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPairs {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub rho: f64,
    /// −½ ln(1 − ρ²) nats.
    pub analytic_mi: f64,
}

pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

pub fn sample_correlated_gaussians(rho: f64, n: usize, seed: u64) -> Result<GaussianPairs> {
    if !(rho.abs() < 1.0) {
        return Err(Error::validation(format!("|rho| must be < 1, got {rho}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1.0 - rho * rho).sqrt();
    let mut x = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        x[[i, 0]] = a;
        y[[i, 0]] = rho * a + scale * b;
    }
    Ok(GaussianPairs {
        x,
        y,
        rho,
        analytic_mi: gaussian_mi(rho),
    })
}

/// Seeded split into disjoint parts whose sizes follow `fractions` exactly
/// (largest remainder) and whose sensitive-label mix is approximately
/// preserved in every part.
pub fn split(ds: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
    Ok(split_indices(&ds.sensitive_usize(), fractions, seed)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect())
}

/// Index form of [`split`], stratified on `labels`.
pub fn split_indices(labels: &[usize], fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::validation("fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "fractions sum to {total}, not 1"
        )));
    }
    let n = labels.len();
    let sizes = largest_remainder(n, fractions);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    // Each member gets a key spread evenly over [0, 1) within its class, so
    // any prefix of the sorted order holds a proportional share of every class.
    let mut keyed: Vec<(f64, f64, usize)> = Vec::with_capacity(n);
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let m = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            keyed.push(((rank as f64 + rng.random::<f64>()) / m, rng.random(), i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let mut part: Vec<usize> = keyed[start..start + size].iter().map(|k| k.2).collect();
        part.sort_unstable();
        out.push(part);
        start += size;
    }
    Ok(out)
}

fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let mut missing = n - sizes.iter().sum::<usize>();
    for i in order.into_iter().cycle() {
        if missing == 0 {
            break;
        }
        sizes[i] += 1;
        missing -= 1;
    }
    sizes
}

// ---------------------------------------------------------------------------
// PFEMB1 embedding files
// ---------------------------------------------------------------------------

/// First 16 bytes of every embedding file: ASCII `PFEMB1`, zero padded.
pub const PFEMB_MAGIC: [u8; 16] = *b"PFEMB1\0\0\0\0\0\0\0\0\0\0";

/// Serializes features, sensitive labels and optional identities:
/// 16-byte magic, little-endian u32 `n`, `d`, `has_identity`, then `n·d`
/// f32 features row-major, `n` u16 sensitive labels, optional `n` u32 identities.
pub fn encode_embeddings(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let (n, d) = ds.features.dim();
    if ds.sensitive.len() != n {
        return Err(Error::validation(
            "sensitive label count differs from row count",
        ));
    }
    let mut out = Vec::with_capacity(28 + n * d * 4 + n * 6);
    out.extend(PFEMB_MAGIC);
    out.extend((n as u32).to_le_bytes());
    out.extend((d as u32).to_le_bytes());
    out.extend((ds.identity.is_some() as u32).to_le_bytes());
    for v in ds.features.iter() {
        out.extend(v.to_le_bytes());
    }
    for s in &ds.sensitive {
        out.extend(s.to_le_bytes());
    }
    if let Some(ids) = &ds.identity {
        for id in ids {
            out.extend(id.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_embeddings(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embeddings(ds)?).map_err(|e| Error::io(path, e))
}

/// Loads a PFEMB1 file as a vector dataset; the class count is the largest
/// sensitive label plus one.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes).map_err(|reason| Error::format(path, reason))
}

pub fn decode_embeddings(bytes: &[u8]) -> std::result::Result<LabeledDataset, String> {
    if bytes.len() < 28 || bytes[..16] != PFEMB_MAGIC {
        return Err("bad header: expected PFEMB1 magic".into());
    }
    let u32_at = |o: usize| {
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
    };
    let (n, d, has_identity) = (u32_at(16), u32_at(20), u32_at(24));
    if has_identity > 1 {
        return Err(format!(
            "has_identity flag must be 0 or 1, found {has_identity}"
        ));
    }
    let expected = 28 + n * d * 4 + n * 2 + has_identity * n * 4;
    if bytes.len() != expected {
        return Err(format!(
            "expected {expected} bytes for n={n}, d={d}, found {}",
            bytes.len()
        ));
    }
    let mut off = 28;
    let feats: Vec<f32> = bytes[off..off + n * d * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    off += n * d * 4;
    let sensitive: Vec<u16> = bytes[off..off + n * 2]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    off += n * 2;
    let identity = (has_identity == 1).then(|| {
        bytes[off..off + n * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    });
    let classes = sensitive
        .iter()
        .copied()
        .max()
        .map_or(1, |m| m as usize + 1);
    let features = Array2::from_shape_vec((n, d), feats).map_err(|e| e.to_string())?;
    LabeledDataset::new(
        "embeddings",
        features,
        DataShape::Vector { dim: d },
        sensitive,
        classes,
        "sensitive",
        identity,
    )
    .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

pub const MANIFEST_FILE: &str = "dataset.json";
pub const TRAIN_FILE: &str = "train.pfemb";
pub const TEST_FILE: &str = "test.pfemb";

/// Sidecar describing a dataset directory written by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub shape: DataShape,
    pub sensitive_name: String,
    pub sensitive_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
}

/// Writes `train.pfemb`, `test.pfemb` and `dataset.json` into `dir`.
pub fn save_dataset_dir(
    train: &LabeledDataset,
    test: &LabeledDataset,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        name: train.name.clone(),
        shape: train.shape,
        sensitive_name: train.sensitive_name.clone(),
        sensitive_classes: train.sensitive_classes,
        class_names: if train.sensitive_name == "color" {
            COLOR_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            Vec::new()
        },
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    save_embeddings(train, dir.join(TRAIN_FILE))?;
    save_embeddings(test, dir.join(TEST_FILE))
}

fn apply_manifest(mut ds: LabeledDataset, m: &DatasetManifest) -> Result<LabeledDataset> {
    ds.name = m.name.clone();
    ds.shape = m.shape;
    ds.sensitive_name = m.sensitive_name.clone();
    ds.sensitive_classes = m.sensitive_classes.max(ds.sensitive_classes);
    ds.validate()?;
    Ok(ds)
}

/// Loads `(train, test)` from a dataset directory, or from a single PFEMB1
/// file split 70/30 under `seed`.
pub fn load_dataset(path: impl AsRef<Path>, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let path = path.as_ref();
    if path.is_dir() {
        let mpath = path.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let train = apply_manifest(load_embeddings(path.join(TRAIN_FILE))?, &manifest)?;
        let test = apply_manifest(load_embeddings(path.join(TEST_FILE))?, &manifest)?;
        return Ok((train, test));
    }
    let ds = load_embeddings(path)?;
    let mut parts = split(&ds, &[0.7, 0.3], seed)?;
    let test = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infotheory::{shannon_entropy, LogBase};

    fn color_freqs(ds: &LabeledDataset) -> Vec<f64> {
        let mut counts = [0usize; 3];
        ds.sensitive.iter().for_each(|s| counts[*s as usize] += 1);
        counts.iter().map(|c| *c as f64 / ds.len() as f64).collect()
    }

    #[test]
    fn colored_digit_frequencies_follow_pmf() {
        let pmf = Pmf::new(vec![0.5, 1.0 / 6.0, 1.0 / 3.0]).unwrap();
        let cfg = ColoredDigitConfig {
            color_pmf: pmf.clone(),
            ..ColoredDigitConfig::balanced(6000, 11)
        };
        let ds = generate_colored_digits(&cfg).unwrap();
        for (f, p) in color_freqs(&ds).iter().zip(pmf.probs()) {
            assert!((f - p).abs() < 0.02, "{f} vs {p}");
        }
    }

    #[test]
    fn balanced_colors_have_max_entropy() {
        let ds = generate_colored_digits(&ColoredDigitConfig::balanced(6000, 3)).unwrap();
        let h = shannon_entropy(&Pmf::new(color_freqs(&ds)).unwrap(), LogBase::Two);
        assert!((h - 3f64.log2()).abs() < 0.02, "{h}");
    }

    #[test]
    fn degenerate_pmf_gives_all_red() {
        let cfg = ColoredDigitConfig {
            color_pmf: Pmf::new(vec![1.0, 0.0, 0.0]).unwrap(),
            ..ColoredDigitConfig::balanced(200, 2)
        };
        let ds = generate_colored_digits(&cfg).unwrap();
        assert!(ds.sensitive.iter().all(|s| *s == 0));
        for row in ds.features.rows() {
            assert_eq!(dominant_channel(row.as_slice().unwrap()), 0);
        }
    }

    #[test]
    fn tint_matches_labels_and_is_deterministic() {
        let cfg = ColoredDigitConfig::balanced(300, 8);
        let a = generate_colored_digits(&cfg).unwrap();
        assert_eq!(a, generate_colored_digits(&cfg).unwrap());
        for (row, s) in a.features.rows().into_iter().zip(&a.sensitive) {
            assert_eq!(dominant_channel(row.as_slice().unwrap()), *s as usize);
        }
        let digit = generate_colored_digits(&ColoredDigitConfig {
            sensitive: SensitiveAttribute::Digit,
            ..cfg
        })
        .unwrap();
        assert_eq!(digit.sensitive_classes, 10);
        assert_eq!(
            digit
                .sensitive
                .iter()
                .map(|&s| s as u32)
                .collect::<Vec<_>>(),
            digit.identity.clone().unwrap()
        );
    }

    #[test]
    fn missing_idx_source_is_an_error() {
        let cfg = ColoredDigitConfig {
            source: DigitSource::IdxFiles {
                images: "/nonexistent/images.idx".into(),
                labels: "/nonexistent/labels.idx".into(),
            },
            ..ColoredDigitConfig::balanced(10, 0)
        };
        assert!(matches!(
            generate_colored_digits(&cfg),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn idx_source_is_tinted() {
        let dir = tempfile::tempdir().unwrap();
        let images = IdxImages {
            rows: 28,
            cols: 28,
            pixels: vec![vec![1.0; 784], vec![0.5; 784]],
        };
        idx::save_idx_images(&images, dir.path().join("i.idx")).unwrap();
        idx::save_idx_labels(&[3, 7], dir.path().join("l.idx")).unwrap();
        let cfg = ColoredDigitConfig {
            source: DigitSource::IdxFiles {
                images: dir.path().join("i.idx"),
                labels: dir.path().join("l.idx"),
            },
            ..ColoredDigitConfig::balanced(4, 0)
        };
        let ds = generate_colored_digits(&cfg).unwrap();
        assert_eq!(ds.identity.unwrap(), vec![3, 7, 3, 7]);
    }

    #[test]
    fn gaussian_pairs_moments() {
        assert_eq!(gaussian_mi(0.0), 0.0);
        assert!((gaussian_mi(0.9) - 0.830_366).abs() < 1e-6);
        assert!(sample_correlated_gaussians(1.0, 10, 0).is_err());
        let g = sample_correlated_gaussians(0.9, 100_000, 4).unwrap();
        let n = g.x.nrows() as f64;
        let (mx, my) = (g.x.sum() / n, g.y.sum() / n);
        let vx = g.x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = g.y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cov =
            g.x.iter()
                .zip(g.y.iter())
                .map(|(a, b)| (a - mx) * (b - my))
                .sum::<f64>()
                / n;
        assert!(mx.abs() < 0.02 && my.abs() < 0.02);
        assert!((vx - 1.0).abs() < 0.02 && (vy - 1.0).abs() < 0.02);
        assert!((cov / (vx * vy).sqrt() - 0.9).abs() < 0.01);
    }

    #[test]
    fn split_sizes_and_coverage() {
        let ds = generate_colored_digits(&ColoredDigitConfig::balanced(1000, 1)).unwrap();
        let parts = split_indices(&ds.sensitive_usize(), &[0.8, 0.2], 5).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (800, 200));
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(
            parts,
            split_indices(&ds.sensitive_usize(), &[0.8, 0.2], 5).unwrap()
        );
        // stratification: class shares within a few points of the whole
        let whole = color_freqs(&ds);
        let small = color_freqs(&ds.subset(&parts[1]));
        for (a, b) in whole.iter().zip(&small) {
            assert!((a - b).abs() < 0.02);
        }
        assert!(split_indices(&[0, 1], &[0.5, 0.4], 0).is_err());
        assert!(split_indices(&[0, 1], &[1.5, -0.5], 0).is_err());
    }

    #[test]
    fn embeddings_round_trip_bit_exact() {
        let cfg = IdentityEmbeddingConfig {
            n_identities: 5,
            samples_per_identity: 3,
            dim: 512,
            group_pmf: Pmf::uniform(2).unwrap(),
            group_strength: 0.5,
            noise: 0.1,
            seed: 3,
        };
        let ds = generate_identity_embeddings(&cfg).unwrap();
        let bytes = encode_embeddings(&ds).unwrap();
        let back = decode_embeddings(&bytes).unwrap();
        assert_eq!(back.features.dim(), (15, 512));
        assert_eq!(encode_embeddings(&back).unwrap(), bytes);
        assert_eq!(back.identity, ds.identity);
        assert_eq!(back.sensitive, ds.sensitive);
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let ds = generate_colored_digits(&ColoredDigitConfig::balanced(2, 0)).unwrap();
        let mut bytes = encode_embeddings(&ds).unwrap();
        bytes[0] = b'X';
        assert!(decode_embeddings(&bytes).unwrap_err().contains("header"));
        let mut short = encode_embeddings(&ds).unwrap();
        short.pop();
        assert!(decode_embeddings(&short).is_err());
    }
}
