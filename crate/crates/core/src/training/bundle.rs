//! Saved model directories.
//!
//! A bundle directory holds `metadata.json` and one `.pfw` file per network.
//! A `.pfw` file is little-endian throughout:
//!
//! ```text
//! b"PFW1"  u32 tensor_count
//! per tensor: u32 ndim, ndim × u32 dims, prod(dims) × f32 values
//! ```
//!
//! Tensors appear in the network's parameter visit order (per layer: weight
//! `in × out`, then bias).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelKind, Networks, TrainConfig};
use crate::data::{DataShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{
    inject_latent_noise, one_hot, reparameterize_batch, standard_normal, PriorMode,
};
use crate::nn::{sigmoid, Params};
use crate::objectives::DisMode;

pub const WEIGHT_MAGIC: &[u8; 4] = b"PFW1";
const METADATA_FILE: &str = "metadata.json";

/// Everything needed to rebuild the networks before loading weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelKind,
    pub input_dim: usize,
    pub shape: DataShape,
    pub latent_dim: usize,
    pub classes: usize,
    pub hidden_widths: Vec<usize>,
    pub disc_hidden_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub prior_mode: PriorMode,
    pub dis_mode: DisMode,
    pub noise_enabled: bool,
}

impl Architecture {
    pub fn from_config(cfg: &TrainConfig, ds: &LabeledDataset) -> Self {
        Architecture {
            model: cfg.model,
            input_dim: ds.features.ncols(),
            shape: ds.shape.clone(),
            latent_dim: cfg.latent_dim,
            classes: ds.sensitive_classes,
            hidden_widths: cfg.hidden_widths.clone(),
            disc_hidden_widths: cfg.disc_hidden_widths.clone(),
            dropout_rate: cfg.dropout_rate,
            prior_mode: cfg.prior_mode,
            dis_mode: cfg.dis_mode,
            noise_enabled: cfg.noise_enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub dataset_name: String,
    pub sensitive_attribute: String,
    /// Final α of the schedule.
    pub alpha: f64,
    pub latent_dim: usize,
    pub backbone: String,
    pub loss_function: String,
    pub backbone_trained_dataset: String,
    pub model_kind: String,
    pub seed: u64,
    pub created_at: String,
}

/// RFC 3339 timestamp, taken from `SOURCE_DATE_EPOCH` when set so that
/// rebuilt bundles are byte-identical.
fn timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse::<i64>().ok());
    let t = match secs.and_then(|s| chrono::DateTime::from_timestamp(s, 0)) {
        Some(t) => t,
        None => chrono::Utc::now(),
    };
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl BundleMetadata {
    pub fn from_config(cfg: &TrainConfig, ds: &LabeledDataset) -> Self {
        let loss = match cfg.dis_mode {
            DisMode::Bernoulli => "bernoulli",
            DisMode::Mse => "mse",
        };
        BundleMetadata {
            dataset_name: if ds.name.is_empty() {
                "unnamed".into()
            } else {
                ds.name.clone()
            },
            sensitive_attribute: if ds.sensitive_name.is_empty() {
                "s".into()
            } else {
                ds.sensitive_name.clone()
            },
            alpha: cfg.alpha_end,
            latent_dim: cfg.latent_dim,
            backbone: "none".into(),
            loss_function: loss.into(),
            backbone_trained_dataset: "none".into(),
            model_kind: cfg.model.name().into(),
            seed: cfg.seed,
            created_at: timestamp(),
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("dataset_name", &self.dataset_name),
            ("sensitive_attribute", &self.sensitive_attribute),
            ("backbone", &self.backbone),
            ("loss_function", &self.loss_function),
            ("backbone_trained_dataset", &self.backbone_trained_dataset),
            ("model_kind", &self.model_kind),
            ("created_at", &self.created_at),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::validation(format!("metadata field {name} is empty")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MetadataFile {
    #[serde(flatten)]
    metadata: BundleMetadata,
    architecture: Architecture,
}

/// Trained networks plus the metadata that identifies them.
#[derive(Debug, Clone)]
pub struct ModuleBundle {
    pub networks: Networks,
    pub architecture: Architecture,
    pub metadata: BundleMetadata,
}

fn encode_weights(p: &dyn Params<f32>) -> Vec<u8> {
    let mut tensors: Vec<(Vec<usize>, Vec<f32>)> = Vec::new();
    p.visit_tensors(&mut |shape, values| tensors.push((shape.to_vec(), values.to_vec())));
    let mut out = WEIGHT_MAGIC.to_vec();
    out.extend((tensors.len() as u32).to_le_bytes());
    for (shape, values) in tensors {
        out.extend((shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend((d as u32).to_le_bytes());
        }
        for v in values {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        self.pos = end;
        Ok(chunk)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

fn decode_weights(bytes: &[u8]) -> std::result::Result<Vec<(Vec<usize>, Vec<f32>)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHT_MAGIC {
        return Err("bad magic".into());
    }
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let ndim = r.u32()?;
        let shape = (0..ndim)
            .map(|_| r.u32())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((shape, values));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(tensors)
}

impl ModuleBundle {
    pub fn new(networks: Networks, architecture: Architecture, metadata: BundleMetadata) -> Self {
        ModuleBundle {
            networks,
            architecture,
            metadata,
        }
    }

    /// `(file name, bytes)` for every network present in the model.
    pub fn weight_files(&self) -> Vec<(String, Vec<u8>)> {
        let n = &self.networks;
        let mut files: Vec<(&str, &dyn Params<f32>)> =
            vec![("encoder", &n.encoder), ("utility_decoder", &n.decoder)];
        if let Some(c) = &n.classifier {
            files.push(("classifier", c));
        }
        if let Some(f) = &n.film {
            files.push(("film_generator", f));
        }
        files.push(("prior_generator", &n.prior));
        files.push(("latent_disc", &n.d_eta));
        files.push(("utility_disc", &n.d_omega));
        if let Some(d) = &n.d_tau {
            files.push(("sensitive_disc", d));
        }
        files
            .into_iter()
            .map(|(name, p)| (format!("{name}.pfw"), encode_weights(p)))
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.networks.encoder.latent_dim()
    }

    fn to_data_space(&self, out: Array2<f32>) -> Array2<f32> {
        match self.architecture.dis_mode {
            DisMode::Bernoulli => out.mapv(sigmoid),
            DisMode::Mse => out,
        }
    }

    /// Posterior means `E[Z | x]` (eval mode, no sampling).
    pub fn encode_mean(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        Ok(self.networks.encoder.forward(x)?.mean)
    }

    /// Released representation: a reparameterized posterior sample, plus the
    /// latent noise when the model was trained with it.
    pub fn release(&self, x: &Array2<f32>, seed: u64) -> Result<Array2<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self.networks.encoder.forward(x)?;
        let eps = standard_normal(x.nrows(), self.latent_dim(), &mut rng);
        let mut z = reparameterize_batch(&g, &eps)?;
        inject_latent_noise(&mut z, self.architecture.noise_enabled, &mut rng);
        Ok(z)
    }

    /// Utility reconstruction `g_θ(z)` in data space.
    pub fn decode(&self, z: &Array2<f32>) -> Result<Array2<f32>> {
        Ok(self.to_data_space(self.networks.decoder.forward(z)?))
    }

    /// Draws `n` latent codes from the (learned or standard) prior.
    pub fn sample_prior(&self, n: usize, seed: u64) -> Result<Array2<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.latent_dim();
        let noise = standard_normal(n, d, &mut rng);
        let eps = standard_normal(n, d, &mut rng);
        Ok(self.networks.prior.sample_prior(&noise, &eps)?.1)
    }

    /// GenPF: synthetic samples conditioned on sensitive labels `s`.
    pub fn generate(&self, s: &[usize], seed: u64) -> Result<Array2<f32>> {
        let film = self
            .networks
            .film
            .as_ref()
            .ok_or_else(|| Error::validation("conditional generation needs a genpf bundle"))?;
        let z = self.sample_prior(s.len(), seed)?;
        Ok(self.to_data_space(film.forward(&z, &one_hot(s, film.classes())?)?))
    }

    /// GenPF: conditional generations from given latent codes.
    pub fn generate_from(&self, z: &Array2<f32>, s: &[usize]) -> Result<Array2<f32>> {
        let film = self
            .networks
            .film
            .as_ref()
            .ok_or_else(|| Error::validation("conditional generation needs a genpf bundle"))?;
        Ok(self.to_data_space(film.forward(z, &one_hot(s, film.classes())?)?))
    }

    /// Seed for an evaluation that should not reuse the training streams.
    pub fn eval_seed(&self) -> u64 {
        ChaCha8Rng::seed_from_u64(self.metadata.seed ^ 0xe7a1).random()
    }
}

pub fn save_bundle(b: &ModuleBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    b.metadata.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = MetadataFile {
        metadata: b.metadata.clone(),
        architecture: b.architecture.clone(),
    };
    // round-trip through Value so keys come out sorted
    let value = serde_json::to_value(&file)?;
    let text = serde_json::to_string_pretty(&value)?;
    let path = dir.join(METADATA_FILE);
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    for (name, bytes) in b.weight_files() {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ModuleBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join(METADATA_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let file: MetadataFile =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    file.metadata.validate()?;
    let arch = file.architecture;
    if arch.latent_dim != file.metadata.latent_dim {
        return Err(Error::format(
            &meta_path,
            "latent_dim disagrees with architecture",
        ));
    }
    let mut nets = Networks::new(&arch, file.metadata.seed)?;
    let template = ModuleBundle::new(nets.clone(), arch.clone(), file.metadata.clone());
    let names: Vec<String> = template
        .weight_files()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut groups: BTreeMap<&str, &mut dyn Params<f32>> = BTreeMap::new();
    groups.insert("encoder.pfw", &mut nets.encoder);
    groups.insert("utility_decoder.pfw", &mut nets.decoder);
    if let Some(c) = nets.classifier.as_mut() {
        groups.insert("classifier.pfw", c);
    }
    if let Some(f) = nets.film.as_mut() {
        groups.insert("film_generator.pfw", f);
    }
    groups.insert("prior_generator.pfw", &mut nets.prior);
    groups.insert("latent_disc.pfw", &mut nets.d_eta);
    groups.insert("utility_disc.pfw", &mut nets.d_omega);
    if let Some(d) = nets.d_tau.as_mut() {
        groups.insert("sensitive_disc.pfw", d);
    }
    for name in &names {
        let path: PathBuf = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let tensors = decode_weights(&bytes).map_err(|r| Error::format(&path, r))?;
        let p = groups
            .get_mut(name.as_str())
            .expect("every weight file has a network");
        p.load_tensors(&mut tensors.into_iter())
            .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    Ok(ModuleBundle {
        networks: nets,
        architecture: arch,
        metadata: file.metadata,
    })
}
