//! Config-file merging. A config file is a JSON object whose keys are flag
//! names with dashes replaced by underscores; flags given on the command line
//! win over file values, and file values win over built-in defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

pub fn read_config_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::usage(format!(
            "config {} must hold a JSON object",
            path.display()
        ))),
        Err(e) => Err(CliError::usage(format!("config {}: {e}", path.display()))),
    }
}

/// Overlays `flags` (only the options actually given) on `file` and
/// deserializes the result, falling back to `C::default()` per field.
pub fn resolve<C, F>(file: &Map<String, Value>, flags: &F) -> Result<C, CliError>
where
    C: DeserializeOwned + Serialize + Default,
    F: Serialize,
{
    let mut merged = file.clone();
    match serde_json::to_value(flags).map_err(|e| CliError::usage(e.to_string()))? {
        Value::Object(m) => merged.extend(m),
        other => unreachable!("flags serialize to an object, got {other}"),
    }
    let known: BTreeSet<String> = match serde_json::to_value(C::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    };
    for key in file.keys().filter(|k| !known.contains(*k)) {
        warn!("config key `{key}` does not apply to this command; ignored");
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(format!("config: {e}")))
}

/// The resolved config as written to `run_config.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunConfig<C> {
    pub command: String,
    #[serde(flatten)]
    pub config: C,
}

pub fn write_run_config<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(RUN_CONFIG_FILE);
    let run = RunConfig {
        command: command.to_string(),
        config,
    };
    let text = serde_json::to_string_pretty(&run).map_err(|e| CliError::usage(e.to_string()))?;
    std::fs::write(&path, text + "\n")
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// Comma-separated list of numbers.
pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::usage(format!("{what}: `{t}` is not a number")))
        })
        .collect()
}

/// Parses a comma-separated pmf. Sums within `PMF_TOLERANCE` of 1 are
/// renormalized (so `0.5,0.1667,0.3333` is accepted); anything else is
/// rejected.
pub fn parse_pmf(text: &str, what: &str) -> Result<privacy_funnel::infotheory::Pmf, CliError> {
    const PMF_TOLERANCE: f64 = 1e-3;
    let weights: Vec<f64> = parse_list(text, what)?;
    if weights.is_empty() {
        return Err(CliError::usage(format!("{what}: empty pmf")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(CliError::usage(format!("{what}: entries must be non-negative")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > PMF_TOLERANCE {
        return Err(CliError::usage(format!("{what}: pmf sums to {total:.6}, not 1")));
    }
    privacy_funnel::infotheory::Pmf::from_weights(&weights).map_err(|e| CliError::usage(format!("{what}: {e}")))
}

/// Derives an independent seed for one consumer of the root seed.
pub fn sub_seed(root: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = root ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
