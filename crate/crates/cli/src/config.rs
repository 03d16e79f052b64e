//! Run configuration: one JSON document, every field optional, unknown keys
//! rejected. `--set a.b=value` overrides a field by dotted path; the value is
//! parsed as JSON and falls back to a plain string.

use std::path::Path;

use robustbf::channel::SystemConfig;
use robustbf::powermin::BisectConfig;
use robustbf::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self {
            train: 20_000,
            validation: 2_000,
            test: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Error samples per channel for rate curves.
    pub error_samples: usize,
    /// Power used by `cdf`, in dBm.
    pub cdf_power_dbm: f64,
    /// Channels used by `power-min` and `bench`; `None` means the whole test split.
    pub channels: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            error_samples: 1_000,
            cdf_power_dbm: 30.0,
            channels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for dataset generation and evaluation streams.
    pub seed: u64,
    pub system: SystemConfig,
    pub data: DataSizes,
    pub train: TrainConfig,
    pub bisect: BisectConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads `path` (or defaults), applies overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p.display(), e))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(s) = seed {
            apply_override(&mut doc, &format!("seed={s}"))?;
            apply_override(&mut doc, &format!("train.seed={s}"))?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.system.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate(&self.system).map_err(|e| CliError::Config(e.to_string()))?;
        self.bisect.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.data.test == 0 {
            return Err(CliError::Config("data.test must be at least 1".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }

    /// Comment line that heads every CSV.
    pub fn csv_header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.hash(), self.seed)
    }
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(CliError::Config(format!("empty key in override path `{path}`")));
        }
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => return Err(CliError::Config(format!("`{path}` descends into a non-object"))),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses `start:end:step` (inclusive of `end` when it lies on the grid) or
/// a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("invalid grid `{spec}`; expected start:end:step or a,b,c"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let nums: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        let (start, end, step) = (nums[0], nums[1], nums[2]);
        if !(step > 0.0) || !(end >= start) || !start.is_finite() || !end.is_finite() {
            return Err(bad());
        }
        let count = ((end - start) / step + 1e-9).floor() as usize;
        return Ok((0..=count).map(|i| start + step * i as f64).collect());
    }
    spec.split(',')
        .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<_>>>()
        .filter(|v| !v.is_empty())
        .ok_or_else(bad)
}
