//! Run configuration: defaults, a JSON file, then dotted-path overrides.

use std::path::{Path, PathBuf};

use mqf2::data::{GpConfig, TimeSeriesDataset};
use mqf2::metrics::MetricConfig;
use mqf2::training::TrainConfig;
use mqf2::{EncoderConfig, PicnnConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// JSON-lines dataset; `<out>/data.jsonl` when absent.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub hidden_size: usize,
    pub num_layers: usize,
    /// Defaults to the prediction length.
    pub context_length: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { hidden_size: 40, num_layers: 2, context_length: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicnnSection {
    /// Must equal the dataset's prediction length when given.
    pub input_dim: Option<usize>,
    /// Must equal `encoder.hidden_size` when given.
    pub context_dim: Option<usize>,
    pub hidden_width: usize,
    pub num_layers: usize,
    pub gamma_floor: f64,
}

impl Default for PicnnSection {
    fn default() -> Self {
        Self { input_dim: None, context_dim: None, hidden_width: 10, num_layers: 2, gamma_floor: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; the generator and training seeds are taken from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Sample paths per series at prediction time.
    pub samples: usize,
    pub data: DataSection,
    pub gp: GpConfig,
    pub encoder: EncoderSection,
    pub picnn: PicnnSection,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            samples: 200,
            data: DataSection::default(),
            gp: GpConfig::default(),
            encoder: EncoderSection::default(),
            picnn: PicnnSection::default(),
            train: TrainConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by `file` when given, then by `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> CliResult<Self> {
        let mut value = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, user, "")?;
        }
        for (key, v) in overrides {
            set_path(&mut value, key, v.clone())?;
        }
        let mut config: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        config.gp.seed = config.seed;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> CliResult<()> {
        if self.samples < 1 {
            return Err(CliError::Config("samples must be at least 1".into()));
        }
        if let Some(d) = self.picnn.context_dim {
            if d != self.encoder.hidden_size {
                return Err(CliError::Config(format!(
                    "picnn.context_dim {d} must equal encoder.hidden_size {}",
                    self.encoder.hidden_size
                )));
            }
        }
        self.gp.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        Ok(())
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.path.clone().unwrap_or_else(|| self.out.join("data.jsonl"))
    }

    /// Network configurations sized for `dataset`.
    pub fn model_configs(&self, dataset: &TimeSeriesDataset) -> CliResult<(EncoderConfig, PicnnConfig)> {
        let n = dataset.prediction_length;
        if let Some(dim) = self.picnn.input_dim {
            if dim != n {
                return Err(CliError::Config(format!(
                    "picnn.input_dim {dim} does not match the dataset prediction_length {n}"
                )));
            }
        }
        let encoder = EncoderConfig {
            hidden_size: self.encoder.hidden_size,
            num_layers: self.encoder.num_layers,
            context_length: self.encoder.context_length.unwrap_or(n),
            feature_dim: dataset.feature_dim(),
        };
        let picnn = PicnnConfig {
            input_dim: n,
            context_dim: self.encoder.hidden_size,
            hidden_width: self.picnn.hidden_width,
            num_layers: self.picnn.num_layers,
            gamma_floor: self.picnn.gamma_floor,
        };
        encoder.validate()?;
        picnn.validate()?;
        Ok((encoder, picnn))
    }
}

/// Parses `a.b.c=value`; the value is JSON when it parses, a string otherwise.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    if key.is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Replaces the value at a dotted path, which must already exist.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

fn merge(base: &mut Value, user: Value, prefix: &str) -> CliResult<()> {
    let Value::Object(user) = user else {
        return Err(CliError::Config(format!("`{prefix}` must be an object")));
    };
    for (k, v) in user {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = base
            .as_object_mut()
            .and_then(|m| m.get_mut(&k))
            .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
        if slot.is_object() && v.is_object() {
            merge(slot, v, &key)?;
        } else {
            *slot = v;
        }
    }
    Ok(())
}
