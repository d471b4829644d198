//! JSON checkpoints. Tensor entries are decimal strings in shortest
//! round-trip form, so save then load reproduces every bit.

use std::path::Path;

use mqf2_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Mode, QuantileModel};
use crate::params::ParamSet;
use crate::picnn::PicnnConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    mode: Mode,
    picnn: PicnnConfig,
    encoder: EncoderConfig,
    tensors: Vec<TensorRecord>,
}

pub fn to_string(model: &QuantileModel) -> String {
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        mode: model.mode,
        picnn: model.picnn.clone(),
        encoder: model.encoder.clone(),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.to_string(),
                shape: [t.nrows(), t.ncols()],
                data: t.iter().map(|v| format!("{v:?}")).collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("checkpoint serializes") + "\n"
}

/// Parses a checkpoint. Tensor names and shapes must match the layout the
/// stored configuration implies; the configuration itself is not validated,
/// so that damaged models can still be inspected.
pub fn from_str(text: &str) -> Result<QuantileModel> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    let mut params = ParamSet::new();
    for rec in file.tensors {
        let [r, c] = rec.shape;
        if rec.data.len() != r * c {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` declares {r}x{c} but holds {} values",
                rec.name,
                rec.data.len()
            )));
        }
        let values = rec
            .data
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", rec.name)))?;
        let t = Tensor::from_shape_vec((r, c), values).expect("length checked");
        params.insert(rec.name, t);
    }
    let mut expected = file.encoder.zero_params();
    expected.extend(file.picnn.zero_params());
    expected.check_layout(&params)?;
    Ok(QuantileModel {
        picnn: file.picnn,
        encoder: file.encoder,
        mode: file.mode,
        params,
    })
}

pub fn save(model: &QuantileModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<QuantileModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}
