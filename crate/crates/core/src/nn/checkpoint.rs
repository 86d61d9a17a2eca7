//! Checkpoint files.
//!
//! Layout: the magic line `VHPCKPT 1`, then a single-line JSON header, then
//! the raw payload of little-endian `f32` values. The header declares the
//! model configuration, label map, LSTM gate order, tensor names and shapes in
//! payload order, and free-form training metadata.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::params::{BatchNormState, Weights, STATE_NAMES, TRAINABLE_NAMES};
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::ingest::LabelMap;

pub const CHECKPOINT_MAGIC: &str = "VHPCKPT 1";
pub const GATE_ORDER: &str = "i,f,g,o";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    gate_order: String,
    config: ModelConfig,
    labels: LabelMap,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub labels: LabelMap,
    pub metadata: serde_json::Value,
}

fn header_for(model: &Model<f32>, labels: &LabelMap, metadata: &serde_json::Value) -> Header {
    let mut shapes = model.weights.shapes();
    shapes.push(vec![model.config.features()]);
    shapes.push(vec![model.config.features()]);
    let tensors = TRAINABLE_NAMES
        .iter()
        .chain(STATE_NAMES.iter())
        .zip(shapes)
        .map(|(n, shape)| TensorEntry {
            name: (*n).to_owned(),
            shape,
        })
        .collect();
    Header {
        format_version: FORMAT_VERSION,
        dtype: "f32-le".into(),
        gate_order: GATE_ORDER.into(),
        config: model.config.clone(),
        labels: labels.clone(),
        tensors,
        metadata: metadata.clone(),
    }
}

pub fn save_checkpoint<W: Write>(
    model: &Model<f32>,
    labels: &LabelMap,
    metadata: &serde_json::Value,
    mut out: W,
) -> Result<()> {
    if labels.len() != model.config.num_classes {
        return Err(Error::Checkpoint(format!(
            "{} labels for a {}-class model",
            labels.len(),
            model.config.num_classes
        )));
    }
    let header = header_for(model, labels, metadata);
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    serde_json::to_writer(&mut out, &header)?;
    writeln!(out)?;
    let tensors = model
        .weights
        .tensors()
        .into_iter()
        .chain(model.bn_state.tensors());
    let mut buf = Vec::new();
    for (_, values) in tensors {
        buf.clear();
        buf.reserve(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.dtype != "f32-le" || header.gate_order != GATE_ORDER {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype `{}` or gate order `{}`",
            header.dtype, header.gate_order
        )));
    }
    header.config.validate()?;
    if header.labels.len() != header.config.num_classes {
        return Err(Error::Checkpoint(
            "label count does not match the model".into(),
        ));
    }

    let mut weights = Weights::<f32>::zeros(&header.config);
    let mut bn_state = BatchNormState::<f32>::new(header.config.features());
    let expected = header_for(
        &Model::from_parts(header.config.clone(), weights.clone(), bn_state.clone())?,
        &header.labels,
        &header.metadata,
    );
    let declared: Vec<(&str, &[usize])> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    let wanted: Vec<(&str, &[usize])> = expected
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    if declared != wanted {
        return Err(Error::Checkpoint(
            "tensor table does not match the configuration".into(),
        ));
    }

    let mut bytes = [0u8; 4];
    {
        let slots = weights
            .tensors_mut()
            .into_iter()
            .chain(bn_state.tensors_mut());
        for (name, values) in slots {
            for v in values.iter_mut() {
                reader
                    .read_exact(&mut bytes)
                    .map_err(|_| Error::Checkpoint(format!("payload truncated in `{name}`")))?;
                *v = f32::from_le_bytes(bytes);
            }
        }
    }
    if reader.read(&mut bytes)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        model: Model::from_parts(header.config, weights, bn_state)?,
        labels: header.labels,
        metadata: header.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn model() -> Model<f32> {
        let config = ModelConfig {
            seq_len: 5,
            hidden_per_dir: 3,
            dense_units: 4,
            ..ModelConfig::new(3)
        };
        let mut m = init_params(&config, 4).unwrap();
        m.bn_state.running_mean.fill(0.25);
        m.bn_state.running_var.fill(1.5);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let labels = LabelMap::from_hosts(["a", "b", "c"]);
        let meta = serde_json::json!({"fold": 2, "best_val_accuracy": 0.5});
        let mut buf = Vec::new();
        save_checkpoint(&m, &labels, &meta, &mut buf).unwrap();
        let ck = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.labels, labels);
        assert_eq!(ck.metadata, meta);

        let payload = m.weights.num_values() + 2 * m.config.features();
        let header_len = buf
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == b'\n')
            .nth(1)
            .unwrap()
            .0
            + 1;
        assert_eq!(buf.len() - header_len, payload * 4);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model();
        let labels = LabelMap::from_hosts(["a", "b", "c"]);
        let mut buf = Vec::new();
        save_checkpoint(&m, &labels, &serde_json::Value::Null, &mut buf).unwrap();

        assert!(load_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(load_checkpoint(extra.as_slice()).is_err());
        assert!(load_checkpoint(&b"garbage\n"[..]).is_err());

        let wrong = LabelMap::from_hosts(["a", "b"]);
        assert!(save_checkpoint(&m, &wrong, &serde_json::Value::Null, Vec::new()).is_err());
    }
}
