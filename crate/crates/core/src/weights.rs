//! Weight files: a little-endian `u64` header length, a JSON header naming every
//! tensor and its shape in serialization order, then the tensors back to back
//! as little-endian `f32`.
//!
//! Parameters come first, followed by each batch-norm layer's
//! `<layer>.running_mean` and `<layer>.running_var`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};

pub const FORMAT: &str = "branchseg-weights";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

fn entries(model: &Model<f32>) -> Vec<(TensorEntry, Vec<f32>)> {
    let set = model.params();
    let mut out: Vec<_> = set
        .params()
        .iter()
        .map(|p| {
            (
                TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                },
                p.value.data().to_vec(),
            )
        })
        .collect();
    for s in set.stats() {
        for (suffix, values) in [("running_mean", &s.stats.mean), ("running_var", &s.stats.var)] {
            out.push((
                TensorEntry {
                    name: format!("{}.{suffix}", s.name),
                    shape: vec![values.len()],
                },
                values.clone(),
            ));
        }
    }
    out
}

pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let entries = entries(model);
    let header = WeightsHeader {
        format: FORMAT.to_string(),
        version: VERSION,
        model: model.spec().clone(),
        tensors: entries.iter().map(|(e, _)| e.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let floats: usize = entries.iter().map(|(_, v)| v.len()).sum();
    let mut bytes = Vec::with_capacity(8 + json.len() + 4 * floats);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, values) in &entries {
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "weights file",
        detail: detail.into(),
    }
}

pub fn read_header(bytes: &[u8]) -> Result<(WeightsHeader, &[u8])> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| malformed("truncated header length"))?;
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| malformed("header too large"))?;
    let json = bytes.get(8..8 + len).ok_or_else(|| malformed("truncated header"))?;
    let header: WeightsHeader = serde_json::from_slice(json)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(malformed(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    Ok((header, &bytes[8 + len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let (header, mut payload) = read_header(bytes)?;
    let mut model = Model::<f32>::build(&header.model, 0)?;
    let expected = entries(&model);
    if expected.len() != header.tensors.len() {
        return Err(malformed(format!(
            "{} tensors listed, architecture has {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(expected.len());
    for ((want, _), got) in expected.iter().zip(&header.tensors) {
        if want != got {
            return Err(malformed(format!(
                "expected {} {:?}, found {} {:?}",
                want.name, want.shape, got.name, got.shape
            )));
        }
        let n: usize = got.shape.iter().product();
        let chunk = payload.get(..4 * n).ok_or_else(|| malformed("truncated tensor data"))?;
        values.push(
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                .collect::<Vec<_>>(),
        );
        payload = &payload[4 * n..];
    }
    if !payload.is_empty() {
        return Err(malformed("trailing bytes after tensor data"));
    }
    let mut values = values.into_iter();
    let set = model.params_mut();
    for p in set.params_mut() {
        p.value
            .data_mut()
            .copy_from_slice(&values.next().expect("counted above"));
    }
    for s in set.stats_mut() {
        s.stats.mean = values.next().expect("counted above");
        s.stats.var = values.next().expect("counted above");
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::models::ModelKind;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_reproduces_outputs_bitwise() {
        let spec = Preset::Tiny.model_spec(ModelKind::Unet);
        let mut model = Model::<f32>::build(&spec, 3).unwrap();
        for s in model.params_mut().stats_mut() {
            s.stats.mean.iter_mut().for_each(|m| *m = 0.125);
            s.stats.var.iter_mut().for_each(|v| *v = 1.5);
        }
        let x = Tensor::from_fn([1, 4, 64, 64], |i| ((i * 7919) % 97) as f32 / 97.0);
        let before = model.predict(&x).unwrap();
        let mut restored = from_bytes(&to_bytes(&model).unwrap()).unwrap();
        assert_eq!(restored.params(), model.params());
        assert_eq!(restored.predict(&x).unwrap(), before);
    }

    #[test]
    fn header_lists_tensors_in_order() {
        let spec = Preset::Tiny.model_spec(ModelKind::PatchganDiscriminator);
        let model = Model::<f32>::build(&spec, 0).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let (header, payload) = read_header(&bytes).unwrap();
        assert_eq!(header.model, spec);
        assert_eq!(header.tensors[0].name, "down0.conv.weight");
        assert_eq!(header.tensors[0].shape, vec![16, 5, 4, 4]);
        let floats: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        assert_eq!(payload.len(), 4 * floats);
        assert!(header.tensors.iter().any(|t| t.name == "down1.bn.running_var"));
    }

    #[test]
    fn rejects_corrupt_files() {
        let spec = Preset::Tiny.model_spec(ModelKind::PatchganDiscriminator);
        let model = Model::<f32>::build(&spec, 0).unwrap();
        let bytes = to_bytes(&model).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(from_bytes(&bytes[..4]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
