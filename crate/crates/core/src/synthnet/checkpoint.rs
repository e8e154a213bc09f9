//! `DCPG1` binary container.
//!
//! ```text
//! "DCPG1\n"            6 bytes magic
//! header_len           u64, little endian
//! header               UTF-8 JSON {"tensors": [{name, shape, offset, len}], ...}
//! blob                 little-endian f64 values; offset/len count floats
//! ```
//!
//! Besides `tensors`, the header carries free-form top-level fields such as
//! `config` (generator checkpoints) or `mode` (direction sets).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{GeneratorConfig, GeneratorWeights, SynthError};
use crate::json;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"DCPG1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a DCPG1 container")]
    BadMagic,
    #[error("truncated header: {declared} bytes declared, {available} available")]
    TruncatedHeader { declared: u64, available: u64 },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("truncated blob: header describes {expected} bytes, file holds {actual}")]
    TruncatedBlob { expected: u64, actual: u64 },
    #[error("{actual} blob bytes present but header describes only {expected}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("tensor `{name}`: {reason}")]
    HeaderMismatch { name: String, reason: String },
    #[error("missing header field `{0}`")]
    MissingField(&'static str),
    #[error(transparent)]
    Weights(#[from] SynthError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

/// Decoded container: extra header fields plus tensors in file order.
#[derive(Debug, Clone)]
pub struct Container {
    pub fields: Map<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn field(&self, name: &'static str) -> Result<&Value, CheckpointError> {
        self.fields.get(name).ok_or(CheckpointError::MissingField(name))
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors.into_iter().collect()
    }
}

pub fn encode_container<'a>(
    fields: &Map<String, Value>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel() as u64,
        });
        offset += t.numel() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut header = fields.clone();
    header.insert("tensors".into(), serde_json::to_value(&entries).expect("entries serialize"));
    let header = json::to_canonical_string(&Value::Object(header), false).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&blob);
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<Container, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(CheckpointError::TruncatedHeader {
            declared: 8,
            available: rest.len() as u64,
        });
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
    let rest = &rest[8..];
    if header_len > rest.len() as u64 {
        return Err(CheckpointError::TruncatedHeader {
            declared: header_len,
            available: rest.len() as u64,
        });
    }
    let (header, blob) = rest.split_at(header_len as usize);
    let header: Value = serde_json::from_slice(header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let Value::Object(mut fields) = header else {
        return Err(CheckpointError::BadHeader("header is not a JSON object".into()));
    };
    let entries = fields.remove("tensors").ok_or(CheckpointError::MissingField("tensors"))?;
    let entries: Vec<TensorEntry> =
        serde_json::from_value(entries).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let described = entries.iter().map(|e| e.offset + e.len).max().unwrap_or(0) * 8;
    let actual = blob.len() as u64;
    if described > actual {
        return Err(CheckpointError::TruncatedBlob {
            expected: described,
            actual,
        });
    }
    if described < actual {
        return Err(CheckpointError::TrailingBytes {
            expected: described,
            actual,
        });
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        if numel != e.len {
            return Err(CheckpointError::HeaderMismatch {
                name: e.name,
                reason: format!("shape {:?} holds {numel} values but len is {}", e.shape, e.len),
            });
        }
        let start = (e.offset * 8) as usize;
        let data = blob[start..start + (e.len * 8) as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| CheckpointError::HeaderMismatch {
            name: e.name.clone(),
            reason: err.to_string(),
        })?;
        tensors.push((e.name, t));
    }
    Ok(Container { fields, tensors })
}

pub fn write_container<'a>(
    path: &Path,
    fields: &Map<String, Value>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CheckpointError> {
    fs::write(path, encode_container(fields, tensors))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container, CheckpointError> {
    decode_container(&fs::read(path)?)
}

pub fn encode_checkpoint(weights: &GeneratorWeights) -> Vec<u8> {
    let mut fields = Map::new();
    fields.insert("config".into(), serde_json::to_value(weights.config()).expect("config serializes"));
    let named: Vec<(String, &Tensor)> = weights.iter().collect();
    encode_container(&fields, named.iter().map(|(n, t)| (n.as_str(), *t)))
}

/// Writes `weights` (whose config must equal `config`) as a DCPG1 file.
pub fn save_checkpoint(weights: &GeneratorWeights, config: &GeneratorConfig, path: &Path) -> Result<(), CheckpointError> {
    if weights.config() != config {
        return Err(CheckpointError::BadHeader("weights were built for a different config".into()));
    }
    fs::write(path, encode_checkpoint(weights))?;
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(GeneratorWeights, GeneratorConfig), CheckpointError> {
    let c = decode_container(bytes)?;
    let config: GeneratorConfig =
        serde_json::from_value(c.field("config")?.clone()).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let weights = GeneratorWeights::from_tensors(config.clone(), c.into_map())?;
    Ok((weights, config))
}

pub fn load_checkpoint(path: &Path) -> Result<(GeneratorWeights, GeneratorConfig), CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthnet::{count_params, init_generator};

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            z_dim: 8,
            w_dim: 8,
            resolutions: vec![4, 8],
            channels_per_resolution: vec![4, 2],
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.dcpg");
        let w = init_generator(&small(), 3).unwrap();
        save_checkpoint(&w, w.config(), &path).unwrap();
        let (back, cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(&cfg, w.config());
        assert!(back.bit_eq(&w));
    }

    #[test]
    fn serialized_float_count_equals_param_count() {
        let cfg = GeneratorConfig::default();
        let w = init_generator(&cfg, 0).unwrap();
        let c = decode_container(&encode_checkpoint(&w)).unwrap();
        let floats: usize = c.tensors.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(floats as u64, count_params(&cfg));
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = encode_checkpoint(&init_generator(&small(), 0).unwrap());
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn wrong_declared_length_is_truncated_blob() {
        let w = init_generator(&small(), 0).unwrap();
        let bytes = encode_checkpoint(&w);
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[14..14 + header_len]).unwrap();
        // Declare one more float for the last tensor than the blob holds.
        let tampered = header.replacen(r#""len":3,"name":"block.8.torgb.bias","offset""#, r#""len":4,"name":"block.8.torgb.bias","offset""#, 1);
        assert_ne!(tampered, header);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[14 + header_len..]);
        assert!(matches!(decode_checkpoint(&out), Err(CheckpointError::TruncatedBlob { .. })));

        let mut cut = bytes.clone();
        cut.truncate(bytes.len() - 8);
        assert!(matches!(decode_checkpoint(&cut), Err(CheckpointError::TruncatedBlob { .. })));
    }

    #[test]
    fn shape_len_disagreement() {
        let t = Tensor::zeros(&[2, 2]);
        let bytes = encode_container(&Map::new(), [("t", &t)]);
        let text = String::from_utf8_lossy(&bytes).replace(r#""shape":[2,2]"#, r#""shape":[4,2]"#);
        assert!(matches!(
            decode_container(text.as_bytes()),
            Err(CheckpointError::HeaderMismatch { .. })
        ));
    }

    #[test]
    fn missing_tensor_is_reported() {
        let w = init_generator(&small(), 0).unwrap();
        let mut fields = Map::new();
        fields.insert("config".into(), serde_json::to_value(w.config()).unwrap());
        let named: Vec<(String, &Tensor)> = w.iter().filter(|(n, _)| n != "const").collect();
        let bytes = encode_container(&fields, named.iter().map(|(n, t)| (n.as_str(), *t)));
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::Weights(SynthError::MissingTensor(_)))
        ));
    }
}
