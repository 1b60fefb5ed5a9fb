//! Single-file checkpoints: a magic line, the manifest length as a
//! little-endian u64, a JSON manifest, then every tensor's little-endian
//! bytes back to back. The manifest carries a SHA-256 of the tensor bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AdamState;
use crate::error::{Error, Result};
use crate::model::{KTransformer, ModelConfig};
use crate::tensor::{Params, Scalar, Tensor};

const MAGIC: &[u8] = b"KTRANSFORMER-CHECKPOINT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    model: ModelConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    metadata: BTreeMap<String, String>,
    buffer_len: usize,
    sha256: String,
}

/// Everything restored from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar = f32> {
    pub model: KTransformer<T>,
    pub adam: Option<AdamState<T>>,
    pub step: u64,
    pub metadata: BTreeMap<String, String>,
}

fn push_tensor<T: Scalar>(name: String, t: &Tensor<T>, entries: &mut Vec<TensorEntry>, buf: &mut Vec<u8>) {
    entries.push(TensorEntry {
        name,
        shape: t.shape().to_vec(),
        offset: buf.len(),
        len: t.len() * T::BYTES,
    });
    for &x in t.data() {
        x.extend_le(buf);
    }
}

/// Serializes a model (and optionally its optimizer) to bytes.
pub fn encode_checkpoint<T: Scalar>(
    model: &KTransformer<T>,
    adam: Option<&AdamState<T>>,
    step: u64,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut buf = Vec::new();
    for (_, name, t) in model.params().iter() {
        push_tensor(name.to_string(), t, &mut entries, &mut buf);
    }
    let optimizer = adam.map(|a| {
        for (kind, moments) in [("m", &a.m), ("v", &a.v)] {
            for ((_, name, _), t) in model.params().iter().zip(moments) {
                push_tensor(format!("adam.{kind}.{name}"), t, &mut entries, &mut buf);
            }
        }
        OptimizerEntry {
            t: a.t,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    });
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        model: model.config().clone(),
        step,
        tensors: entries,
        optimizer,
        metadata: metadata.clone(),
        buffer_len: buf.len(),
        sha256: hex::encode(Sha256::digest(&buf)),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::invalid(format!("manifest encoding: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + buf.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&buf);
    Ok(out)
}

/// Parses bytes written by [`encode_checkpoint`]; `path` only labels errors.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| fail("not a checkpoint file (bad magic)".into()))?;
    if rest.len() < 8 {
        return Err(fail("truncated header".into()));
    }
    let json_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < json_len {
        return Err(fail("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&rest[..json_len]).map_err(|e| fail(format!("unreadable manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "format version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    if manifest.dtype != T::DTYPE {
        return Err(fail(format!("stored as {}, requested {}", manifest.dtype, T::DTYPE)));
    }
    let buf = &rest[json_len..];
    if buf.len() != manifest.buffer_len {
        return Err(fail(format!(
            "tensor buffer holds {} bytes, manifest declares {}",
            buf.len(),
            manifest.buffer_len
        )));
    }
    if hex::encode(Sha256::digest(buf)) != manifest.sha256 {
        return Err(fail("checksum mismatch: file is corrupted".into()));
    }

    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0;
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.len != count * T::BYTES || e.offset + e.len > buf.len() {
            return Err(fail(format!("tensor {} has inconsistent offset or length", e.name)));
        }
        expected_offset += e.len;
        let data = buf[e.offset..e.offset + e.len].chunks_exact(T::BYTES).map(T::from_le).collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| fail(format!("tensor {}: {err}", e.name)))?;
        tensors.insert(e.name.clone(), t);
    }
    if expected_offset != buf.len() {
        return Err(fail("tensor buffer has trailing bytes".into()));
    }

    let template = KTransformer::<T>::new(manifest.model.clone())?;
    let mut params = Params::new();
    for (_, name, _) in template.params().iter() {
        let t = tensors
            .remove(name)
            .ok_or_else(|| fail(format!("missing parameter {name}")))?;
        params.add(name, t)?;
    }
    let model = KTransformer::from_params(manifest.model, params).map_err(|e| fail(e.to_string()))?;
    let adam = match manifest.optimizer {
        None => None,
        Some(o) => {
            let mut take = |kind: &str| -> Result<Vec<Tensor<T>>> {
                model
                    .params()
                    .iter()
                    .map(|(_, name, _)| {
                        tensors
                            .remove(&format!("adam.{kind}.{name}"))
                            .ok_or_else(|| fail(format!("missing optimizer moment {kind} for {name}")))
                    })
                    .collect()
            };
            let m = take("m")?;
            let v = take("v")?;
            Some(AdamState {
                m,
                v,
                t: o.t,
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            })
        }
    };
    if let Some(name) = tensors.keys().next() {
        return Err(fail(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint {
        model,
        adam,
        step: manifest.step,
        metadata: manifest.metadata,
    })
}

/// Writes a checkpoint through a temporary file and a rename.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &KTransformer<T>,
    adam: Option<&AdamState<T>>,
    step: u64,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, adam, step, metadata)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClusterMode;

    fn small() -> KTransformer<f32> {
        KTransformer::new(ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 8,
            layers_enc: 1,
            layers_dec: 1,
            max_len: 8,
            cluster_mode: ClusterMode::Both,
            src_vocab: 7,
            tgt_vocab: 6,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let mut adam = AdamState::new(m.params(), 1e-3);
        adam.t = 7;
        adam.m[0].data_mut()[3] = 0.125;
        let meta = BTreeMap::from([("note".to_string(), "x".to_string())]);
        let bytes = encode_checkpoint(&m, Some(&adam), 42, &meta).unwrap();
        let back: Checkpoint<f32> = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert!(back.model.params().bit_eq(m.params()));
        assert!(back.adam.unwrap().bit_eq(&adam));
        assert_eq!(back.step, 42);
        assert_eq!(back.metadata, meta);
        let src = [4, 5, 6];
        assert!(back.model.logits(&src, &[2, 4]).unwrap().bit_eq(&m.logits(&src, &[2, 4]).unwrap()));
    }

    #[test]
    fn corruption_detected() {
        let m = small();
        let bytes = encode_checkpoint(&m, None, 0, &BTreeMap::new()).unwrap();
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0x01;
        let err = decode_checkpoint::<f32>(&flipped, Path::new("c")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let err = decode_checkpoint::<f32>(&bytes[..bytes.len() - 3], Path::new("c")).unwrap_err();
        assert!(err.to_string().contains("buffer"), "{err}");
        assert!(decode_checkpoint::<f32>(&bytes[..10], Path::new("c")).is_err());
        assert!(decode_checkpoint::<f64>(&bytes, Path::new("c")).is_err());
    }

    #[test]
    fn version_checked() {
        let m = small();
        let bytes = encode_checkpoint(&m, None, 0, &BTreeMap::new()).unwrap();
        let json_start = MAGIC.len() + 8;
        let json_len = u64::from_le_bytes(bytes[MAGIC.len()..json_start].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[json_start..json_start + json_len]).unwrap();
        let patched = json.replacen("\"version\":1", "\"version\":9", 1);
        assert_eq!(patched.len(), json.len());
        let mut out = bytes[..json_start].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[json_start + json_len..]);
        let err = decode_checkpoint::<f32>(&out, Path::new("c")).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = small();
        save_checkpoint(&path, &m, None, 3, &BTreeMap::new()).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert!(back.model.params().bit_eq(m.params()));
        assert!(back.adam.is_none());
    }
}
