//! CSEG1 checkpoints.
//!
//! ```text
//! "CSEG"  u32 version (=1)
//! u64 record length, UTF-8 JSON record
//! u32 tensor count
//! per tensor: u32 key length, key, u32 rank, rank × u64 dims, f32 data
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ChannelMeans;
use crate::error::{Error, Result};
use crate::losses::ClassWeights;
use crate::tensor::Tensor;
use crate::train::TrainState;
use crate::unet::UNetParams;
use crate::unet::UNetConfig;

pub const MAGIC: &[u8; 4] = b"CSEG";
pub const VERSION: u32 = 1;

/// Prefix of the resume copy of the current (not best) parameters.
pub const TRAIN_PREFIX: &str = "train.";
pub const ADAM_M_PREFIX: &str = "adam.m.";
pub const ADAM_V_PREFIX: &str = "adam.v.";
pub const ADAM_T_KEY: &str = "adam.t";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub model: UNetConfig,
    pub channel_means: ChannelMeans,
    pub class_weights: Option<ClassWeights>,
    /// Present for checkpoints written by training; enables resume.
    pub training: Option<TrainState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub record: CheckpointRecord,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, key: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let record = serde_json::to_vec(&self.record)
            .map_err(|e| Error::invalid(format!("checkpoint record: {e}")))?;
        let mut out = Vec::with_capacity(
            64 + record.len() + self.tensors.iter().map(|(k, t)| k.len() + 4 * t.len() + 64).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(record.len() as u64).to_le_bytes());
        out.extend_from_slice(&record);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (key, t) in &self.tensors {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(&fail)?;
        if magic != MAGIC {
            return Err(fail(format!("bad magic bytes {magic:?}, not a CSEG1 checkpoint")));
        }
        let version = r.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let len = r.u64().map_err(&fail)? as usize;
        let record: CheckpointRecord = serde_json::from_slice(r.take(len).map_err(&fail)?)
            .map_err(|e| fail(format!("config record: {e}")))?;
        let count = r.u32().map_err(&fail)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let klen = r.u32().map_err(&fail)? as usize;
            let key = std::str::from_utf8(r.take(klen).map_err(&fail)?)
                .map_err(|_| fail("tensor key is not UTF-8".into()))?
                .to_string();
            let rank = r.u32().map_err(&fail)? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(&fail)?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fail(format!("tensor `{key}` dimensions overflow")))?;
            let raw = r
                .take(n.checked_mul(4).ok_or_else(|| fail("tensor too large".into()))?)
                .map_err(|e| fail(format!("tensor `{key}`: {e}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((key, Tensor::new(&dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { record, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Parameters stored under `prefix` (empty for the model of record).
    pub fn params(&self, prefix: &str) -> Result<UNetParams<f32>> {
        let fail = |reason: String| Error::Checkpoint {
            path: Default::default(),
            reason,
        };
        let mut params = UNetParams::<f32>::zeros(&self.record.model)
            .map_err(|e| fail(format!("stored model config: {e}")))?;
        let keys = params.tensor_keys();
        let shapes = params.tensor_shapes();
        for ((key, shape), dst) in keys.iter().zip(&shapes).zip(params.tensors_mut()) {
            let full = format!("{prefix}{key}");
            let t = self
                .tensor(&full)
                .ok_or_else(|| fail(format!("missing tensor `{full}`")))?;
            if t.shape() != &shape[..] {
                return Err(fail(format!(
                    "tensor `{full}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            dst.copy_from_slice(t.data());
        }
        Ok(params)
    }
}

/// Model-of-record tensors `<layer>.w` / `<layer>.b` with `prefix` prepended.
pub fn param_tensors(params: &UNetParams<f32>, prefix: &str) -> Vec<(String, Tensor<f32>)> {
    params
        .tensor_keys()
        .into_iter()
        .zip(params.tensor_shapes())
        .zip(params.tensors())
        .map(|((k, s), d)| {
            let t = Tensor::new(&s, d.to_vec()).expect("shape matches data");
            (format!("{prefix}{k}"), t)
        })
        .collect()
}

/// Load a checkpoint and its model-of-record parameters, attaching the path
/// to any layout error.
pub fn load_model(path: &Path) -> Result<(UNetParams<f32>, CheckpointRecord)> {
    let ckpt = Checkpoint::load(path)?;
    let params = ckpt.params("").map_err(|e| match e {
        Error::Checkpoint { reason, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })?;
    Ok((params, ckpt.record))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, String> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = UNetConfig::scaled(16, 2, 2);
        let params: UNetParams<f32> = unet::build(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut tensors = param_tensors(&params, "");
        tensors.push((ADAM_T_KEY.into(), Tensor::new(&[], vec![7.0]).unwrap()));
        Checkpoint {
            record: CheckpointRecord {
                model: cfg,
                channel_means: ChannelMeans(vec![0.1, 0.2, 0.30000000000000004]),
                class_weights: None,
                training: None,
            },
            tensors,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cseg");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
        let params = back.params("").unwrap();
        assert_eq!(param_tensors(&params, ""), ck.tensors[..ck.tensors.len() - 1]);
    }

    #[test]
    fn corrupted_magic_names_file() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.cseg");
        let mut bytes = ck.to_bytes().unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        let err = Checkpoint::load(&p).unwrap_err();
        assert!(err.to_string().contains("broken.cseg"), "{err}");
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn truncation_and_missing_tensors() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("x.cseg");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut short = ck.clone();
        short.tensors.remove(0);
        assert!(short.params("").is_err());
        assert!(ck.params(TRAIN_PREFIX).is_err());
    }
}
