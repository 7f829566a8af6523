//! Binary model archive.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    b"JTFTCKPT"
//! version  u32
//! meta     u64 length + UTF-8 TOML record
//! count    u32
//! count ×  name (u32 length + UTF-8), rank u32, dims u64 × rank, values f64 × numel
//! digest   SHA-256 of everything above
//! ```

use std::path::Path;

use jtft_core::model::{Jtft, ModelConfig};
use jtft_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SplitSpec;
use crate::error::{AppError, AppResult};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"JTFTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything besides the weights needed to reproduce an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub dataset: String,
    /// Row limit applied when the dataset was loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rows: Option<usize>,
    pub fingerprint: String,
    pub seed: u64,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, model: &Jtft) -> Self {
        Checkpoint { meta, params: model.params().clone() }
    }

    pub fn model(&self) -> AppResult<Jtft> {
        Jtft::from_params(self.meta.model.clone(), self.params.clone())
            .map_err(|e| AppError::Config(format!("checkpoint does not match its configuration: {e}")))
    }

    pub fn to_bytes(&self) -> AppResult<Vec<u8>> {
        let meta = toml::to_string(&self.meta).map_err(|e| AppError::Config(format!("cannot encode metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> AppResult<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(AppError::Config("not a jtft checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(AppError::Config(format!(
                "unsupported checkpoint format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(AppError::Config("checkpoint integrity check failed: file is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(AppError::Config("checkpoint integrity check failed: digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u64()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| AppError::Config("checkpoint metadata is not UTF-8".into()))?;
        let meta: CheckpointMeta =
            toml::from_str(meta).map_err(|e| AppError::Config(format!("bad checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| AppError::Config("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<AppResult<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|n| n.saturating_mul(8) <= r.remaining()).ok_or_else(|| {
                AppError::Config(format!("parameter {name}: shape {shape:?} exceeds the file"))
            })?;
            let data = r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| AppError::Config(format!("parameter {name}: {e}")))?;
            params.add(name, t);
        }
        if r.remaining() != 0 {
            return Err(AppError::Config(format!("{} trailing bytes after the last parameter", r.remaining())));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> AppResult<&'a [u8]> {
        if n > self.remaining() {
            return Err(AppError::Config("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> AppResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            lookback: 16,
            horizon: 4,
            channels: 2,
            patch_len: 4,
            stride: 2,
            n_t: 3,
            n_f: 2,
            d_m: 4,
            heads: 2,
            encoder_layers: 1,
            ffn_width: 8,
            lra_layers: 1,
            d_r: 1,
            dropout: 0.0,
        };
        let model = Jtft::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let meta = CheckpointMeta {
            dataset: "toy".into(),
            max_rows: Some(100),
            fingerprint: "abc".into(),
            seed: 7,
            split: SplitSpec::default(),
            model: cfg,
            train: TrainConfig::default(),
        };
        Checkpoint::new(meta, &model)
    }

    #[test]
    fn round_trip_is_lossless() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap().params(), &ck.params);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        let err = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
        assert!(err.contains("integrity"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        let err = Checkpoint::from_bytes(&version).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        assert!(Checkpoint::from_bytes(b"PNG....").is_err());
    }
}
