//! Binary checkpoint format.
//!
//! ```text
//! b"CAPCKPT1"
//! u32  format version
//! u8   head mode (0 identity, 1 hidden)
//! u32  image input dim, u32 text input dim, u32 hidden dim, u32 embedding dim
//! u64  parameter count
//! f64  parameters, declared order (image head, text head, ln(1/τ))
//! u32  epoch
//! f64  validation loss
//! u64  seed
//! u64  config fingerprint (FNV-1a 64 of the config JSON below)
//! u32  config JSON length, then the JSON bytes
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::encoders::{fnv1a64, DualEncoder, EncoderParams, HeadMode, ProjectionHead, TextFeaturizerConfig};

use super::{Result, TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAPCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub epoch: u32,
    pub val_loss: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> u64 {
        self.config.fingerprint()
    }

    pub fn featurizer(&self) -> Result<TextFeaturizerConfig> {
        Ok(TextFeaturizerConfig::new(self.config.bucket_count)?)
    }

    pub fn encoder(&self) -> Result<DualEncoder> {
        Ok(DualEncoder::new(self.params.clone(), self.featurizer()?)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params.dims();
        let flat = self.params.to_flat();
        let config_json = self.config.canonical_json();
        let mut out = Vec::with_capacity(64 + flat.len() * 8 + config_json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(dims.mode.code());
        for d in [dims.image_dim, dims.text_dim, dims.hidden_dim, dims.embed_dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in &flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.val_loss.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&fnv1a64(config_json.as_bytes()).to_le_bytes());
        out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(config_json.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.bad(0, "bad magic, expected CAPCKPT1"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.bad(8, &format!("unsupported format version {version}")));
        }
        let mode_pos = r.pos;
        let mode = HeadMode::from_code(r.u8()?)
            .ok_or_else(|| r.bad(mode_pos, "unknown head mode"))?;
        let image_dim = r.u32()? as usize;
        let text_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let zero_head = |in_dim| ProjectionHead::zeros(mode, in_dim, hidden_dim, embed_dim);
        let mut params = EncoderParams {
            image_head: zero_head(image_dim),
            text_head: zero_head(text_dim),
            log_inv_tau: 0.0,
        };
        let count_pos = r.pos;
        let count = r.u64()? as usize;
        if count != params.param_count() {
            return Err(r.bad(
                count_pos,
                &format!("parameter count {count} does not match dims ({})", params.param_count()),
            ));
        }
        let flat = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.assign_flat(&flat)?;

        let epoch = r.u32()?;
        let val_loss = r.f64()?;
        let seed = r.u64()?;
        let fingerprint_pos = r.pos;
        let fingerprint = r.u64()?;
        let json_len = r.u32()? as usize;
        let json = r.take(json_len)?;
        if r.pos != bytes.len() {
            return Err(r.bad(r.pos, "trailing bytes after metadata"));
        }
        if fnv1a64(json) != fingerprint {
            return Err(TrainError::FingerprintMismatch {
                stored: fingerprint,
                computed: fnv1a64(json),
                offset: fingerprint_pos,
            });
        }
        let config: TrainConfig = serde_json::from_slice(json)
            .map_err(|e| TrainError::BadCheckpoint {
                offset: fingerprint_pos + 12,
                message: format!("config metadata: {e}"),
            })?;
        if config.bucket_count != text_dim {
            return Err(r.bad(0, "text head input does not match the configured bucket count"));
        }
        Ok(Self {
            params,
            epoch,
            val_loss,
            seed,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Load and require a specific configuration fingerprint.
    pub fn load_expecting(path: &Path, fingerprint: u64) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.fingerprint() != fingerprint {
            return Err(TrainError::FingerprintMismatch {
                stored: ckpt.fingerprint(),
                computed: fingerprint,
                offset: 0,
            });
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, offset: usize, message: &str) -> TrainError {
        TrainError::BadCheckpoint {
            offset,
            message: message.to_owned(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.bad(self.pos, "unexpected end of file")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
