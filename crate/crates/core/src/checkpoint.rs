//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CELCKPT1"
//! u32 header length, then that many bytes of UTF-8 TOML (config echo)
//! u32 block count
//! per block: u16 name length, name bytes, u64 value count, f64 values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{CelError, Result};
use crate::features::FeatureConfig;

pub const MAGIC: &[u8; 8] = b"CELCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub stage: String,
    pub epoch: usize,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub features: Option<FeatureConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blocks: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Self { header, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>) {
        self.blocks.push((name.to_string(), values));
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.block(name)
            .ok_or_else(|| CelError::CheckpointMismatch(format!("checkpoint has no `{name}` block")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header).map_err(|e| CelError::Schema(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, values) in &self.blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |msg: &str| CelError::CheckpointMismatch(msg.to_string());
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("missing CELCKPT1 magic"));
        }
        let hlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let htext = std::str::from_utf8(take(hlen)?).map_err(|_| bad("header is not UTF-8"))?;
        let header: CheckpointHeader = toml::from_str(htext).map_err(|e| CelError::CheckpointMismatch(e.to_string()))?;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(nlen)?).map_err(|_| bad("block name is not UTF-8"))?.to_string();
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(n.checked_mul(8).ok_or_else(|| bad("block too large"))?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            blocks.push((name, values));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last block"));
        }
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored encoder config equals `expected`.
    pub fn load_expecting(path: &Path, expected: &EncoderConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.header.encoder != expected {
            return Err(CelError::CheckpointMismatch(format!(
                "encoder config differs: checkpoint {:?}, requested {:?}",
                ck.header.encoder, expected
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointHeader {
            stage: "pretrain".into(),
            epoch: 3,
            encoder: EncoderConfig::default(),
            meta: BTreeMap::from([("seed".to_string(), "7".to_string())]),
            features: Some(FeatureConfig::default()),
        });
        ck.push("encoder", vec![1.5, -0.25, f64::MIN_POSITIVE]);
        ck.push("similarity", vec![10.0, -5.0]);
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"CELCKPT1");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn corrupt_and_mismatched_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        sample().save(&path).unwrap();
        let other = EncoderConfig {
            embedding_dim: 8,
            ..EncoderConfig::default()
        };
        assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(CelError::CheckpointMismatch(_))));
        assert!(Checkpoint::load_expecting(&path, &EncoderConfig::default()).is_ok());
    }
}
