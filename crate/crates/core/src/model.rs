//! The full network (backbone, head, template update) and its checkpoint archive.
//!
//! Archive layout, all integers little-endian:
//!
//! ```text
//! magic    b"TSFCKPT1"
//! u32      length of the JSON config header, then the header bytes
//! u32      tensor count
//! repeated tensor count times:
//!   u32    name length, then UTF-8 name (module path + parameter role, e.g. "head.deep.cls.out.bias")
//!   u8     1 if trainable, 0 for buffers (normalization running statistics)
//!   u32    rank, then rank x u64 dims
//!   f64    values, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, Branch, TwofoldFeatures};
use crate::error::{Result, TsfError};
use crate::head::Head;
use crate::nn::{join, Module, Param};
use crate::template_update::MuWeights;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TSFCKPT1";

/// Initial regression distance, in search-patch pixels.
pub const INIT_DISTANCE: f64 = 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
}

#[derive(Debug, Clone)]
pub struct TsfModel {
    pub backbone: Backbone,
    pub head: Head,
    pub mu: MuWeights,
}

impl TsfModel {
    /// Fresh weights; MU starts at the zero (identity) update.
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(cfg, &mut rng)?;
        let c = backbone.cfg.fused_channels;
        Ok(TsfModel {
            head: Head::new(c, INIT_DISTANCE, &mut rng),
            mu: MuWeights::zeros(c),
            backbone,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.cfg.clone(),
        }
    }

    pub fn channels(&self) -> usize {
        self.backbone.cfg.fused_channels
    }

    /// Eval-mode twofold features of a batch of patches.
    pub fn features(&self, x: &Tensor, branch: Branch) -> Result<TwofoldFeatures> {
        self.backbone.features(x, branch)
    }

    /// SHA-256 over every tensor name and value in traversal order.
    pub fn checksum(&self) -> String {
        checksum_of(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| TsfError::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.config())?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut entries: Vec<(String, Param)> = Vec::new();
        self.visit("", &mut |name, p| entries.push((name.to_string(), p.clone())));
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, p) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for d in &p.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &p.value {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TsfError::Checkpoint("not a checkpoint archive (bad magic)".into()));
        }
        let hlen = r.u32()? as usize;
        let cfg: ModelConfig = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| TsfError::Checkpoint(format!("config header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| TsfError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let _trainable = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| TsfError::Checkpoint("tensor too large".into()))?)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, (shape, values));
        }
        if r.pos != bytes.len() {
            return Err(TsfError::Checkpoint("trailing bytes after last tensor".into()));
        }
        let mut model = TsfModel::new(cfg.backbone, 0)?;
        model.load_tensors(tensors)?;
        Ok(model)
    }

    fn load_tensors(&mut self, mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        let mut err = None;
        self.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match tensors.remove(name) {
                None => err = Some(format!("missing tensor {name}")),
                Some((shape, _)) if shape != p.shape => {
                    err = Some(format!("tensor {name}: shape {shape:?}, expected {:?}", p.shape))
                }
                Some((_, values)) => {
                    if values.iter().any(|v| !v.is_finite()) {
                        err = Some(format!("tensor {name} holds non-finite values"));
                    }
                    p.value = values;
                }
            }
        });
        if let Some(e) = err {
            return Err(TsfError::Checkpoint(e));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(TsfError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

/// SHA-256 over the named tensors of any module.
pub fn checksum_of(m: &dyn Module) -> String {
    let mut h = Sha256::new();
    m.visit("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    });
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Module for TsfModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.mu.visit(&join(prefix, "mu"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.mu.visit_mut(&join(prefix, "mu"), f);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TsfError::Checkpoint("truncated archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_preserves_every_tensor() {
        let mut m = TsfModel::new(BackboneConfig::tiny(), 3).unwrap();
        m.head.fusion.value = vec![0.1, 0.2, 0.3, 0.4];
        let bytes = m.to_bytes().unwrap();
        let back = TsfModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn seeds_change_weights_deterministically() {
        let a = TsfModel::new(BackboneConfig::tiny(), 1).unwrap();
        let b = TsfModel::new(BackboneConfig::tiny(), 1).unwrap();
        let c = TsfModel::new(BackboneConfig::tiny(), 2).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let m = TsfModel::new(BackboneConfig::tiny(), 3).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert!(TsfModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TsfModel::from_bytes(b"garbage").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TsfModel::from_bytes(&extra).is_err());
        // NaN in the last value
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(TsfModel::from_bytes(&nan), Err(TsfError::Checkpoint(_))));
    }

    #[test]
    fn names_are_unique() {
        let m = TsfModel::new(BackboneConfig::tiny(), 0).unwrap();
        let mut names = Vec::new();
        m.visit("", &mut |n, _| names.push(n.to_string()));
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert!(names.iter().any(|n| n == "head.fusion"));
    }
}
