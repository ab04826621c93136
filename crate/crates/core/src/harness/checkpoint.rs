//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMOTK-CKPT" | version u32 | header_len u64 | header JSON
//! n_tensors u32 | { name_len u32 | name | rank u32 | dims u64.. | f32 data }..
//! has_pca u8 | [ k u32 | mean f64×136 | components f64×k·136 | variance f64×k ]
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use crate::audio2lm::FeatureStats;
use crate::landmarks::{PcaBasis, LANDMARK_DIM};
use crate::nn::TensorRecord;
use crate::{Error, Result};

pub const MAGIC: &[u8; 10] = b"EMOTK-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    /// Configuration the weights were trained with.
    pub config: TrainConfig,
    /// Landmark stage: MFCC input width and standardisation statistics.
    pub mfcc_dim: Option<usize>,
    pub feature_stats: Option<FeatureStats>,
    /// Optimizer steps taken so far.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, TensorRecord>,
    pub pca: Option<PcaBasis>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);

        out.extend_from_slice(&u32_len(self.tensors.len())?.to_le_bytes());
        for (name, rec) in &self.tensors {
            let expect: usize = rec.shape.iter().product();
            if expect != rec.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} but {} values",
                    rec.shape,
                    rec.data.len()
                )));
            }
            out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(rec.shape.len())?.to_le_bytes());
            for &d in &rec.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in &rec.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }

        match &self.pca {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                out.extend_from_slice(&u32_len(p.k())?.to_le_bytes());
                for x in p.mean.iter().chain(&p.components).chain(&p.explained_variance) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not an emotalk checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;

        let n = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = r
                .take(count.checked_mul(4).ok_or_else(truncated)?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), TensorRecord { shape, data }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }

        let pca = match r.take(1)?[0] {
            0 => None,
            1 => {
                let k = r.u32()? as usize;
                let mean = r.f64s(LANDMARK_DIM)?;
                let components = r.f64s(k * LANDMARK_DIM)?;
                let explained_variance = r.f64s(k)?;
                Some(PcaBasis {
                    mean,
                    components,
                    explained_variance,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad PCA flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, tensors, pca })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.header.stage != stage {
            return Err(Error::Checkpoint(format!(
                "expected a {stage} checkpoint, found {}",
                self.header.stage
            )));
        }
        Ok(())
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))
}

fn truncated() -> Error {
    Error::Checkpoint("truncated checkpoint".into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n.checked_mul(8).ok_or_else(truncated)?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
