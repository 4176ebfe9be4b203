//! Checkpoint files: `TACOCKPT | u32 version | u64 header_len | JSON header |
//! little-endian f64 weights` in parameter order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::dataset::NormStats;
use crate::nn::{ParamSet, Tensor};
use crate::policy::Policy;

const MAGIC: &[u8; 8] = b"TACOCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub policy: Policy,
    pub params: ParamSet,
    /// Frozen training-split statistics.
    pub stats: NormStats,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    policy: Policy,
    stats: NormStats,
    step: u64,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            policy: self.policy.clone(),
            stats: self.stats.clone(),
            step: self.step,
            names: self.params.names().to_vec(),
            shapes: self.params.values().iter().map(|t| t.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut b = Vec::with_capacity(20 + json.len() + 8 * self.params.num_scalars());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(json.len() as u64).to_le_bytes());
        b.extend_from_slice(&json);
        for v in self.params.values().iter().flat_map(|t| t.data()) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        Ok(b)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: String| TrainError::Checkpoint(m);
        if b.len() < 20 || &b[..8] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(b[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
        let body = b.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.names.len() != header.shapes.len() {
            return Err(bad("names and shapes differ in length".into()));
        }
        let mut rest = &b[20 + hlen..];
        let mut values = Vec::with_capacity(header.shapes.len());
        for shape in &header.shapes {
            let n: usize = shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad("truncated weights".into()));
            }
            let data = rest[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            values.push(Tensor::new(shape.clone(), data));
            rest = &rest[8 * n..];
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            policy: header.policy,
            params: ParamSet::from_parts(header.names, values),
            stats: header.stats,
            step: header.step,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
