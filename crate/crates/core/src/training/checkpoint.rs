//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "RCLDTCKP"
//! version    u32
//! header     u64 length + UTF-8 JSON {"model": ModelConfig, "schedule": ScheduleConfig}
//! step       u64
//! count      u32
//! count × { name: u32 length + UTF-8, rank: u32, dims: rank × u64, data: f32 × numel }
//! ```
//!
//! Records are sorted by name, so identical checkpoints give identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{param_specs, Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::Array;

pub const MAGIC: &[u8; 8] = b"RCLDTCKP";
pub const VERSION: u32 = 1;

/// Trained parameters (always stored as f32) with their architecture,
/// schedule and optimizer step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub schedule: ScheduleConfig,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    schedule: ScheduleConfig,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.model.validate()?;
        if !self.model.params.all_finite() {
            return Err(Error::Numerical("refusing to save non-finite parameters".into()));
        }
        let header = serde_json::to_vec(&Header {
            model: self.model.config.clone(),
            schedule: self.schedule,
        })?;
        let mut out = Vec::with_capacity(64 + header.len() + 4 * self.model.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, a) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Load("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Load(format!("unknown version {version}")));
        }
        let len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Load(format!("corrupt header: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Load(format!("`{name}` has implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Load(format!("`{name}` shape overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Load("size overflow".into()))?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Load(format!("`{name}` holds non-finite values")));
            }
            params.insert(name, Array { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Load(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        header.model.validate().map_err(|e| Error::Load(e.to_string()))?;
        params
            .check_against(&param_specs(&header.model))
            .map_err(|e| Error::Load(e.to_string()))?;
        NoiseSchedule::new(header.schedule).map_err(|e| Error::Load(e.to_string()))?;
        Ok(Self {
            model: Model {
                config: header.model,
                params,
            },
            schedule: header.schedule,
            step,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Load(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Load and require the architecture hash to match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let (found, want) = (ckpt.model.config.hash(), expected.hash());
    if found != want {
        return Err(Error::Load(format!("config hash {found} does not match requested {want}")));
    }
    Ok(ckpt)
}
