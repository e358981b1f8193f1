//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "FLATDIFF1" | u32 version
//! u32 len | architecture JSON
//! u32 len | schedule JSON
//! u32 segment count, then per segment:
//!     u32 len | name | u32 rank | rank × u64 dims | u64 offset
//! u64 value count | f32 values
//! u8 state flag, and if set:
//!     u64 step | u64 sam skips | u64 averaged models
//!     four f64 blocks (u64 count | values): Adam m, Adam v, SWA mean, EMA
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::diffusion::{Architecture, EpsModel, ScheduleDescriptor};
use crate::error::{Error, Result};
use crate::numerics::{Layout, ParamAccumulator, ParamVector, Segment};
use crate::optim::{AveragerState, OptimizerState};

pub const MAGIC: &[u8; 9] = b"FLATDIFF1";
pub const VERSION: u32 = 1;

/// Optimizer and averager state needed to resume training bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    pub averager: AveragerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub schedule: ScheduleDescriptor,
    pub params: ParamVector,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(arch: Architecture, schedule: ScheduleDescriptor, params: ParamVector) -> Result<Self> {
        if **params.layout() != arch.layout() {
            return Err(Error::Layout("parameters do not match the architecture".into()));
        }
        Ok(Self {
            arch,
            schedule,
            params,
            state: None,
        })
    }

    pub fn model(&self) -> Result<EpsModel> {
        EpsModel::new(self.arch.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_blob(&mut out, &serde_json::to_vec(&self.arch).expect("architecture serializes"));
        put_blob(&mut out, &serde_json::to_vec(&self.schedule).expect("schedule serializes"));
        let segs = self.params.layout().segments();
        out.extend_from_slice(&(segs.len() as u32).to_le_bytes());
        for s in segs {
            put_blob(&mut out, s.name.as_bytes());
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(s.offset as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.state {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.optimizer.step.to_le_bytes());
                out.extend_from_slice(&st.optimizer.sam_skips.to_le_bytes());
                out.extend_from_slice(&st.averager.n_models.to_le_bytes());
                for block in [&st.optimizer.m, &st.optimizer.v, &st.averager.swa, &st.averager.ema] {
                    out.extend_from_slice(&(block.values().len() as u64).to_le_bytes());
                    for v in block.values() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic; not a FLATDIFF1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let arch: Architecture = serde_json::from_slice(r.blob()?)
            .map_err(|e| Error::Format(format!("architecture descriptor: {e}")))?;
        let schedule: ScheduleDescriptor = serde_json::from_slice(r.blob()?)
            .map_err(|e| Error::Format(format!("schedule descriptor: {e}")))?;
        let n_seg = r.u32()? as usize;
        let mut segments = Vec::with_capacity(n_seg);
        for _ in 0..n_seg {
            let name = String::from_utf8(r.blob()?.to_vec())
                .map_err(|_| Error::Format("segment name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            segments.push(Segment { name, shape, offset });
        }
        let layout = Layout::from_segments(segments)?;
        if layout != arch.layout() {
            return Err(Error::Format("segment table does not match the architecture".into()));
        }
        let count = r.u64()? as usize;
        if count != layout.len() {
            return Err(Error::Format(format!(
                "payload has {count} values, segment table needs {}",
                layout.len()
            )));
        }
        let values = r
            .take(count.checked_mul(4).ok_or_else(|| Error::Format("payload too large".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let layout = Arc::new(layout);
        let params = ParamVector::new(layout.clone(), values)?;
        let state = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let sam_skips = r.u64()?;
                let n_models = r.u64()?;
                let mut blocks = Vec::with_capacity(4);
                for _ in 0..4 {
                    let n = r.u64()? as usize;
                    let vals: Vec<f64> = r
                        .take(n.checked_mul(8).ok_or_else(|| Error::Format("state too large".into()))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    blocks.push(ParamAccumulator::from_values(layout.clone(), vals)?);
                }
                let ema = blocks.pop().expect("four blocks");
                let swa = blocks.pop().expect("four blocks");
                let v = blocks.pop().expect("four blocks");
                let m = blocks.pop().expect("four blocks");
                Some(TrainState {
                    optimizer: OptimizerState { step, m, v, sam_skips },
                    averager: AveragerState { swa, n_models, ema },
                })
            }
            f => return Err(Error::Format(format!("bad state flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            arch,
            schedule,
            params,
            state,
        })
    }

    /// Writes through a temporary file and renames it into place, so a
    /// crash never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob);
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
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
