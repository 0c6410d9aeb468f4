//! Checkpoint file format.
//!
//! ```text
//! b"WAGF"  u32 version
//! u32 len, model config as JSON
//! u32 len, training metadata as JSON
//! u32 tensor count, then per tensor:
//!     u32 name len, UTF-8 name, u32 rank, rank × u32 dims, f32 payload
//! ```
//!
//! All integers and floats are little-endian. Model parameters come first in
//! their canonical order, followed by the two fusion tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fusion::FusionState;
use crate::model::{Model, ModelConfig};
use crate::optim::ParamSet;
use crate::train::EpochRecord;
use crate::{Error, Real, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"WAGF";
pub const VERSION: u32 = 1;

const FUSION_W: &str = "fusion.g_w_ema";
const FUSION_SA: &str = "fusion.g_sa_ema";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Epoch the parameters were taken from; 0 for an untrained model.
    pub epoch: usize,
    pub fusion_decay: f64,
    pub fusion_initialized: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub model: Model<T>,
    pub fusion: FusionState<T>,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(u32::try_from(v).expect("fits in u32")).to_le_bytes());
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn encode<T: Real>(model: &Model<T>, fusion: &FusionState<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut meta = meta.clone();
    meta.fusion_decay = fusion.decay.as_f64();
    meta.fusion_initialized = fusion.initialized;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for blob in [
        serde_json::to_vec(model.config()).expect("config serializes"),
        serde_json::to_vec(&meta).expect("metadata serializes"),
    ] {
        put_u32(&mut out, blob.len());
        out.extend_from_slice(&blob);
    }
    put_u32(&mut out, model.params().len() + 2);
    for p in model.params().iter() {
        put_tensor(&mut out, &p.name, &p.value);
    }
    put_tensor(&mut out, FUSION_W, &fusion.g_w_ema);
    put_tensor(&mut out, FUSION_SA, &fusion.g_sa_ema);
    out
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
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let n = self.u32()?;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::CorruptCheckpoint(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: shape overflow")))?;
        let bytes = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: payload overflow")))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let n = r.u32()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    let n = r.u32()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let count = r.u32()?;
    if count < 2 {
        return Err(Error::CorruptCheckpoint(format!("only {count} tensors")));
    }
    let mut params = ParamSet::new();
    for _ in 0..count - 2 {
        let (name, t) = r.tensor()?;
        params
            .insert(&name, t)
            .map_err(|_| Error::CorruptCheckpoint(format!("duplicate tensor {name}")))?;
    }
    let (wn, g_w) = r.tensor()?;
    let (sn, g_sa) = r.tensor()?;
    if wn != FUSION_W || sn != FUSION_SA {
        return Err(Error::CorruptCheckpoint(format!(
            "expected fusion tensors, found {wn}, {sn}"
        )));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let model = Model::from_params(config.clone(), params)?;
    let shape = config.feature_shape();
    if g_w.shape() != shape || g_sa.shape() != shape {
        return Err(Error::IncompatibleCheckpoint(format!(
            "fusion tensors {:?}/{:?}, features {:?}",
            g_w.shape(),
            g_sa.shape(),
            shape
        )));
    }
    let mut fusion =
        FusionState::new(&shape, meta.fusion_decay).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    fusion.g_w_ema = g_w;
    fusion.g_sa_ema = g_sa;
    fusion.initialized = meta.fusion_initialized;
    Ok(Checkpoint { model, fusion, meta })
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Model<T>,
    fusion: &FusionState<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    fs::write(path, encode(model, fusion, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
