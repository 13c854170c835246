//! Versioned binary checkpoint container.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic            4 bytes  "HFCK"
//! format_version   u32
//! config_len       u32, then config_len bytes of JSON {"model": .., "train": ..}
//! config_hash      32 bytes, SHA-256 of the JSON bytes
//! step             u64
//! action_width     u32, then width f64 lower bounds, width f64 upper bounds
//! tensor_count     u32
//! live tensors     tensor_count records
//! ema tensors      tensor_count records
//! has_optimizer    u8; if 1: adam_t u64, then tensor_count first-moment
//!                  records and tensor_count second-moment records
//! ```
//!
//! A tensor record is `name_len u32, name bytes (UTF-8), ndim u32,
//! dims u32 × ndim, values f32 × product(dims)` in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::numerics::Tensor;
use crate::training::normalizer::Normalizer;
use crate::training::optim::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunSettings {
    pub fn json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("settings serialize")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.json()).into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub settings: RunSettings,
    pub step: u64,
    pub normalizer: Normalizer,
    pub live: ParamStore,
    pub ema: ParamStore,
    pub optimizer: Option<AdamState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.u32(name.len());
        self.bytes(name.as_bytes());
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u32(d);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corruption(format!("truncated: wanted {n} bytes at offset {} of {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Corruption("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?;
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::Corruption(format!("tensor {name} has an overflowing shape")))?;
        let data = self.f32s(n)?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION as usize);
        let json = self.settings.json();
        w.u32(json.len());
        w.bytes(&json);
        w.bytes(&self.settings.hash());
        w.u64(self.step);
        w.u32(self.normalizer.width());
        for &v in self.normalizer.lo.iter().chain(&self.normalizer.hi) {
            w.f64(v);
        }
        w.u32(self.live.len());
        for store in [&self.live, &self.ema] {
            for (name, t) in store.iter() {
                w.tensor(name, t);
            }
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(state) => {
                w.u8(1);
                w.u64(state.t);
                for (moments, tag) in [(&state.m, "m"), (&state.v, "v")] {
                    for (t, (name, _)) in moments.iter().zip(self.live.iter()) {
                        w.tensor(&format!("{tag}:{name}"), t);
                    }
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Corruption("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u32()?;
        let json = r.take(len)?;
        let hash = r.take(32)?;
        if Sha256::digest(json).as_slice() != hash {
            return Err(Error::Corruption("config hash mismatch".into()));
        }
        let settings: RunSettings =
            serde_json::from_slice(json).map_err(|e| Error::Corruption(format!("config record: {e}")))?;
        let step = r.u64()?;
        let width = r.u32()?;
        let lo = (0..width).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let hi = (0..width).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let count = r.u32()?;
        let mut stores = [ParamStore::new(), ParamStore::new()];
        for store in &mut stores {
            for _ in 0..count {
                let (name, t) = r.tensor()?;
                store.add(name, t);
            }
        }
        let [live, ema] = stores;
        if !live.same_layout(&ema) {
            return Err(Error::Corruption("live and EMA tensors differ in layout".into()));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let mut read = || (0..count).map(|_| r.tensor().map(|(_, t)| t)).collect::<Result<Vec<_>>>();
                let m = read()?;
                let v = read()?;
                Some(AdamState { t, m, v })
            }
            other => return Err(Error::Corruption(format!("optimizer flag {other}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::Corruption(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { settings, step, normalizer: Normalizer { lo, hi }, live, ema, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&buf)
    }
}
