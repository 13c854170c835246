//! Demonstration dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic          4 bytes "HFDS"
//! version        u32
//! chunk_len      u32
//! action_dim     u32
//! num_tasks      u32
//! obs_dim        u32
//! proprio_dim    u32
//! episode_count  u64
//! episodes       episode_count records of: byte_len u64, then byte_len bytes
//!   task_id      u32
//!   seed         u64
//!   mode         i32
//!   start, goal  f32 × 2 each
//!   chunk_count  u32
//!   per chunk    obs f32 × obs_dim, proprio f32 × proprio_dim,
//!                actions f32 × chunk_len·action_dim (row-major)
//! ```

use std::path::Path;

use crate::conditioning::Observation;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tasks::generate::{Episode, EpisodeMeta};
use crate::training::checkpoint::Reader;
use crate::training::Example;

pub const DATASET_MAGIC: &[u8; 4] = b"HFDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub chunk_len: usize,
    pub action_dim: usize,
    pub num_tasks: usize,
    pub obs_dim: usize,
    pub proprio_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(chunk_len: usize, num_tasks: usize, episodes: Vec<Episode>) -> Self {
        Self {
            header: DatasetHeader { chunk_len, action_dim: 2, num_tasks, obs_dim: 4, proprio_dim: 2 },
            episodes,
        }
    }

    /// Every (observation, chunk) pair, in episode order.
    pub fn examples(&self) -> Vec<Example> {
        self.episodes
            .iter()
            .flat_map(|e| e.observations.iter().zip(&e.chunks).map(|(o, c)| Example { obs: o.clone(), chunk: c.clone() }))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        for (k, e) in self.episodes.iter().enumerate() {
            if e.observations.len() != e.chunks.len() {
                return Err(Error::Schema(format!("episode {k} has {} observations for {} chunks", e.observations.len(), e.chunks.len())));
            }
            if e.task_id >= h.num_tasks.max(1) {
                return Err(Error::Schema(format!("episode {k} has task {} of {}", e.task_id, h.num_tasks)));
            }
            for c in &e.chunks {
                if c.rows() != h.chunk_len || c.cols() != h.action_dim {
                    return Err(Error::Schema(format!("episode {k} has a chunk of shape {:?}", c.shape())));
                }
            }
            for o in &e.observations {
                if o.features.len() != h.obs_dim || o.proprio.len() != h.proprio_dim {
                    return Err(Error::Schema(format!("episode {k} has an observation of the wrong width")));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION as usize, h.chunk_len, h.action_dim, h.num_tasks, h.obs_dim, h.proprio_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.episodes.len() as u64).to_le_bytes());
        let f32s = |buf: &mut Vec<u8>, vals: &[f64]| {
            for &v in vals {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        for e in &self.episodes {
            let mut rec = Vec::new();
            rec.extend_from_slice(&(e.task_id as u32).to_le_bytes());
            rec.extend_from_slice(&e.meta.seed.to_le_bytes());
            rec.extend_from_slice(&e.meta.mode.to_le_bytes());
            f32s(&mut rec, &e.meta.start);
            f32s(&mut rec, &e.meta.goal);
            rec.extend_from_slice(&(e.chunks.len() as u32).to_le_bytes());
            for (o, c) in e.observations.iter().zip(&e.chunks) {
                f32s(&mut rec, &o.features);
                f32s(&mut rec, &o.proprio);
                f32s(&mut rec, c.data());
            }
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            out.extend_from_slice(&rec);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Corruption("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != DATASET_VERSION {
            return Err(Error::Schema(format!("dataset version {version}, this build reads {DATASET_VERSION}")));
        }
        let header = DatasetHeader {
            chunk_len: r.u32()?,
            action_dim: r.u32()?,
            num_tasks: r.u32()?,
            obs_dim: r.u32()?,
            proprio_dim: r.u32()?,
        };
        let count = r.u64()?;
        let mut episodes = Vec::new();
        for k in 0..count {
            let len = r.u64()? as usize;
            let mut e = Reader::new(r.take(len)?);
            let task_id = e.u32()?;
            let seed = e.u64()?;
            let mode = i32::from_le_bytes(e.take(4)?.try_into().expect("4 bytes"));
            let p = e.f32s(4)?;
            let chunks_n = e.u32()?;
            let mut observations = Vec::new();
            let mut chunks = Vec::new();
            for _ in 0..chunks_n {
                let features = e.f32s(header.obs_dim)?;
                let proprio = e.f32s(header.proprio_dim)?;
                let actions = e.f32s(header.chunk_len * header.action_dim)?;
                observations.push(Observation { features, proprio, task_id });
                chunks.push(Tensor::matrix(header.chunk_len, header.action_dim, actions)?);
            }
            if e.remaining() != 0 {
                return Err(Error::Corruption(format!("episode {k} record has {} stray bytes", e.remaining())));
            }
            let meta = EpisodeMeta { seed, start: [p[0], p[1]], goal: [p[2], p[3]], mode };
            episodes.push(Episode { task_id, observations, chunks, meta });
        }
        if r.remaining() != 0 {
            return Err(Error::Corruption(format!("{} trailing bytes", r.remaining())));
        }
        let ds = Self { header, episodes };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = ds.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let buf = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Dataset::from_bytes(&buf)
}
