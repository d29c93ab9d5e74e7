//! KCKP checkpoints.
//!
//! ```text
//! "KCKP" | u32 version | u32 CRC32(payload) | payload
//! payload:
//!   u32 len | meta JSON (config snapshot, step, split)
//!   u32 count | count x { u16 name_len | name | u8 rank | rank x u32 dim | f64... }
//!   u8 has_grouping | [u32 len | grouping section]
//!   u32 len | log tail JSON
//! ```
//! Integers and floats are little-endian. Tensor names are the parameter
//! names; Adam moments are stored as `adam.m.<name>` / `adam.v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KdsmError, Result};
use crate::grouping::Grouping;
use crate::kemb::{put_string, Reader};
use crate::nn::ParamStore;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::optim::Adam;
use crate::synthworld::Setting;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"KCKP";
pub const CKPT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub setting: Setting,
    pub fold: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub total_steps: usize,
    pub adam_t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub match_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    pub grouping: Option<Grouping>,
    pub log: Vec<LogEntry>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_string(out, name);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        put_blob(&mut payload, &meta);

        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(adam) = &self.adam {
            tensors.extend(adam.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
            tensors.extend(adam.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
        }
        payload.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (n, t) in &tensors {
            put_tensor(&mut payload, n, t);
        }

        match &self.grouping {
            Some(g) => {
                payload.push(1);
                put_blob(&mut payload, &g.to_bytes());
            }
            None => payload.push(0),
        }
        put_blob(&mut payload, &serde_json::to_vec(&self.log).expect("log serializes"));

        let mut out = Vec::with_capacity(payload.len() + 12);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != CKPT_MAGIC {
            return Err(KdsmError::Parse("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(KdsmError::Version {
                found: version,
                expected: CKPT_VERSION,
            });
        }
        let stored = r.u32("checksum")?;
        let payload = &bytes[12..];
        let computed = crc32fast::hash(payload);
        // a short file fails the checksum too; report it as truncation
        // when the declared sections run past the end
        if stored != computed {
            if Self::parse_payload(payload).is_err_and(|e| matches!(e, KdsmError::Truncated(_))) {
                return Err(KdsmError::Truncated("checkpoint ends early".into()));
            }
            return Err(KdsmError::Checksum { stored, computed });
        }
        Self::parse_payload(payload)
    }

    fn parse_payload(payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let n = r.u32("meta length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n, "meta")?)
            .map_err(|e| KdsmError::Parse(format!("checkpoint meta: {e}")))?;

        let count = r.u32("tensor count")? as usize;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(base) = name.strip_prefix(ADAM_M) {
                m.insert(base, t);
            } else if let Some(base) = name.strip_prefix(ADAM_V) {
                v.insert(base, t);
            } else {
                params.insert(name, t);
            }
        }

        let grouping = match r.u8("grouping flag")? {
            0 => None,
            1 => {
                let n = r.u32("grouping length")? as usize;
                Some(Grouping::from_bytes(r.take(n, "grouping")?)?)
            }
            f => return Err(KdsmError::Parse(format!("bad grouping flag {f}"))),
        };
        let n = r.u32("log length")? as usize;
        let log: Vec<LogEntry> =
            serde_json::from_slice(r.take(n, "log")?).map_err(|e| KdsmError::Parse(format!("checkpoint log: {e}")))?;
        if !r.is_empty() {
            return Err(KdsmError::Parse("trailing bytes after checkpoint".into()));
        }

        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            let cfg = &meta.config;
            Some(Adam {
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
                t: meta.adam_t,
                m,
                v,
            })
        };
        Ok(Checkpoint {
            meta,
            params,
            adam,
            grouping,
            log,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("kckp.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| KdsmError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| KdsmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| KdsmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and reconciles with a caller-side config: the stored snapshot
    /// wins, with a warning when the two differ.
    pub fn load_with(path: &Path, requested: Option<&TrainConfig>) -> Result<Self> {
        let ck = Self::load(path)?;
        if let Some(req) = requested {
            if req != &ck.meta.config {
                log::warn!(
                    "{}: stored configuration differs from the requested one; using the stored snapshot",
                    path.display()
                );
            }
        }
        Ok(ck)
    }
}
