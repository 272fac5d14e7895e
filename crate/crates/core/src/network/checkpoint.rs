//! Single-file checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! b"ECKP" | version: u32 | meta_len: u32 | meta: TOML text
//! | count: u32 | count × (name_len: u32 | name | blob_len: u64 | ETSR blob)
//! ```
//!
//! Tensor names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`;
//! blobs use the f64 ETSR variant so state round-trips exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Unet};
use crate::error::{Error, Result};
use crate::etsr::{self, Cursor, Precision};
use crate::optim::{Adam, AdamConfig, CosineSchedule};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Seed the run was started with.
    pub seed: u64,
    /// Effective run configuration, as TOML text, when known.
    pub run_config: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    step: usize,
    seed: u64,
    run_config: Option<String>,
    model: ModelConfig,
    adam: AdamConfig,
    schedule: CosineSchedule,
}

const PARAM: &str = "param/";
const FIRST: &str = "adam.m/";
const SECOND: &str = "adam.v/";

impl Checkpoint {
    /// Updates applied so far.
    pub fn step(&self) -> usize {
        self.optimizer.step
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            step: self.optimizer.step,
            seed: self.seed,
            run_config: self.run_config.clone(),
            model: self.config.clone(),
            adam: self.optimizer.config,
            schedule: self.optimizer.schedule,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let groups =
            [(PARAM, self.params.tensors()), (FIRST, &self.optimizer.first_moment), (SECOND, &self.optimizer.second_moment)];
        let count: usize = groups.iter().map(|(_, m)| m.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, map) in groups {
            for (name, t) in map {
                let full = format!("{prefix}{name}");
                let blob = etsr::encode(t, Precision::F64);
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
                out.extend_from_slice(&blob);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let meta_len = cur.u32()? as usize;
        let text = std::str::from_utf8(cur.take(meta_len)?).map_err(|e| format!("metadata is not UTF-8: {e}"))?;
        let meta: Meta = toml::from_str(text).map_err(|e| format!("metadata: {e}"))?;
        let count = cur.u32()? as usize;
        let mut params = BTreeMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?).map_err(|e| format!("tensor name: {e}"))?.to_string();
            let blob_len = usize::try_from(cur.u64()?).map_err(|_| "blob too large")?;
            let blob = cur.take(blob_len)?;
            let (t, used) = etsr::decode(blob)?;
            if used != blob.len() {
                return Err(format!("tensor {name}: {} stray bytes", blob.len() - used));
            }
            let (map, key) = if let Some(k) = name.strip_prefix(PARAM) {
                (&mut params, k)
            } else if let Some(k) = name.strip_prefix(FIRST) {
                (&mut first, k)
            } else if let Some(k) = name.strip_prefix(SECOND) {
                (&mut second, k)
            } else {
                return Err(format!("unknown tensor group in {name:?}"));
            };
            if map.insert(key.to_string(), t).is_some() {
                return Err(format!("tensor {name:?} appears twice"));
            }
        }
        if cur.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
        }
        let optimizer =
            Adam { config: meta.adam, schedule: meta.schedule, step: meta.step, first_moment: first, second_moment: second };
        Ok(Self {
            config: meta.model,
            params: ParamStore::from_map(params),
            optimizer,
            seed: meta.seed,
            run_config: meta.run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
    }

    /// Checks that the parameters are exactly those of `net`, with matching
    /// shapes.
    pub fn check_compatible(&self, net: &Unet) -> Result<()> {
        let template = net.init(0)?;
        let mismatch = |msg: String| Err(Error::Config(format!("incompatible checkpoint: {msg}")));
        if self.params.len() != template.len() {
            return mismatch(format!("{} tensors, model has {}", self.params.len(), template.len()));
        }
        for (name, t) in template.tensors() {
            match self.params.get(name) {
                None => return mismatch(format!("missing {name}")),
                Some(p) if p.shape() != t.shape() => {
                    return mismatch(format!("{name} is {:?}, model expects {:?}", p.shape(), t.shape()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
