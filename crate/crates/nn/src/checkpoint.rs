//! `C2CK` checkpoint container.
//!
//! ```text
//! "C2CK" | u32 version | u64 json_len | json
//! u32 tensor_count | per tensor: u32 name_len | name | u32 ndim | u32 dims… | f32 values…
//! ```
//! All integers and floats little-endian. Tensor names carry their set as a
//! prefix: `raw/`, `ema/`, `adam.m/`, `adam.v/`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tape::Tensor;
use crate::train::{Adam, TrainConfig, TrainState, Trainer};
use crate::unet::DenoiserConfig;

pub const MAGIC: &[u8; 4] = b"C2CK";
pub const VERSION: u32 = 1;

const SETS: [&str; 4] = ["raw", "ema", "adam.m", "adam.v"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    denoiser: DenoiserConfig,
    train: TrainConfig,
    state: TrainState,
    adam_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub raw: ParamStore,
    pub ema: ParamStore,
    pub adam: Adam,
}

fn f32_round(p: &ParamStore) -> ParamStore {
    let pairs = p
        .iter()
        .map(|(n, t)| {
            let data = t.data.iter().map(|&v| v as f32 as f64).collect();
            (
                n.to_string(),
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            )
        })
        .collect();
    ParamStore::from_pairs(pairs).expect("names are already unique")
}

fn moments(names: &ParamStore, m: &[Vec<f64>]) -> ParamStore {
    let pairs = names
        .iter()
        .zip(m)
        .map(|((n, t), d)| {
            (
                n.to_string(),
                Tensor {
                    shape: t.shape.clone(),
                    data: d.clone(),
                },
            )
        })
        .collect();
    ParamStore::from_pairs(pairs).expect("names are already unique")
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end =
            end.ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    /// Snapshot a trainer. Values are stored as f32, so the snapshot holds the
    /// rounded values that a reload will see.
    pub fn from_trainer(t: &Trainer) -> Checkpoint {
        let raw = t.model.params();
        let mut adam = t.adam.clone();
        let round = |m: &[Vec<f64>]| {
            f32_round(&moments(raw, m))
                .tensors()
                .iter()
                .map(|t| t.data.clone())
                .collect()
        };
        adam.m = round(&t.adam.m);
        adam.v = round(&t.adam.v);
        Checkpoint {
            denoiser: t.model.config().clone(),
            train: t.tcfg.clone(),
            state: t.state.clone(),
            raw: f32_round(raw),
            ema: f32_round(&t.ema),
            adam,
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let model = Model::from_params(self.denoiser, self.raw)?;
        Trainer::resume(self.train, model, self.ema, self.adam, self.state)
    }

    /// The EMA weights, which inference uses.
    pub fn ema_model(&self) -> Result<Model> {
        Model::from_params(self.denoiser.clone(), self.ema.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            denoiser: self.denoiser.clone(),
            train: self.train.clone(),
            state: self.state.clone(),
            adam_steps: self.adam.steps,
        };
        let json = serde_json::to_vec(&header).expect("configs serialize");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let m = moments(&self.raw, &self.adam.m);
        let v = moments(&self.raw, &self.adam.v);
        let sets = [&self.raw, &self.ema, &m, &v];
        let count: usize = sets.iter().map(|s| s.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, set) in SETS.iter().zip(sets) {
            for (name, t) in set.iter() {
                let full = format!("{prefix}/{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for &d in &t.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &x in &t.data {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { b, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Checkpoint(
                "not a C2CK checkpoint (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let json_len = usize::try_from(r.u64()?)
            .map_err(|_| NnError::Checkpoint("header too large".into()))?;
        let header: Header = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| NnError::Checkpoint(format!("config header: {e}")))?;
        let count = r.u32()? as usize;
        let mut sets: [Vec<(String, Tensor)>; 4] = Default::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| NnError::Checkpoint(format!("tensor {name:?} has no set prefix")))?;
            let set = SETS
                .iter()
                .position(|s| *s == prefix)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown tensor set {prefix:?}")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n =
                n.ok_or_else(|| NnError::Checkpoint(format!("tensor {name:?} is too large")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| NnError::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            sets[set].push((rest.to_string(), Tensor { shape, data }));
        }
        if r.pos != b.len() {
            return Err(NnError::Checkpoint(format!(
                "{} trailing bytes",
                b.len() - r.pos
            )));
        }
        let [raw, ema, m, v] = sets.map(ParamStore::from_pairs);
        let (raw, ema, m, v) = (raw?, ema?, m?, v?);
        let specs = header.denoiser.param_specs();
        for set in [&raw, &ema, &m, &v] {
            set.check_layout(&specs)?;
        }
        header.denoiser.validate()?;
        header.train.validate()?;
        let mut adam = Adam::new(&raw);
        adam.steps = header.adam_steps;
        adam.m = m.tensors().iter().map(|t| t.data.clone()).collect();
        adam.v = v.tensors().iter().map(|t| t.data.clone()).collect();
        Ok(Checkpoint {
            denoiser: header.denoiser,
            train: header.train,
            state: header.state,
            raw,
            ema,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| NnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| NnError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
