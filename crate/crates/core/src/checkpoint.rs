//! Binary checkpoints.
//!
//! Layout (little endian): magic `SUEDCKPT`, `u32` version, config text,
//! `u64` epoch, `u8` converted flag, `u64` PRNG state, parameter tensors
//! (name, rank, dims, `f32` payload), then Adam step and per-tensor moments
//! (`f64` payload). Strings are `u32` length + UTF-8 bytes.

use std::fs;
use std::path::Path;

use sue_autograd::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::model::DualEncoder;
use crate::params::{Adam, AdamState};
use crate::train::build_model;

pub const MAGIC: &[u8; 8] = b"SUEDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamEntry {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub epoch: u64,
    /// Whether the configured blocks had been converted when saved.
    pub converted: bool,
    pub rng_state: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub adam: Vec<AdamEntry>,
}

impl Checkpoint {
    /// Snapshot of a model; parameters are rounded to `f32`.
    pub fn capture(
        config: &ExperimentConfig,
        model: &DualEncoder,
        adam: Option<&Adam>,
        epoch: u64,
        converted: bool,
        rng_state: u64,
    ) -> Self {
        let store = &model.store;
        let tensors = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).map(|v| v as f32 as f64)))
            .collect();
        let (adam_step, adam) = match adam {
            Some(a) => (
                a.step,
                store
                    .ids()
                    .filter_map(|id| {
                        a.state.get(id.index()).and_then(|s| s.as_ref()).map(|s| AdamEntry {
                            name: store.name(id).to_string(),
                            m: s.m.clone(),
                            v: s.v.clone(),
                        })
                    })
                    .collect(),
            ),
            None => (0, vec![]),
        };
        Self {
            config: config.clone(),
            epoch,
            converted,
            rng_state,
            tensors,
            adam_step,
            adam,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut w, &self.config.to_text());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.push(u8::from(self.converted));
        w.extend_from_slice(&self.rng_state.to_le_bytes());
        w.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut w, name);
            put_shape(&mut w, t.shape());
            for &v in t.data() {
                w.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.extend_from_slice(&self.adam_step.to_le_bytes());
        w.extend_from_slice(&(self.adam.len() as u32).to_le_bytes());
        for e in &self.adam {
            put_str(&mut w, &e.name);
            put_shape(&mut w, e.m.shape());
            for &v in e.m.data().iter().chain(e.v.data()) {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let config_text = r.string("config")?;
        let config = ExperimentConfig::parse(&config_text)
            .map_err(|e| CheckpointError::Corrupt(format!("embedded config: {e}")))?;
        let epoch = r.u64("epoch")?;
        let converted = match r.take(1, "converted flag")?[0] {
            0 => false,
            1 => true,
            b => return Err(CheckpointError::Corrupt(format!("converted flag {b}")).into()),
        };
        let rng_state = r.u64("prng state")?;
        let n = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string("tensor name")?;
            let shape = r.shape()?;
            let numel = shape.iter().product::<usize>();
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            tensors.push((name, tensor(shape, data)?));
        }
        let adam_step = r.u64("optimizer step")?;
        let n = r.u32("optimizer entry count")?;
        let mut adam = Vec::new();
        for _ in 0..n {
            let name = r.string("optimizer entry name")?;
            let shape = r.shape()?;
            let numel = shape.iter().product::<usize>();
            let raw = r.take(
                numel.checked_mul(16).ok_or(CheckpointError::Truncated("optimizer moments"))?,
                "optimizer moments",
            )?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            adam.push(AdamEntry {
                name,
                m: tensor(shape.clone(), vals[..numel].to_vec())?,
                v: tensor(shape, vals[numel..].to_vec())?,
            });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        Ok(Self {
            config,
            epoch,
            converted,
            rng_state,
            tensors,
            adam_step,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored tensors into `model`, checking every name and shape.
    pub fn apply(&self, model: &mut DualEncoder) -> Result<()> {
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let stored = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let current = model.store.get_mut(id);
            if stored.shape() != current.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    found: stored.shape().to_vec(),
                    expected: current.shape().to_vec(),
                }
                .into());
            }
            *current = stored.clone();
        }
        if self.tensors.len() != model.store.ids().count() {
            return Err(CheckpointError::Corrupt(format!(
                "checkpoint has {} tensors, model {}",
                self.tensors.len(),
                model.store.ids().count()
            ))
            .into());
        }
        Ok(())
    }

    /// Builds the architecture described by `config` and loads into it.
    pub fn model_with(&self, config: &ExperimentConfig) -> Result<DualEncoder> {
        let mut model = build_model(config, self.converted)?;
        self.apply(&mut model)?;
        Ok(model)
    }

    /// The saved model under its own embedded config.
    pub fn model(&self) -> Result<DualEncoder> {
        self.model_with(&self.config)
    }

    /// Optimizer state matched to `model`'s parameters by name.
    pub fn optimizer(&self, model: &DualEncoder) -> Result<Adam> {
        let mut adam = Adam::new(self.config.adam);
        adam.step = self.adam_step;
        adam.state = vec![None; model.store.slots()];
        for e in &self.adam {
            let id = model
                .store
                .find(&e.name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("optimizer state for unknown tensor `{}`", e.name)))?;
            adam.state[id.index()] = Some(AdamState {
                m: e.m.clone(),
                v: e.v.clone(),
            });
        }
        Ok(adam)
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()).into())
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_shape(w: &mut Vec<u8>, shape: &[usize]) {
    w.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        w.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")).into())
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("tensor rank {rank}")).into());
        }
        (0..rank).map(|_| Ok(self.u32("tensor dims")? as usize)).collect()
    }
}
