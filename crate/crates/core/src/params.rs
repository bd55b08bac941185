//! Named parameter storage, per-pass binding onto a graph, and Adam.

use sue_autograd::{Graph, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Slot index in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Every trainable tensor of a model, addressed by [`ParamId`].
///
/// Retired slots (parameters dropped by a conversion) stay allocated so that
/// ids never move, but they are skipped by iteration, checkpoints and the
/// optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Option<Entry>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Some(Entry {
            name: name.into(),
            value,
            trainable: true,
        }));
        ParamId(self.entries.len() - 1)
    }

    fn entry(&self, id: ParamId) -> &Entry {
        self.entries[id.0].as_ref().expect("use of retired parameter")
    }

    fn entry_mut(&mut self, id: ParamId) -> &mut Entry {
        self.entries[id.0].as_mut().expect("use of retired parameter")
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entry(id).value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entry_mut(id).value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entry(id).name
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entry_mut(id).trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entry(id).trainable
    }

    pub fn retire(&mut self, id: ParamId) {
        self.entries[id.0] = None;
    }

    pub fn slots(&self) -> usize {
        self.entries.len()
    }

    /// Live parameters in creation order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.ids().find(|&id| self.name(id) == name)
    }

    pub fn count_scalars(&self) -> usize {
        self.ids().map(|id| self.get(id).numel()).sum()
    }

    /// Rounds every parameter through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for e in self.entries.iter_mut().flatten() {
            e.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// One forward (and optionally backward) pass: a graph plus the lazily
/// created leaves for the parameters it touched.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track_grad: bool,
}

impl<'a> Session<'a> {
    /// `track_grad` makes trainable parameters gradient-requiring leaves.
    pub fn new(store: &'a ParamStore, track_grad: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.slots()],
            track_grad,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.track_grad && self.store.is_trainable(id) {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradients of every bound trainable parameter after `graph.backward`.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.graph.grad(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub state: Vec<Option<AdamState>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: Vec::new(),
        }
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        if self.state.len() < store.slots() {
            self.state.resize(store.slots(), None);
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let st = self.state[id.0].get_or_insert_with(|| AdamState {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
