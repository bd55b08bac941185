//! Shared-unified-expert layer.
//!
//! A [`SueLayer`] replaces the feed-forward slot of a transformer block:
//!
//! ```text
//! y = shared(x) + Σ_{i ∈ topk(x)} w_i(x) · routed_i(x)
//! ```
//!
//! The shared expert starts as a bit-exact copy of the block's original FFN
//! ([`init_shared_expert`]) and stays trainable. Routed experts are freshly
//! initialized and only evaluated on the tokens the gate dispatches to them.
//! Top-k indices are piecewise constant in the input, so the backward pass
//! treats the selection as fixed and differentiates the selected softmax
//! weights exactly.

use sue_autograd::{Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::SplitMix64;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Two-layer GELU feed-forward network, `D -> H -> D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
    pub hidden: usize,
}

impl ExpertFfn {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), rng.truncated_normal_tensor(&[dim, hidden], INIT_STD)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("{prefix}.w2"), rng.truncated_normal_tensor(&[hidden, dim], INIT_STD)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[dim])),
            dim,
            hidden,
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Applies the network to the last axis of `x`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (s.param(self.w1), s.param(self.b1), s.param(self.w2), s.param(self.b2));
        let g = &mut s.graph;
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h);
        let y = g.matmul(h, w2)?;
        Ok(g.add(y, b2)?)
    }

    /// Sets the output projection to zero so the expert is the zero map.
    pub fn zero_output(&self, store: &mut ParamStore) {
        store.get_mut(self.w2).data_mut().fill(0.0);
        store.get_mut(self.b2).data_mut().fill(0.0);
    }
}

/// Deep copy of `base` under new parameter names: bit-identical values,
/// separate storage and optimizer state.
pub fn init_shared_expert(store: &mut ParamStore, base: &ExpertFfn, prefix: &str) -> ExpertFfn {
    let mut copy = |id: ParamId, suffix: &str| {
        let v = store.get(id).clone();
        store.add(format!("{prefix}.{suffix}"), v)
    };
    ExpertFfn {
        w1: copy(base.w1, "w1"),
        b1: copy(base.b1, "b1"),
        w2: copy(base.w2, "w2"),
        b2: copy(base.b2, "b2"),
        dim: base.dim,
        hidden: base.hidden,
    }
}

/// Linear gate producing one logit per routed expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNetwork {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_experts: usize,
}

impl GateNetwork {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, n_experts: usize, rng: &mut SplitMix64) -> Self {
        Self {
            weight: store.add(
                format!("{prefix}.weight"),
                rng.truncated_normal_tensor(&[dim, n_experts], INIT_STD),
            ),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[n_experts])),
            n_experts,
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Routing decision for a batch of tokens.
#[derive(Debug, Clone)]
pub struct RouterOutput {
    /// Gate logits, `[T, n]`.
    pub logits: Var,
    /// Full softmax over all `n` experts, `[T, n]`.
    pub probs: Var,
    /// Combination weights, zero outside the selected experts, `[T, n]`.
    pub weights: Var,
    /// Per token, the `k` selected experts in order of decreasing probability.
    pub selected: Vec<Vec<usize>>,
    pub n_experts: usize,
}

impl RouterOutput {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }
}

/// Indices of the `k` largest entries; equal values go to the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps ascending index order among equal probabilities
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

/// Runs the gate over `x` (`[.., D]`, flattened to `T` tokens) and picks the
/// top-`k` experts per token. With `renormalize` the selected probabilities
/// are rescaled to sum to one; otherwise they are used as-is.
pub fn gate_forward(
    s: &mut Session,
    gate: &GateNetwork,
    x: Var,
    k: usize,
    renormalize: bool,
) -> Result<RouterOutput> {
    let n = gate.n_experts;
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k must satisfy 1 <= k <= {n}, got {k}")));
    }
    let d = *s.graph.shape(x).last().unwrap();
    let tokens = s.value(x).numel() / d;
    let (w, b) = (s.param(gate.weight), s.param(gate.bias));
    let g = &mut s.graph;
    let xf = g.reshape(x, &[tokens, d])?;
    let logits = g.matmul(xf, w)?;
    let logits = g.add(logits, b)?;
    let probs = g.softmax(logits);

    let pv = g.value(probs);
    let selected: Vec<Vec<usize>> = (0..tokens).map(|t| top_k(pv.row(t), k)).collect();
    let weights = if k == n {
        probs
    } else {
        let mut mask = vec![0.0; tokens * n];
        for (t, sel) in selected.iter().enumerate() {
            for &e in sel {
                mask[t * n + e] = 1.0;
            }
        }
        let mask = g.constant(Tensor::new(vec![tokens, n], mask)?);
        let kept = g.mul(probs, mask)?;
        if renormalize {
            let denom = g.sum_axis(kept, 1, true)?;
            g.div(kept, denom)?
        } else {
            kept
        }
    };
    Ok(RouterOutput {
        logits,
        probs,
        weights,
        selected,
        n_experts: n,
    })
}

/// Shared expert plus gated routed experts in one FFN slot.
///
/// `shared == None` gives a plain routed-only mixture (no always-on path).
#[derive(Debug, Clone, PartialEq)]
pub struct SueLayer {
    pub shared: Option<ExpertFfn>,
    pub routed: Vec<ExpertFfn>,
    pub gate: GateNetwork,
    pub k: usize,
    pub renormalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SueOptions {
    pub n_experts: usize,
    pub k: usize,
    pub shared: bool,
    pub renormalize: bool,
}

impl Default for SueOptions {
    fn default() -> Self {
        Self {
            n_experts: 4,
            k: 2,
            shared: true,
            renormalize: true,
        }
    }
}

impl SueLayer {
    /// Builds a layer around an existing block FFN. The shared expert (if
    /// requested) inherits `base`; routed experts and the gate are drawn
    /// from `rng`.
    pub fn convert(
        store: &mut ParamStore,
        prefix: &str,
        base: &ExpertFfn,
        opts: SueOptions,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if opts.k == 0 || opts.k > opts.n_experts {
            return Err(Error::Config(format!(
                "top-k must satisfy 1 <= k <= n_experts ({}), got {}",
                opts.n_experts, opts.k
            )));
        }
        let shared = opts
            .shared
            .then(|| init_shared_expert(store, base, &format!("{prefix}.shared")));
        let gate = GateNetwork::new(store, &format!("{prefix}.gate"), base.dim, opts.n_experts, rng);
        let routed = (0..opts.n_experts)
            .map(|i| ExpertFfn::new(store, &format!("{prefix}.routed.{i}"), base.dim, base.hidden, rng))
            .collect();
        Ok(Self {
            shared,
            routed,
            gate,
            k: opts.k,
            renormalize: opts.renormalize,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.routed.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.gate.params().to_vec();
        if let Some(s) = &self.shared {
            p.extend(s.params());
        }
        for e in &self.routed {
            p.extend(e.params());
        }
        p
    }

    /// Output with the shape of `x`, plus the routing decision. Each routed
    /// expert only sees the tokens dispatched to it.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<(Var, RouterOutput)> {
        let shape = s.graph.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let tokens = s.value(x).numel() / d;
        let n = self.n_experts();
        let router = gate_forward(s, &self.gate, x, self.k, self.renormalize)?;
        let xf = s.graph.reshape(x, &[tokens, d])?;

        let mut acc = match &self.shared {
            Some(shared) => Some(shared.forward(s, xf)?),
            None => None,
        };
        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (t, sel) in router.selected.iter().enumerate() {
            for &e in sel {
                rows_of[e].push(t);
            }
        }
        for (e, rows) in rows_of.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xi = s.graph.index_rows(xf, rows)?;
            let yi = self.routed[e].forward(s, xi)?;
            let flat: Vec<usize> = rows.iter().map(|&t| t * n + e).collect();
            let g = &mut s.graph;
            let wi = g.gather_flat(router.weights, &flat)?;
            let wi = g.reshape(wi, &[rows.len(), 1])?;
            let contrib = g.mul(yi, wi)?;
            let placed = g.scatter_rows(contrib, rows, tokens)?;
            acc = Some(match acc {
                Some(a) => g.add(a, placed)?,
                None => placed,
            });
        }
        let y = acc.expect("k >= 1 dispatches every token somewhere");
        let y = s.graph.reshape(y, &shape)?;
        Ok((y, router))
    }
}

/// Mean over tokens of the squared log-sum-exp of the gate logits.
pub fn router_z_loss(s: &mut Session, logits: Var) -> Result<Var> {
    let g = &mut s.graph;
    let lse = g.logsumexp(logits);
    let sq = g.square(lse);
    Ok(g.mean(sq))
}

/// Load-balance penalty `n · Σ_i f_i · P_i`, where `f_i` is the share of
/// (token, slot) dispatches sent to expert `i` and `P_i` the mean router
/// probability of expert `i`. Equals 1 under uniform routing.
pub fn load_balance_loss(s: &mut Session, probs: Var, selected: &[Vec<usize>]) -> Result<Var> {
    let n = *s.graph.shape(probs).last().unwrap();
    let tokens = s.value(probs).numel() / n;
    if selected.len() != tokens {
        return Err(Error::Contract(format!(
            "{} selections for {tokens} tokens",
            selected.len()
        )));
    }
    let mut counts = vec![0.0; n];
    let mut total = 0.0;
    for sel in selected {
        for &e in sel {
            counts[e] += 1.0;
            total += 1.0;
        }
    }
    let frac: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let g = &mut s.graph;
    let flat = g.reshape(probs, &[tokens, n])?;
    let p_sum = g.sum_axis(flat, 0, false)?;
    let p_mean = g.scale(p_sum, 1.0 / tokens as f64);
    let f = g.constant(Tensor::new(vec![n], frac)?);
    let fp = g.mul(p_mean, f)?;
    let dot = g.sum(fp);
    Ok(g.scale(dot, n as f64))
}

/// α/β/γ weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-3,
            gamma: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of one evaluation of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_z: f64,
    pub l_b: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `α·l_ce + β·l_z + γ·l_b`, wired into the graph for backward.
pub fn total_loss(s: &mut Session, l_ce: Var, l_z: Var, l_b: Var, w: LossWeights) -> Result<(Var, LossBundle)> {
    w.validate()?;
    let g = &mut s.graph;
    let a = g.scale(l_ce, w.alpha);
    let b = g.scale(l_z, w.beta);
    let c = g.scale(l_b, w.gamma);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    let bundle = LossBundle {
        l_ce: g.value(l_ce).item()?,
        l_z: g.value(l_z).item()?,
        l_b: g.value(l_b).item()?,
        total: g.value(total).item()?,
        weights: w,
    };
    Ok((total, bundle))
}

/// Per-expert dispatch shares and their entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    pub fractions: Vec<f64>,
    /// Natural-log entropy, in `[0, ln n]`.
    pub entropy: f64,
}

/// Running dispatch counts for one layer across many batches.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationCounter {
    counts: Vec<u64>,
}

impl UtilizationCounter {
    pub fn new(n_experts: usize) -> Self {
        Self {
            counts: vec![0; n_experts],
        }
    }

    pub fn add(&mut self, selected: &[Vec<usize>]) {
        for sel in selected {
            for &e in sel {
                self.counts[e] += 1;
            }
        }
    }

    pub fn finish(&self) -> Result<Utilization> {
        expert_utilization(&self.counts)
    }
}

/// Dispatch fractions and entropy from raw per-expert assignment counts.
pub fn expert_utilization(counts: &[u64]) -> Result<Utilization> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("expert utilization over zero tokens".into()));
    }
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let entropy = fractions
        .iter()
        .filter(|&&f| f > 0.0)
        .map(|&f| -f * f.ln())
        .sum::<f64>()
        .max(0.0);
    Ok(Utilization { fractions, entropy })
}
