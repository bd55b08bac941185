//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological order and `backward` walks it from the loss towards the
//! leaves exactly once.

use crate::error::{Result, TensorError};
use crate::shape::{broadcast_shape, normalize_axis, source_index_map, strides};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation selector for [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Exp,
    Log,
    Square,
    Gelu,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Square,
    Gelu,
    Scale(f64),
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    IndexRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherFlat {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Accumulated gradient, kept only for leaves.
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c[m,n] (+)= a[m,k] · b[k,n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every element addressed by the given
    // extents and strides, and `c` never aliases `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulLayout {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (a offset, b offset) per output batch entry.
    batches: Vec<(usize, usize)>,
    /// `b` is a plain matrix shared by every batch entry of `a`.
    shared_rhs: bool,
}

fn matmul_layout(sa: &[usize], sb: &[usize]) -> Result<MatmulLayout> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(TensorError::Dimension(format!(
            "matmul needs rank >= 2, got {sa:?} and {sb:?}"
        )));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(TensorError::Dimension(format!(
            "matmul inner extents differ: {sa:?} x {sb:?}"
        )));
    }
    let ba = &sa[..sa.len() - 2];
    let bb = &sb[..sb.len() - 2];
    let batch = broadcast_shape(ba, bb)?;
    let nbatch: usize = batch.iter().product();
    let map_a = source_index_map(&batch, ba);
    let map_b = source_index_map(&batch, bb);
    let batches = (0..nbatch)
        .map(|i| {
            let ia = map_a.as_ref().map_or(i, |m| m[i]);
            let ib = map_b.as_ref().map_or(i, |m| m[i]);
            (ia * m * k, ib * k * n)
        })
        .collect();
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulLayout {
        m,
        k,
        n,
        out_shape,
        batches,
        shared_rhs: bb.is_empty(),
    })
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or_else(|| TensorError::Contract("binary op needs a second operand".into()))
        };
        match op {
            Elementwise::Add => self.add(a, need_b(b)?),
            Elementwise::Sub => self.sub(a, need_b(b)?),
            Elementwise::Mul => self.mul(a, need_b(b)?),
            Elementwise::Div => self.div(a, need_b(b)?),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Log => self.log(a),
            Elementwise::Square => Ok(self.square(a)),
            Elementwise::Gelu => Ok(self.gelu(a)),
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = match (
            source_index_map(&out_shape, &sa),
            source_index_map(&out_shape, &sb),
        ) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(mb)) => av.iter().zip(mb).map(|(&x, j)| f(x, bv[j])).collect(),
            (Some(ma), None) => ma.into_iter().zip(bv).map(|(i, &y)| f(av[i], y)).collect(),
            (Some(ma), Some(mb)) => ma
                .into_iter()
                .zip(mb)
                .map(|(i, j)| f(av[i], bv[j]))
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Binary(kind, a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Square => Box::new(|x| x * x),
            Unary::Gelu => Box::new(gelu),
            Unary::Scale(c) => Box::new(move |x| c * x),
            Unary::Sqrt => Box::new(f64::sqrt),
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(Unary::Log, a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain(format!("sqrt of non-positive value {bad}")));
        }
        Ok(self.unary(Unary::Sqrt, a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let layout = matmul_layout(self.shape(a), self.shape(b))?;
        let MatmulLayout { m, k, n, .. } = layout;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let numel: usize = layout.out_shape.iter().product();
        let mut out = vec![0.0; numel];
        if layout.shared_rhs {
            let rows = av.len() / k;
            gemm(rows, k, n, av, k as isize, 1, bv, n as isize, 1, &mut out, false);
        } else {
            for (bi, &(ao, bo)) in layout.batches.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &av[ao..ao + m * k],
                    k as isize,
                    1,
                    &bv[bo..bo + k * n],
                    n as isize,
                    1,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(layout.out_shape, out),
            Op::MatMul(a, b),
            rg,
        ))
    }

    // ---- normalizations and reductions over the last axis -------------

    fn last_dim(&self, a: Var) -> (usize, usize) {
        let t = self.value(a);
        let c = *t.shape().last().unwrap();
        (t.numel() / c, c)
    }

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, c) = self.last_dim(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * c..(r + 1) * c];
            let mut s = 0.0;
            for (oj, &xj) in o.iter_mut().zip(xr) {
                *oj = (xj - mx).exp();
                s += *oj;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg)
    }

    /// Softmax along `axis` (any axis, moved to the end internally).
    pub fn softmax_axis(&mut self, a: Var, axis: isize) -> Result<Var> {
        let rank = self.shape(a).len();
        let ax = normalize_axis(axis, rank)?;
        if ax == rank - 1 {
            return Ok(self.softmax(a));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(ax, rank - 1);
        let t = self.permute(a, &perm)?;
        let s = self.softmax(t);
        self.permute(s, &perm)
    }

    fn row_logsumexp(x: &[f64], rows: usize, c: usize) -> Vec<f64> {
        (0..rows)
            .map(|r| {
                let xr = &x[r * c..(r + 1) * c];
                let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + xr.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect()
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (rows, c) = self.last_dim(a);
        let x = self.value(a).data();
        let lse = Self::row_logsumexp(x, rows, c);
        let out = x
            .iter()
            .enumerate()
            .map(|(i, v)| v - lse[i / c])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(a), rg)
    }

    /// Log-sum-exp over the last axis; the last axis is removed (a rank-1
    /// input yields shape `[1]`).
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let (rows, c) = self.last_dim(a);
        let lse = Self::row_logsumexp(self.value(a).data(), rows, c);
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, lse), Op::LogSumExp(a), rg)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, c) = self.last_dim(x);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(TensorError::Dimension(format!(
                "layer_norm affine params must have shape [{c}], got {:?} and {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xr = &xv[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, c) = self.last_dim(x);
        let xv = self.value(x).data();
        let norms: Vec<f64> = (0..rows)
            .map(|r| xv[r * c..(r + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if let Some(r) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(TensorError::Domain(format!("cannot normalize row {r} with norm {}", norms[r])));
        }
        let out = xv.iter().enumerate().map(|(i, v)| v / norms[i / c]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, norms }, rg))
    }

    // ---- structure ----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Dimension(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute(a, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(TensorError::Dimension("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&mut self, a: Var, axis: isize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ax = normalize_axis(axis, shape.len())?;
        let outer: usize = shape[..ax].iter().product();
        let len = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[ax] = 1;
        } else {
            out_shape.remove(ax);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::SumAxis { x: a, axis: ax },
            rg,
        ))
    }

    /// Selects rows of `a` viewed as `[numel / last, last]`; result `[rows.len(), last]`.
    pub fn index_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (nrows, c) = self.last_dim(a);
        if rows.is_empty() {
            return Err(TensorError::Contract("index_rows with no rows".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= nrows) {
            return Err(TensorError::Dimension(format!("row {r} out of range {nrows}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&x[r * c..(r + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::IndexRows {
                x: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Adds row `i` of `a` (`[m, C]`) into row `rows[i]` of a zero `[n, C]` output.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n: usize) -> Result<Var> {
        let (m, c) = self.last_dim(a);
        if rows.len() != m {
            return Err(TensorError::Dimension(format!(
                "scatter_rows: {} targets for {m} rows",
                rows.len()
            )));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Dimension(format!("row {r} out of range {n}")));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; n * c];
        for (i, &r) in rows.iter().enumerate() {
            out[r * c..(r + 1) * c]
                .iter_mut()
                .zip(&x[i * c..(i + 1) * c])
                .for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::ScatterRows {
                x: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Picks elements of the flattened tensor; result `[idx.len()]`.
    pub fn gather_flat(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a).data();
        if idx.is_empty() {
            return Err(TensorError::Contract("gather_flat with no indices".into()));
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(TensorError::Dimension(format!("index {i} out of range {}", x.len())));
        }
        let out = idx.iter().map(|&i| x[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::GatherFlat {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: isize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        let ax = normalize_axis(axis, base.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != ax && d != base[i])
            {
                return Err(TensorError::Dimension(format!(
                    "concat shapes {base:?} and {s:?} differ off axis {ax}"
                )));
            }
            total += s[ax];
        }
        let outer: usize = base[..ax].iter().product();
        let inner: usize = base[ax + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[ax];
                let x = self.value(v).data();
                out.extend_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[ax] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis: ax,
            },
            rg,
        ))
    }

    // ---- reverse sweep -------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    ///
    /// Leaf gradients add up across repeated calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..end).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let numel = |v: Var| nodes[v.0].value.numel();
        // Lazily allocated gradient buffer of an input, `None` if the input
        // does not need one.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel(v)]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let out_shape = node.value.shape();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let ma = source_index_map(out_shape, nodes[a.0].value.shape());
                let mb = source_index_map(out_shape, nodes[b.0].value.shape());
                let ia = |k: usize| ma.as_ref().map_or(k, |m| m[k]);
                let ib = |k: usize| mb.as_ref().map_or(k, |m| m[k]);
                if let Some(ga) = buf!(*a) {
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gk,
                            Binary::Mul => gk * bv[ib(k)],
                            Binary::Div => gk / bv[ib(k)],
                        };
                        ga[ia(k)] += d;
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * av[ia(k)],
                            Binary::Div => {
                                let y = bv[ib(k)];
                                -gk * av[ia(k)] / (y * y)
                            }
                        };
                        gb[ib(k)] += d;
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = nodes[a.0].value.data();
                let y = node.value.data();
                if let Some(ga) = buf!(*a) {
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Exp => y[k],
                            Unary::Log => 1.0 / x[k],
                            Unary::Square => 2.0 * x[k],
                            Unary::Gelu => gelu_grad(x[k]),
                            Unary::Scale(c) => *c,
                            Unary::Sqrt => 0.5 / y[k],
                        };
                        ga[k] += g[k] * d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let layout = matmul_layout(sa, sb).expect("validated in forward");
                let MatmulLayout { m, k, n, .. } = layout;
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = buf!(*a) {
                    if layout.shared_rhs {
                        let rows = av.len() / k;
                        // dA = dY · Bᵀ
                        gemm(rows, n, k, g, n as isize, 1, bv, 1, n as isize, ga, true);
                    } else {
                        for (bi, &(ao, bo)) in layout.batches.iter().enumerate() {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                n as isize,
                                1,
                                &bv[bo..bo + k * n],
                                1,
                                n as isize,
                                &mut ga[ao..ao + m * k],
                                true,
                            );
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    if layout.shared_rhs {
                        let rows = av.len() / k;
                        // dB = Aᵀ · dY
                        gemm(k, rows, n, av, 1, k as isize, g, n as isize, 1, gb, true);
                    } else {
                        for (bi, &(ao, bo)) in layout.batches.iter().enumerate() {
                            gemm(
                                k,
                                m,
                                n,
                                &av[ao..ao + m * k],
                                1,
                                k as isize,
                                &g[bi * m * n..(bi + 1) * m * n],
                                n as isize,
                                1,
                                &mut gb[bo..bo + k * n],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                if let Some(ga) = buf!(*a) {
                    for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                if let Some(ga) = buf!(*a) {
                    for r in 0..y.len() / c {
                        let gr = &g[r * c..(r + 1) * c];
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += gr[j] - y[r * c + j].exp() * gs;
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let x = nodes[a.0].value.data();
                let lse = node.value.data();
                let c = *nodes[a.0].value.shape().last().unwrap();
                if let Some(ga) = buf!(*a) {
                    for (k, gk) in ga.iter_mut().enumerate() {
                        let r = k / c;
                        *gk += g[r] * (x[k] - lse[r]).exp();
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = *node.value.shape().last().unwrap();
                let rows = xhat.len() / c;
                let gv = nodes[gain.0].value.data();
                if let Some(gg) = buf!(*gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = buf!(*bias) {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                if let Some(gx) = buf!(*x) {
                    let mut dh = vec![0.0; c];
                    for r in 0..rows {
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dh[j] = g[r * c + j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                if let Some(gx) = buf!(*x) {
                    for (r, &nr) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / nr;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Permute(a, perm) => {
                if let Some(ga) = buf!(*a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(g, node.value.shape(), &inv);
                    ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = nodes[x.0].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                if let Some(gx) = buf!(*x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::IndexRows { x, rows } => {
                let c = *node.value.shape().last().unwrap();
                if let Some(gx) = buf!(*x) {
                    for (i, &r) in rows.iter().enumerate() {
                        gx[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ScatterRows { x, rows } => {
                let c = *node.value.shape().last().unwrap();
                if let Some(gx) = buf!(*x) {
                    for (i, &r) in rows.iter().enumerate() {
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::GatherFlat { x, idx } => {
                if let Some(gx) = buf!(*x) {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut start = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if let Some(gv) = buf!(v) {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    start += len;
                }
            }
        }
    }
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Stride in the input for a unit step along each output axis.
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    let inner = rank - 1;
    let inner_len = out_shape[inner];
    let inner_step = step[inner];
    'outer: loop {
        for t in 0..inner_len {
            out.push(x[pos + t * inner_step]);
        }
        if rank == 1 {
            break;
        }
        let mut ax = inner - 1;
        loop {
            idx[ax] += 1;
            pos += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= step[ax] * idx[ax];
            idx[ax] = 0;
            if ax == 0 {
                break 'outer;
            }
            ax -= 1;
        }
    }
    out
}
