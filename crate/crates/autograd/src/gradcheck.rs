//! Central finite-difference check of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (parameter index, flat index) of the worst coordinate
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.value(loss).item()
}

fn analytic<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    grad_check_coords(f, params, h, &coords)
}

/// Checks only the listed `(parameter, flat index)` coordinates.
pub fn grad_check_coords<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Contract(format!("step must be positive, got {h}")));
    }
    let grads = analytic(&f, params)?;
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for &(p, i) in coords {
        if p >= params.len() || i >= params[p].numel() {
            return Err(TensorError::Dimension(format!("coordinate ({p}, {i}) out of range")));
        }
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let plus = eval(&f, &work)?;
        work[p].data_mut()[i] = orig - h;
        let minus = eval(&f, &work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = grads[p].data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error || report.coords_checked == 0 {
            report.max_rel_error = err;
            report.worst = (p, i);
        }
        report.coords_checked += 1;
    }
    Ok(report)
}
