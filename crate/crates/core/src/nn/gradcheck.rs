//! Central finite-difference checks of reverse-mode gradients.

use ndarray::Array2;

use super::graph::{Graph, Var};
use super::params::{ParameterStore, Session};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Relative errors use max(|analytic|, |numeric|, REL_FLOOR) as denominator so that
/// gradients that are truly zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
    /// Location of the worst entry, e.g. `input 1 [2, 0]`.
    pub worst: String,
}

impl GradReport {
    fn new() -> Self {
        GradReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            n_checked: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, loc: impl FnOnce() -> String) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.n_checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = loc();
        }
    }
}

/// Fixed projection weights turning a non-scalar output into a scalar.
fn projection(shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |(i, j)| ((i * shape.1 + j + 1) as f64 * 1.3).cos() + 0.25)
}

fn to_scalar(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out);
    if shape == (1, 1) {
        return Ok(out);
    }
    let w = g.mul_const(out, projection(shape))?;
    g.sum(w)
}

fn scalar_value(g: &Graph, v: Var) -> Result<f64> {
    let x = g.value(v)[[0, 0]];
    if !x.is_finite() {
        return Err(Error::Numeric("grad_check objective".into()));
    }
    Ok(x)
}

/// Entries of an `len`-element tensor to probe: all of them, or `limit` evenly spaced.
fn probe_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k + (len / k) / 2).collect(),
        _ => (0..len).collect(),
    }
}

/// Checks d f / d inputs, where `f` builds a graph over leaf inputs.
pub fn grad_check<F>(inputs: &[Array2<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array2<f64>]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = vals.iter().map(|v| g.param(v.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let s = to_scalar(&mut g, out)?;
        Ok((g, vars, s))
    };
    let (mut g, vars, s) = eval(inputs)?;
    g.backward(s)?;
    let analytic: Vec<Array2<f64>> = vars.iter().map(|&v| g.grad(v)).collect();
    let mut report = GradReport::new();
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        let cols = grad.ncols();
        for idx in 0..grad.len() {
            let (i, j) = (idx / cols, idx % cols);
            let orig = work[k][[i, j]];
            work[k][[i, j]] = orig + FD_STEP;
            let (gp, _, sp) = eval(&work)?;
            let up = scalar_value(&gp, sp)?;
            work[k][[i, j]] = orig - FD_STEP;
            let (gm, _, sm) = eval(&work)?;
            let down = scalar_value(&gm, sm)?;
            work[k][[i, j]] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(grad[[i, j]], numeric, || format!("input {k} [{i}, {j}]"));
        }
    }
    Ok(report)
}

/// Checks gradients of every trainable parameter in `store` for the objective built
/// by `f`. `per_param` limits how many entries of each tensor are probed. Every
/// evaluation uses a fresh session with the same `training` flag and `seed`, so
/// dropout masks repeat exactly.
pub fn grad_check_store<F>(
    store: &ParameterStore,
    training: bool,
    seed: u64,
    per_param: Option<usize>,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let eval = |st: &ParameterStore| -> Result<f64> {
        let mut s = Session::new(st, training, seed);
        let out = f(&mut s)?;
        let v = to_scalar(&mut s.graph, out)?;
        scalar_value(&s.graph, v)
    };
    let analytic = {
        let mut s = Session::new(store, training, seed);
        let out = f(&mut s)?;
        let v = to_scalar(&mut s.graph, out)?;
        s.graph.backward(v)?;
        s.gradients()
    };
    let mut work = store.clone();
    let mut report = GradReport::new();
    for (name, grad) in &analytic {
        let cols = grad.ncols();
        for idx in probe_indices(grad.len(), per_param) {
            let (i, j) = (idx / cols, idx % cols);
            let orig = work.value(name)?[[i, j]];
            work.value_mut(name)?[[i, j]] = orig + FD_STEP;
            let up = eval(&work)?;
            work.value_mut(name)?[[i, j]] = orig - FD_STEP;
            let down = eval(&work)?;
            work.value_mut(name)?[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(grad[[i, j]], numeric, || format!("{name} [{i}, {j}]"));
        }
    }
    Ok(report)
}
