//! Finite-difference gradient oracle.

use crate::error::Result;
use crate::tensor::{Graph, NodeId, Tensor};

/// Element-wise max of |a - n| / max(|a|, |n|, 1e-8).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences at `x`, returning the max relative error.
///
/// `f` receives a fresh graph and the node bound to `x` and must return the
/// scalar loss node; it must be deterministic.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let leaf = x.clone().with_requires_grad(true);
    let xid = g.param("fd.probe", &leaf);
    let loss = f(&mut g, xid)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xid)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    // Central differences, one element at a time.
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fp = eval_scalar(&mut f, &plus)?;
        let fm = eval_scalar(&mut f, &minus)?;
        numeric[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(max_rel_err(&analytic, &numeric))
}

fn eval_scalar<F>(f: &mut F, x: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xid = g.param("fd.probe", x);
    let loss = f(&mut g, xid)?;
    Ok(g.data(loss)[0])
}
