//! Central finite-difference checks of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of one [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest relative error per input tensor.
    pub max_rel_err: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err.iter().all(|e| *e < self.tolerance)
    }
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`.
///
/// Per element the error is `|a - n| / max(|a|, |n|, floor)` where `floor` is
/// 1e-3 of the largest gradient magnitude of that input, so entries that are
/// zero up to round-off do not dominate.
pub fn grad_check<F>(
    name: impl Into<String>,
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = xs
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let hi = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let lo = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((hi - lo) / (2.0 * eps));
        }
        let scale = grad
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        let err = grad
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max);
        max_rel_err.push(err);
    }
    Ok(GradCheckReport {
        name: name.into(),
        max_rel_err,
        tolerance: tol,
    })
}
