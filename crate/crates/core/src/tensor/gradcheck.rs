//! Central finite-difference gradient checking in 64-bit precision.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all inputs.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub evaluations: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err.is_finite() && self.rel_err <= tol
    }
}

/// Compares analytic gradients of a scalar function against central
/// differences with step `h`.
///
/// `build` receives a fresh graph and one trainable leaf per input tensor
/// and must return a scalar node.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&g, &vars)?;
        g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&g, &vars)?;
        Ok(g.item(loss))
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let (mut diff_sq, mut a_sq, mut n_sq, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    let mut evaluations = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].len() {
            let x0 = inputs[t].data()[i];
            work[t].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[t].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[t].data_mut()[i] = x0;
            evaluations += 2;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[i];
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
    }
    let denom = a_sq.sqrt().max(n_sq.sqrt());
    let rel_err = if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom };
    Ok(GradcheckReport {
        rel_err,
        max_abs_err: max_abs,
        evaluations,
    })
}

/// Reduces `out` to a scalar by contracting with a fixed weight tensor,
/// so every output coordinate contributes a distinct gradient.
pub fn contract(g: &Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let shape = g.shape(out);
    let w = g.constant(weights.clone().reshape(&shape)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}
