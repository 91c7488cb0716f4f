//! Parameter counting under gates and the log-ratio budget regularizer.
//!
//! Only gate-controllable block parameters are counted: the attention and
//! MLP projections plus block norm parameters. Embeddings, the final norm and
//! the LM head are excluded from both `T(s)` and `T_total`.

use crate::error::{DispError, Result};
use crate::model::{BlockGateVars, BlockGates, GateSlot, MlpKind, ModelSpec};
use crate::tensor::{lit, Graph, NormKind, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneBudget {
    /// Fraction of `t_total` to keep.
    pub p: f64,
    pub lambda: f64,
    pub t_total: u64,
}

impl PruneBudget {
    pub const DEFAULT_LAMBDA: f64 = 6.0;

    pub fn new(spec: &ModelSpec, p: f64, lambda: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(DispError::Config(format!("target ratio must be in (0, 1], got {p}")));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(DispError::Config(format!("lambda must be positive, got {lambda}")));
        }
        let t_total = total_params(spec);
        if t_total == 0 {
            return Err(DispError::Config("model has no gate-controllable parameters".into()));
        }
        Ok(PruneBudget { p, lambda, t_total })
    }

    /// `p · T_total`.
    pub fn target(&self) -> f64 {
        self.p * self.t_total as f64
    }
}

/// Parameter count of one block from its five gate widths.
pub fn block_params(spec: &ModelSpec, widths: [u64; 5]) -> u64 {
    let d = spec.d as u64;
    let [s1, s2, s3, s4, s5] = widths;
    let attn = 3 * s1 * d + d * s2;
    let norms = match spec.norm_kind {
        NormKind::LayerNorm => 2 * s1 + 2 * s3,
        NormKind::RmsNorm => s1 + s3,
    };
    let mlp = match spec.mlp_kind {
        MlpKind::Gated => 2 * s3 * s4 + s4 * s5,
        MlpKind::Standard => s3 * s4 + s4 * s5,
    };
    attn + norms + mlp
}

/// `T_total`: the count with every gate open.
pub fn total_params(spec: &ModelSpec) -> u64 {
    let w = spec.gate_dims().map(|n| n as u64);
    spec.n_layers as u64 * block_params(spec, w)
}

/// Exact `T(s)` for binary gates.
pub fn count_params_exact(spec: &ModelSpec, gates: &[BlockGates]) -> u64 {
    gates
        .iter()
        .map(|b| block_params(spec, GateSlot::ALL.map(|s| b.get(s).nnz() as u64)))
        .sum()
}

/// Differentiable `T(s)`; gradients flow into each gate's value node.
pub fn count_params<T: Real>(g: &Graph<T>, spec: &ModelSpec, gates: &[BlockGateVars]) -> Result<Var> {
    if gates.len() != spec.n_layers {
        return Err(DispError::contract(format!(
            "expected gates for {} blocks, got {}",
            spec.n_layers,
            gates.len()
        )));
    }
    let d = lit::<T>(spec.d as f64);
    let norm_w = lit::<T>(match spec.norm_kind {
        NormKind::LayerNorm => 2.0,
        NormKind::RmsNorm => 1.0,
    });
    let in_w = lit::<T>(match spec.mlp_kind {
        MlpKind::Gated => 2.0,
        MlpKind::Standard => 1.0,
    });
    let mut total: Option<Var> = None;
    for b in gates {
        let sig = GateSlot::ALL.map(|s| g.sum(b.get(s).var));
        let [s1, s2, s3, s4, s5] = sig;
        let attn = g.add(g.scale(s1, d * lit(3.0)), g.scale(s2, d))?;
        let norms = g.scale(g.add(s1, s3)?, norm_w);
        let mlp = g.add(g.scale(g.mul(s3, s4)?, in_w), g.mul(s4, s5)?)?;
        let block = g.add(g.add(attn, norms)?, mlp)?;
        total = Some(match total {
            Some(t) => g.add(t, block)?,
            None => block,
        });
    }
    total.ok_or_else(|| DispError::contract("model has no blocks"))
}

/// `R = |ln T − ln(p·T_total)|`, written as `max(u, −u)` so the gradient at
/// exactly on-budget is zero.
pub fn budget_regularizer<T: Real>(g: &Graph<T>, t: Var, budget: &PruneBudget) -> Result<Var> {
    let tv = g.item(t);
    if !(tv > T::zero()) {
        return Err(DispError::contract(format!(
            "parameter count must be positive for the budget regularizer, got {tv}"
        )));
    }
    let u = g.add_scalar(g.log(t), -lit::<T>(budget.target().ln()));
    g.maximum(u, g.neg(u))
}

/// Scalar form of [`budget_regularizer`].
pub fn regularizer_value(t: f64, budget: &PruneBudget) -> f64 {
    (t.ln() - budget.target().ln()).abs()
}

/// `lm + λ·R`.
pub fn total_objective<T: Real>(g: &Graph<T>, lm: Var, r: Var, lambda: f64) -> Result<Var> {
    g.add(lm, g.scale(r, lit(lambda)))
}
