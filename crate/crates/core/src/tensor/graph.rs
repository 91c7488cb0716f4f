use std::cell::{Ref, RefCell};

use super::kernels::{self, mm_acc, mm_nt_acc, mm_tn_acc};
use super::{lit, Real, Tensor};
use crate::error::{DispError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::LayerNorm => "layernorm",
            NormKind::RmsNorm => "rmsnorm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layernorm" => Ok(NormKind::LayerNorm),
            "rmsnorm" => Ok(NormKind::RmsNorm),
            other => Err(DispError::Config(format!("unknown norm kind `{other}`"))),
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Silu(Var),
    Log(Var),
    Exp(Var),
    Maximum(Var, Var),
    Softmax {
        x: Var,
    },
    Norm {
        x: Var,
        gain: Var,
        bias: Option<Var>,
        active: Vec<usize>,
        kind: NormKind,
        xhat: Vec<T>,
        inv: Vec<T>,
    },
    IndexSelect {
        x: Var,
        ind: Vec<usize>,
    },
    IndexAdd {
        a: Var,
        b: Var,
        ind: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in execution order; `backward` visits each node once
/// in reverse order. Gradients accumulate across repeated `backward` calls
/// until [`Graph::zero_grad`].
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf; never accumulates gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// First element of the node's value; intended for scalar nodes.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    /// Number of nodes currently holding a gradient buffer.
    pub fn grad_buffer_count(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| n.grad.is_some()).count()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    // ----- linear algebra -------------------------------------------------

    /// `[m×k] · [k×n]`. A zero-width contraction yields zeros.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DispError::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.nodes.borrow();
            mm_acc(&mut out, nodes[a.0].value.data(), nodes[b.0].value.data(), m, k, n);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Batched product of `[B×m×k]` with `[B×k×n]` (or `[B×n×k]` when `trans_b`).
    pub fn batch_matmul(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || (!trans_b && sa[2] != sb[1])
            || (trans_b && sa[2] != sb[2]);
        if bad {
            return Err(DispError::dim("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let nodes = self.nodes.borrow();
            let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            for i in 0..batch {
                let o = &mut out[i * m * n..(i + 1) * m * n];
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                if trans_b {
                    mm_nt_acc(o, ai, bi, m, n, k);
                } else {
                    mm_acc(o, ai, bi, m, k, n);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(DispError::dim(name, ta.shape(), tb.shape()));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes.borrow()[x.0].value.map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum. Ties split the gradient evenly between inputs.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| x.max(y), Op::Maximum(a, b))
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tv) = (&nodes[x.0].value, &nodes[v.0].value);
            let d = tx.last_dim();
            if tv.len() != d {
                return Err(DispError::dim(name, tx.shape(), tv.shape()));
            }
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, tv.data()[i % d]))
                .collect();
            Tensor::new(tx.shape().to_vec(), data)?
        };
        let rg = self.rg(&[x, v]);
        Ok(self.push(value, op, rg))
    }

    /// `x[.., d] + v[d]`
    pub fn add_row(&self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, v, |a, b| a + b, Op::AddRow(x, v))
    }

    /// `x[.., d] ⊙ v[d]`
    pub fn mul_row(&self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, v, |a, b| a * b, Op::MulRow(x, v))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        self.unary(x, |a| a + c, Op::AddScalar(x))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |a| a.tanh(), Op::Tanh(x))
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, kernels::silu, Op::Silu(x))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, |a| a.ln(), Op::Log(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |a| a.exp(), Op::Exp(x))
    }

    /// Value passes through; no gradient flows back.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let value = self.value(x);
        self.push(value, Op::Leaf, false)
    }

    // ----- reductions and normalizations --------------------------------

    /// Softmax over the last dimension with max subtraction.
    ///
    /// With `causal`, the trailing two axes are read as `[query, key]` and
    /// keys after the query position get probability zero (equivalent to an
    /// additive `-inf` mask before the softmax).
    pub fn softmax(&self, x: Var, causal: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.last_dim();
            if d == 0 {
                return Err(DispError::dim("softmax", t.shape(), &[1]));
            }
            let nq = if causal {
                let s = t.shape();
                if s.len() < 2 || s[s.len() - 2] != d {
                    return Err(DispError::dim("causal softmax", s, &[d, d]));
                }
                d
            } else {
                1
            };
            let mut out = vec![T::zero(); t.len()];
            for (r, (row, orow)) in t.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
                let limit = if causal { r % nq + 1 } else { d };
                let mx = row[..limit].iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..limit {
                    let e = (row[j] - mx).exp();
                    orow[j] = e;
                    z = z + e;
                }
                for o in &mut orow[..limit] {
                    *o = *o / z;
                }
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Normalization over the last dimension restricted to `mask`.
    ///
    /// Statistics use only active coordinates; inactive outputs are exactly
    /// zero. With an all-true mask this is ordinary LayerNorm/RMSNorm.
    /// `bias` is ignored for RMS normalization.
    pub fn masked_norm(
        &self,
        x: Var,
        mask: &[bool],
        gain: Var,
        bias: Option<Var>,
        kind: NormKind,
        eps: T,
    ) -> Result<Var> {
        let bias = match kind {
            NormKind::LayerNorm => bias,
            NormKind::RmsNorm => None,
        };
        let (value, xhat, inv, active) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.last_dim();
            if mask.len() != d {
                return Err(DispError::dim("masked_norm mask", t.shape(), &[mask.len()]));
            }
            let g = nodes[gain.0].value.data();
            if g.len() != d {
                return Err(DispError::dim("masked_norm gain", t.shape(), &[g.len()]));
            }
            let b = match bias {
                Some(b) => {
                    let bd = nodes[b.0].value.data();
                    if bd.len() != d {
                        return Err(DispError::dim("masked_norm bias", t.shape(), &[bd.len()]));
                    }
                    Some(bd)
                }
                None => None,
            };
            let active: Vec<usize> = (0..d).filter(|&j| mask[j]).collect();
            let m = active.len();
            let rows = t.rows();
            let mut out = vec![T::zero(); t.len()];
            let mut xhat = vec![T::zero(); rows * m];
            let mut inv = vec![T::zero(); rows];
            if m > 0 {
                let mf = T::from_usize(m).unwrap();
                for r in 0..rows {
                    let row = &t.data()[r * d..(r + 1) * d];
                    let (mean, ms) = match kind {
                        NormKind::LayerNorm => {
                            let mean = active.iter().map(|&j| row[j]).sum::<T>() / mf;
                            let var = active
                                .iter()
                                .map(|&j| (row[j] - mean) * (row[j] - mean))
                                .sum::<T>()
                                / mf;
                            (mean, var)
                        }
                        NormKind::RmsNorm => {
                            let ms = active.iter().map(|&j| row[j] * row[j]).sum::<T>() / mf;
                            (T::zero(), ms)
                        }
                    };
                    let iv = T::one() / (ms + eps).sqrt();
                    inv[r] = iv;
                    for (a, &j) in active.iter().enumerate() {
                        let h = (row[j] - mean) * iv;
                        xhat[r * m + a] = h;
                        let y = h * g[j];
                        out[r * d + j] = match b {
                            Some(b) => y + b[j],
                            None => y,
                        };
                    }
                }
            }
            (Tensor::new(t.shape().to_vec(), out)?, xhat, inv, active)
        };
        let mut deps = vec![x, gain];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gain,
                bias,
                active,
                kind,
                xhat,
                inv,
            },
            rg,
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let (s, n) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.sum(), nodes[x.0].value.len())
        };
        let m = if n == 0 {
            T::zero()
        } else {
            s / T::from_usize(n).unwrap()
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean token cross-entropy (natural log) of `logits[.., V]` rows against `targets`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            let v = t.last_dim();
            let rows = t.rows();
            if rows != targets.len() || v == 0 {
                return Err(DispError::dim("cross_entropy", t.shape(), &[targets.len()]));
            }
            if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
                return Err(DispError::contract(format!(
                    "target id {bad} out of range for vocabulary {v}"
                )));
            }
            let mut probs = vec![T::zero(); t.len()];
            let mut total = T::zero();
            for r in 0..rows {
                let row = &t.data()[r * v..(r + 1) * v];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (l - mx).exp();
                    z = z + *p;
                }
                for p in &mut probs[r * v..(r + 1) * v] {
                    *p = *p / z;
                }
                total = total + (z.ln() + mx - row[targets[r]]);
            }
            let loss = if rows == 0 {
                T::zero()
            } else {
                total / T::from_usize(rows).unwrap()
            };
            (loss, probs)
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----- indexing and layout -------------------------------------------

    /// Gathers columns `ind` of the last dimension.
    pub fn index_select(&self, x: Var, ind: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.last_dim();
            if let Some(&bad) = ind.iter().find(|&&j| j >= d) {
                return Err(DispError::contract(format!(
                    "index_select: index {bad} out of range for width {d}"
                )));
            }
            let rows = t.rows();
            let w = ind.len();
            let mut out = Vec::with_capacity(rows * w);
            for r in 0..rows {
                let row = &t.data()[r * d..(r + 1) * d];
                out.extend(ind.iter().map(|&j| row[j]));
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = w;
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::IndexSelect {
                x,
                ind: ind.to_vec(),
            },
            rg,
        ))
    }

    /// Returns `a` with `b[.., j]` added at column `ind[j]`.
    pub fn index_add(&self, a: Var, b: Var, ind: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let d = ta.last_dim();
            if tb.last_dim() != ind.len() || ta.rows() != tb.rows() {
                return Err(DispError::dim("index_add", ta.shape(), tb.shape()));
            }
            if let Some(&bad) = ind.iter().find(|&&j| j >= d) {
                return Err(DispError::contract(format!(
                    "index_add: index {bad} out of range for width {d}"
                )));
            }
            let mut out = ta.data().to_vec();
            let w = ind.len();
            for r in 0..ta.rows() {
                for (c, &j) in ind.iter().enumerate() {
                    out[r * d + j] = out[r * d + j] + tb.data()[r * w + c];
                }
            }
            Tensor::new(ta.shape().to_vec(), out)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::IndexAdd {
                a,
                b,
                ind: ind.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers rows of a 2-D tensor (embedding lookup); rows may repeat.
    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 {
                return Err(DispError::dim("gather_rows", t.shape(), &[rows.len()]));
            }
            let (n, d) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                if r >= n {
                    return Err(DispError::contract(format!(
                        "gather_rows: row {r} out of range for {n} rows"
                    )));
                }
                out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
            }
            Tensor::new(vec![rows.len(), d], out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let rows = first[0];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.len() != 2 || s[0] != rows {
                    return Err(DispError::dim("concat_cols", &first, s));
                }
                widths.push(s[1]);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::new(vec![rows, total], out)?
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`
    pub fn split_heads(&self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.last_dim();
            if t.rows() != batch * seq || heads == 0 || d % heads != 0 {
                return Err(DispError::dim("split_heads", t.shape(), &[batch, seq, heads]));
            }
            let dh = d / heads;
            let mut out = vec![T::zero(); t.len()];
            for b in 0..batch {
                for s in 0..seq {
                    for h in 0..heads {
                        let src = (b * seq + s) * d + h * dh;
                        let dst = ((b * heads + h) * seq + s) * dh;
                        out[dst..dst + dh].copy_from_slice(&t.data()[src..src + dh]);
                    }
                }
            }
            Tensor::new(vec![batch * heads, seq, dh], out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
                return Err(DispError::dim("merge_heads", s, &[batch * heads, seq]));
            }
            let dh = s[2];
            let d = dh * heads;
            let mut out = vec![T::zero(); t.len()];
            for b in 0..batch {
                for q in 0..seq {
                    for h in 0..heads {
                        let dst = (b * seq + q) * d + h * dh;
                        let src = ((b * heads + h) * seq + q) * dh;
                        out[dst..dst + dh].copy_from_slice(&t.data()[src..src + dh]);
                    }
                }
            }
            Tensor::new(vec![batch * seq, d], out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let grads = {
            let nodes = self.nodes.borrow();
            if nodes[loss.0].value.len() != 1 {
                return Err(DispError::Usage(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    nodes[loss.0].value.shape()
                )));
            }
            let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
            if nodes[loss.0].requires_grad {
                grads[loss.0] = Some(vec![T::one()]);
            }
            for i in (0..=loss.0).rev() {
                let node = &nodes[i];
                if !node.requires_grad {
                    continue;
                }
                let Some(g) = grads[i].take() else { continue };
                propagate(&nodes, &mut grads, node, &g);
                grads[i] = Some(g);
            }
            grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (node, g) in nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g) {
                        *e = *e + v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn accumulate_map<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    g: &[T],
    f: impl Fn(usize, T) -> T,
) {
    if let Some(s) = slot(nodes, grads, v) {
        for (i, (o, &gv)) in s.iter_mut().zip(g).enumerate() {
            *o = *o + f(i, gv);
        }
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(s) = slot(nodes, grads, a) {
                mm_nt_acc(s, g, val(b), m, k, n);
            }
            if let Some(s) = slot(nodes, grads, b) {
                mm_tn_acc(s, val(a), g, m, k, n);
            }
        }
        &Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (ad, bd) = (val(a), val(b));
            if let Some(s) = slot(nodes, grads, a) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let si = &mut s[i * m * k..(i + 1) * m * k];
                    if trans_b {
                        // out = a · bᵀ with b [n×k]: da = g · b
                        mm_acc(si, gi, bi, m, n, k);
                    } else {
                        mm_nt_acc(si, gi, bi, m, k, n);
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, b) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let si = &mut s[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // db [n×k] = gᵀ · a
                        mm_tn_acc(si, gi, ai, m, n, k);
                    } else {
                        mm_tn_acc(si, ai, gi, m, k, n);
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            accumulate_map(nodes, grads, a, g, |_, gv| gv);
            accumulate_map(nodes, grads, b, g, |_, gv| gv);
        }
        &Op::Sub(a, b) => {
            accumulate_map(nodes, grads, a, g, |_, gv| gv);
            accumulate_map(nodes, grads, b, g, |_, gv| -gv);
        }
        &Op::Mul(a, b) => {
            let (ad, bd) = (val(a), val(b));
            accumulate_map(nodes, grads, a, g, |i, gv| gv * bd[i]);
            accumulate_map(nodes, grads, b, g, |i, gv| gv * ad[i]);
        }
        &Op::Maximum(a, b) => {
            let (ad, bd) = (val(a), val(b));
            let half = lit::<T>(0.5);
            let share = |x: T, y: T| {
                if x > y {
                    T::one()
                } else if x == y {
                    half
                } else {
                    T::zero()
                }
            };
            accumulate_map(nodes, grads, a, g, |i, gv| gv * share(ad[i], bd[i]));
            accumulate_map(nodes, grads, b, g, |i, gv| gv * share(bd[i], ad[i]));
        }
        &Op::AddRow(x, v) => {
            accumulate_map(nodes, grads, x, g, |_, gv| gv);
            if let Some(s) = slot(nodes, grads, v) {
                let d = s.len();
                for (i, &gv) in g.iter().enumerate() {
                    s[i % d] = s[i % d] + gv;
                }
            }
        }
        &Op::MulRow(x, v) => {
            let (xd, vd) = (val(x), val(v));
            let d = vd.len();
            accumulate_map(nodes, grads, x, g, |i, gv| gv * vd[i % d]);
            if let Some(s) = slot(nodes, grads, v) {
                for (i, &gv) in g.iter().enumerate() {
                    s[i % d] = s[i % d] + gv * xd[i];
                }
            }
        }
        &Op::Scale(x, c) => accumulate_map(nodes, grads, x, g, |_, gv| gv * c),
        &Op::AddScalar(x) => accumulate_map(nodes, grads, x, g, |_, gv| gv),
        &Op::Sigmoid(x) => {
            let y = node.value.data();
            accumulate_map(nodes, grads, x, g, |i, gv| gv * y[i] * (T::one() - y[i]));
        }
        &Op::Tanh(x) => {
            let y = node.value.data();
            accumulate_map(nodes, grads, x, g, |i, gv| gv * (T::one() - y[i] * y[i]));
        }
        &Op::Gelu(x) => {
            let xd = val(x);
            accumulate_map(nodes, grads, x, g, |i, gv| gv * kernels::gelu_grad(xd[i]));
        }
        &Op::Silu(x) => {
            let xd = val(x);
            accumulate_map(nodes, grads, x, g, |i, gv| gv * kernels::silu_grad(xd[i]));
        }
        &Op::Log(x) => {
            let xd = val(x);
            accumulate_map(nodes, grads, x, g, |i, gv| gv / xd[i]);
        }
        &Op::Exp(x) => {
            let y = node.value.data();
            accumulate_map(nodes, grads, x, g, |i, gv| gv * y[i]);
        }
        &Op::Softmax { x } => {
            let y = node.value.data();
            let d = node.value.last_dim();
            if let Some(s) = slot(nodes, grads, x) {
                for ((yr, gr), sr) in y.chunks(d).zip(g.chunks(d)).zip(s.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        sr[j] = sr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Norm {
            x,
            gain,
            bias,
            active,
            kind,
            xhat,
            inv,
        } => {
            let m = active.len();
            if m == 0 {
                // zero-width: reachable inputs still receive (zero) gradients
                for v in [Some(*x), Some(*gain), *bias].into_iter().flatten() {
                    slot(nodes, grads, v);
                }
                return;
            }
            let d = node.value.last_dim();
            let rows = node.value.rows();
            let gd = val(*gain);
            let mf = T::from_usize(m).unwrap();
            if let Some(s) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for (a, &j) in active.iter().enumerate() {
                        s[j] = s[j] + g[r * d + j] * xhat[r * m + a];
                    }
                }
            }
            if let Some(b) = bias {
                if let Some(s) = slot(nodes, grads, *b) {
                    for r in 0..rows {
                        for &j in active {
                            s[j] = s[j] + g[r * d + j];
                        }
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *x) {
                let mut dxh = vec![T::zero(); m];
                for r in 0..rows {
                    for (a, &j) in active.iter().enumerate() {
                        dxh[a] = g[r * d + j] * gd[j];
                    }
                    let xh = &xhat[r * m..(r + 1) * m];
                    let dot: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    match kind {
                        NormKind::LayerNorm => {
                            let total: T = dxh.iter().copied().sum();
                            for (a, &j) in active.iter().enumerate() {
                                let v = (mf * dxh[a] - total - xh[a] * dot) * inv[r] / mf;
                                s[r * d + j] = s[r * d + j] + v;
                            }
                        }
                        NormKind::RmsNorm => {
                            for (a, &j) in active.iter().enumerate() {
                                let v = (dxh[a] - xh[a] * dot / mf) * inv[r];
                                s[r * d + j] = s[r * d + j] + v;
                            }
                        }
                    }
                }
            }
        }
        Op::IndexSelect { x, ind } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let d = nodes[x.0].value.last_dim();
                let w = ind.len();
                for r in 0..node.value.rows() {
                    for (c, &j) in ind.iter().enumerate() {
                        s[r * d + j] = s[r * d + j] + g[r * w + c];
                    }
                }
            }
        }
        Op::IndexAdd { a, b, ind } => {
            accumulate_map(nodes, grads, *a, g, |_, gv| gv);
            if let Some(s) = slot(nodes, grads, *b) {
                let d = node.value.last_dim();
                let w = ind.len();
                for r in 0..node.value.rows() {
                    for (c, &j) in ind.iter().enumerate() {
                        s[r * w + c] = s[r * w + c] + g[r * d + j];
                    }
                }
            }
        }
        Op::GatherRows { x, rows } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let d = node.value.last_dim();
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        s[r * d + c] = s[r * d + c] + g[i * d + c];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.last_dim();
            let rows = node.value.rows();
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].value.last_dim();
                if let Some(s) = slot(nodes, grads, *p) {
                    for r in 0..rows {
                        for c in 0..w {
                            s[r * w + c] = s[r * w + c] + g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        &Op::SplitHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            if let Some(s) = slot(nodes, grads, x) {
                let dh = node.value.last_dim();
                let d = dh * heads;
                for b in 0..batch {
                    for q in 0..seq {
                        for h in 0..heads {
                            let src = (b * seq + q) * d + h * dh;
                            let dst = ((b * heads + h) * seq + q) * dh;
                            for e in 0..dh {
                                s[src + e] = s[src + e] + g[dst + e];
                            }
                        }
                    }
                }
            }
        }
        &Op::MergeHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            if let Some(s) = slot(nodes, grads, x) {
                let d = node.value.last_dim();
                let dh = d / heads;
                for b in 0..batch {
                    for q in 0..seq {
                        for h in 0..heads {
                            let dst = (b * seq + q) * d + h * dh;
                            let src = ((b * heads + h) * seq + q) * dh;
                            for e in 0..dh {
                                s[src + e] = s[src + e] + g[dst + e];
                            }
                        }
                    }
                }
            }
        }
        &Op::Reshape(x) => accumulate_map(nodes, grads, x, g, |_, gv| gv),
        &Op::Sum(x) => accumulate_map(nodes, grads, x, &vec![g[0]; nodes[x.0].value.len()], |_, gv| gv),
        &Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            if n > 0 {
                let gv = g[0] / T::from_usize(n).unwrap();
                accumulate_map(nodes, grads, x, &vec![gv; n], |_, v| v);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if let Some(s) = slot(nodes, grads, *logits) {
                let v = nodes[logits.0].value.last_dim();
                let rows = targets.len();
                let scale = g[0] / T::from_usize(rows.max(1)).unwrap();
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        s[r * v + j] = s[r * v + j] + scale * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
    }
}
