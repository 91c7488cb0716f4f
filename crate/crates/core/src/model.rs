//! Decoder-only transformer with per-block selection gates.
//!
//! In masked (search) mode every block takes five gates:
//!
//! | gate | width  | role                    |
//! |------|--------|-------------------------|
//! | s1   | d      | attention input         |
//! | s2   | d      | attention output        |
//! | s3   | d      | MLP input               |
//! | s4   | d_mid  | MLP hidden              |
//! | s5   | d      | MLP output              |
//!
//! Input gates mask both the normalization statistics and the normalized
//! features. Output gates zero the inactive coordinates of the block update,
//! so the plain residual addition only writes where the gate is open.

use std::fmt;

use crate::error::{DispError, Result};
use crate::rng::{normal_tensor, stream_rng, Stream};
use crate::selection::GateVector;
use crate::tensor::{lit, Graph, NormKind, Real, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MlpKind {
    /// `(silu(X W1) ⊙ (X W2)) W3`
    Gated,
    /// `gelu(X W1) W3`
    Standard,
}

impl MlpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MlpKind::Gated => "gated",
            MlpKind::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(MlpKind::Gated),
            "standard" => Ok(MlpKind::Standard),
            other => Err(DispError::Config(format!("unknown mlp kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mid: usize,
    pub mlp_kind: MlpKind,
    pub norm_kind: NormKind,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl ModelSpec {
    /// Byte-level benchmark model used by the search experiments.
    pub fn tiny() -> Self {
        ModelSpec {
            d: 32,
            n_layers: 4,
            n_heads: 4,
            d_mid: 64,
            mlp_kind: MlpKind::Gated,
            norm_kind: NormKind::LayerNorm,
            vocab_size: crate::data::VOCAB_SIZE,
            max_seq_len: 64,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mid", self.d_mid),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(DispError::Config(format!("{name} must be at least 1")));
        }
        if self.d % self.n_heads != 0 {
            return Err(DispError::Config(format!(
                "n_heads {} must divide d {}",
                self.n_heads, self.d
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn has_norm_bias(&self) -> bool {
        self.norm_kind == NormKind::LayerNorm
    }

    /// Width of each of the five gates of a block.
    pub fn gate_dims(&self) -> [usize; 5] {
        [self.d, self.d, self.d, self.d_mid, self.d]
    }

    /// Total number of gate coordinates over all blocks.
    pub fn gate_count(&self) -> usize {
        self.n_layers * (4 * self.d + self.d_mid)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d={} L={} h={} d_mid={} mlp={} norm={} V={} n={}",
            self.d,
            self.n_layers,
            self.n_heads,
            self.d_mid,
            self.mlp_kind.as_str(),
            self.norm_kind.as_str(),
            self.vocab_size,
            self.max_seq_len
        )
    }
}

/// Index of a gate within [`BlockGates`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GateSlot {
    AttnIn = 0,
    AttnOut = 1,
    MlpIn = 2,
    MlpMid = 3,
    MlpOut = 4,
}

impl GateSlot {
    pub const ALL: [GateSlot; 5] = [
        GateSlot::AttnIn,
        GateSlot::AttnOut,
        GateSlot::MlpIn,
        GateSlot::MlpMid,
        GateSlot::MlpOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateSlot::AttnIn => "s1",
            GateSlot::AttnOut => "s2",
            GateSlot::MlpIn => "s3",
            GateSlot::MlpMid => "s4",
            GateSlot::MlpOut => "s5",
        }
    }
}

/// The five gates of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGates {
    pub gates: [GateVector; 5],
}

impl BlockGates {
    pub fn ones(spec: &ModelSpec) -> Self {
        BlockGates {
            gates: spec.gate_dims().map(GateVector::ones),
        }
    }

    pub fn get(&self, slot: GateSlot) -> &GateVector {
        &self.gates[slot as usize]
    }

    pub fn get_mut(&mut self, slot: GateSlot) -> &mut GateVector {
        &mut self.gates[slot as usize]
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for (slot, (g, want)) in GateSlot::ALL.iter().zip(self.gates.iter().zip(spec.gate_dims())) {
            if g.dim() != want {
                return Err(DispError::contract(format!(
                    "gate {} has width {} but the model expects {want}",
                    slot.name(),
                    g.dim()
                )));
            }
        }
        Ok(())
    }

    /// s1 == s2 == s3 == s5 bitwise.
    pub fn is_constrained(&self) -> bool {
        let s1 = self.get(GateSlot::AttnIn).bits();
        [GateSlot::AttnOut, GateSlot::MlpIn, GateSlot::MlpOut]
            .iter()
            .all(|&s| self.get(s).bits() == s1)
    }
}

pub fn validate_gates(spec: &ModelSpec, gates: &[BlockGates]) -> Result<()> {
    if gates.len() != spec.n_layers {
        return Err(DispError::contract(format!(
            "expected gates for {} blocks, got {}",
            spec.n_layers,
            gates.len()
        )));
    }
    gates.iter().try_for_each(|g| g.validate(spec))
}

/// A gate placed on a graph: its 0/1 value node (which may carry a
/// straight-through gradient) plus the bits used for normalization masks.
#[derive(Clone, Debug)]
pub struct GateInput {
    pub var: Var,
    pub bits: Vec<bool>,
}

impl GateInput {
    pub fn constant<T: Real>(g: &Graph<T>, gate: &GateVector) -> Self {
        GateInput {
            var: g.constant(gate.to_tensor()),
            bits: gate.bits().to_vec(),
        }
    }

    pub fn from_var<T: Real>(g: &Graph<T>, var: Var) -> Self {
        let bits = GateVector::from_values(g.value_ref(var).data()).bits().to_vec();
        GateInput { var, bits }
    }
}

#[derive(Clone, Debug)]
pub struct BlockGateVars {
    pub slots: [GateInput; 5],
}

impl BlockGateVars {
    pub fn constant<T: Real>(g: &Graph<T>, gates: &BlockGates) -> Self {
        BlockGateVars {
            slots: std::array::from_fn(|i| GateInput::constant(g, &gates.gates[i])),
        }
    }

    pub fn get(&self, slot: GateSlot) -> &GateInput {
        &self.slots[slot as usize]
    }

    pub fn to_block_gates(&self) -> BlockGates {
        BlockGates {
            gates: std::array::from_fn(|i| GateVector::new(self.slots[i].bits.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub norm1_gain: Tensor<T>,
    pub norm1_bias: Option<Tensor<T>>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub norm2_gain: Tensor<T>,
    pub norm2_bias: Option<Tensor<T>>,
    pub w1: Tensor<T>,
    /// Present for gated MLPs only.
    pub w2: Option<Tensor<T>>,
    pub w3: Tensor<T>,
}

impl<T: Real> BlockWeights<T> {
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![("norm1.gain", &self.norm1_gain)];
        out.extend(self.norm1_bias.as_ref().map(|b| ("norm1.bias", b)));
        out.extend([("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]);
        out.push(("norm2.gain", &self.norm2_gain));
        out.extend(self.norm2_bias.as_ref().map(|b| ("norm2.bias", b)));
        out.push(("w1", &self.w1));
        out.extend(self.w2.as_ref().map(|w| ("w2", w)));
        out.push(("w3", &self.w3));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![("norm1.gain", &mut self.norm1_gain)];
        out.extend(self.norm1_bias.as_mut().map(|b| ("norm1.bias", b)));
        out.extend([
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]);
        out.push(("norm2.gain", &mut self.norm2_gain));
        out.extend(self.norm2_bias.as_mut().map(|b| ("norm2.bias", b)));
        out.push(("w1", &mut self.w1));
        out.extend(self.w2.as_mut().map(|w| ("w2", w)));
        out.push(("w3", &mut self.w3));
        out
    }
}

/// Full-width weights of the model being pruned.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel<T> {
    pub spec: ModelSpec,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Option<Tensor<T>>,
    /// `None` when the head is tied to the token embedding.
    pub head: Option<Tensor<T>>,
}

impl<T: Real> DenseModel<T> {
    /// GPT-2 style initialization: N(0, 0.02²), residual projections scaled
    /// by `1/√(2L)`, unit norm gains and zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, Stream::ModelInit, 0);
        let std = 0.02;
        let proj_std = std / ((2 * spec.n_layers) as f64).sqrt();
        let (d, m) = (spec.d, spec.d_mid);
        let bias = |n: usize| spec.has_norm_bias().then(|| Tensor::zeros(&[n]));
        let tok_emb = normal_tensor(&mut rng, &[spec.vocab_size, d], std);
        let pos_emb = normal_tensor(&mut rng, &[spec.max_seq_len, d], std);
        let blocks = (0..spec.n_layers)
            .map(|_| BlockWeights {
                norm1_gain: Tensor::full(&[d], T::one()),
                norm1_bias: bias(d),
                wq: normal_tensor(&mut rng, &[d, d], std),
                wk: normal_tensor(&mut rng, &[d, d], std),
                wv: normal_tensor(&mut rng, &[d, d], std),
                wo: normal_tensor(&mut rng, &[d, d], proj_std),
                norm2_gain: Tensor::full(&[d], T::one()),
                norm2_bias: bias(d),
                w1: normal_tensor(&mut rng, &[d, m], std),
                w2: (spec.mlp_kind == MlpKind::Gated).then(|| normal_tensor(&mut rng, &[d, m], std)),
                w3: normal_tensor(&mut rng, &[m, d], proj_std),
            })
            .collect();
        let head = (!spec.tie_embeddings).then(|| normal_tensor(&mut rng, &[d, spec.vocab_size], std));
        Ok(DenseModel {
            spec: spec.clone(),
            tok_emb,
            pos_emb,
            blocks,
            final_gain: Tensor::full(&[d], T::one()),
            final_bias: bias(d),
            head,
        })
    }

    /// Every weight tensor under its canonical checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_tensors().into_iter().map(|(n, t)| (format!("blocks.{l}.{n}"), t)));
        }
        out.push(("final_norm.gain".to_string(), &self.final_gain));
        out.extend(self.final_bias.as_ref().map(|b| ("final_norm.bias".to_string(), b)));
        out.extend(self.head.as_ref().map(|h| ("head".to_string(), h)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.named_tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{l}.{n}"), t)),
            );
        }
        out.push(("final_norm.gain".to_string(), &mut self.final_gain));
        out.extend(self.final_bias.as_mut().map(|b| ("final_norm.bias".to_string(), b)));
        out.extend(self.head.as_mut().map(|h| ("head".to_string(), h)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every weight on `g`, as trainable leaves or frozen constants.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> BoundModel {
        let put = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundModel {
            tok_emb: put(&self.tok_emb),
            pos_emb: put(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    norm1_gain: put(&b.norm1_gain),
                    norm1_bias: b.norm1_bias.as_ref().map(put),
                    wq: put(&b.wq),
                    wk: put(&b.wk),
                    wv: put(&b.wv),
                    wo: put(&b.wo),
                    norm2_gain: put(&b.norm2_gain),
                    norm2_bias: b.norm2_bias.as_ref().map(put),
                    w1: put(&b.w1),
                    w2: b.w2.as_ref().map(put),
                    w3: put(&b.w3),
                })
                .collect(),
            final_gain: put(&self.final_gain),
            final_bias: self.final_bias.as_ref().map(put),
            head: self.head.as_ref().map(put),
        }
    }

    /// Logits `[batch, seq, V]` without gradient tracking. `gates = None`
    /// runs the ungated dense model.
    pub fn logits(&self, tokens: &[usize], batch: usize, gates: Option<&[BlockGates]>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let gate_vars = match gates {
            Some(gs) => {
                validate_gates(&self.spec, gs)?;
                Some(gs.iter().map(|b| BlockGateVars::constant(&g, b)).collect::<Vec<_>>())
            }
            None => None,
        };
        let out = model_forward(&g, &self.spec, &bound, tokens, batch, gate_vars.as_deref())?;
        Ok(g.value(out))
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub norm1_gain: Var,
    pub norm1_bias: Option<Var>,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Option<Var>,
    pub w1: Var,
    pub w2: Option<Var>,
    pub w3: Var,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_gain: Var,
    pub final_bias: Option<Var>,
    pub head: Option<Var>,
}

impl BoundModel {
    /// Leaves in the same order as [`DenseModel::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.push(b.norm1_gain);
            out.extend(b.norm1_bias);
            out.extend([b.wq, b.wk, b.wv, b.wo, b.norm2_gain]);
            out.extend(b.norm2_bias);
            out.push(b.w1);
            out.extend(b.w2);
            out.push(b.w3);
        }
        out.push(self.final_gain);
        out.extend(self.final_bias);
        out.extend(self.head);
        out
    }
}

/// Multi-head causal self-attention on `[batch·seq, d]` projections.
pub fn causal_attention<T: Real>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let dh = g.shape(q)[1] / heads;
    let q = g.split_heads(q, batch, seq, heads)?;
    let k = g.split_heads(k, batch, seq, heads)?;
    let v = g.split_heads(v, batch, seq, heads)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::one() / lit::<T>(dh as f64).sqrt());
    let probs = g.softmax(scores, true)?;
    let ctx = g.batch_matmul(probs, v, false)?;
    g.merge_heads(ctx, batch, seq, heads)
}

fn gated_norm<T: Real>(
    g: &Graph<T>,
    x: Var,
    gate: Option<&GateInput>,
    gain: Var,
    bias: Option<Var>,
    kind: NormKind,
    d: usize,
) -> Result<Var> {
    let eps = lit(NORM_EPS);
    match gate {
        Some(s) => {
            let h = g.masked_norm(x, &s.bits, gain, bias, kind, eps)?;
            g.mul_row(h, s.var)
        }
        None => g.masked_norm(x, &vec![true; d], gain, bias, kind, eps),
    }
}

fn gate_mul<T: Real>(g: &Graph<T>, x: Var, gate: Option<&GateInput>) -> Result<Var> {
    match gate {
        Some(s) => g.mul_row(x, s.var),
        None => Ok(x),
    }
}

/// One transformer block on the full-width residual stream `x[batch·seq, d]`.
pub fn block_forward_masked<T: Real>(
    g: &Graph<T>,
    spec: &ModelSpec,
    w: &BoundBlock,
    x: Var,
    batch: usize,
    seq: usize,
    gates: Option<&BlockGateVars>,
) -> Result<Var> {
    let d = spec.d;
    let width = g.shape(x)[1];
    if width != d {
        return Err(DispError::contract(format!("block input width {width}, model width {d}")));
    }
    if let Some(gs) = gates {
        for (slot, want) in GateSlot::ALL.iter().zip(spec.gate_dims()) {
            if gs.get(*slot).bits.len() != want {
                return Err(DispError::contract(format!(
                    "gate {} has width {}, expected {want}",
                    slot.name(),
                    gs.get(*slot).bits.len()
                )));
            }
        }
    }
    let slot = |s: GateSlot| gates.map(|gs| gs.get(s));

    let h1 = gated_norm(g, x, slot(GateSlot::AttnIn), w.norm1_gain, w.norm1_bias, spec.norm_kind, d)?;
    let q = g.matmul(h1, w.wq)?;
    let k = g.matmul(h1, w.wk)?;
    let v = g.matmul(h1, w.wv)?;
    let ctx = causal_attention(g, q, k, v, batch, seq, spec.n_heads)?;
    let attn = g.matmul(ctx, w.wo)?;
    let attn = gate_mul(g, attn, slot(GateSlot::AttnOut))?;
    let x = g.add(x, attn)?;

    let h2 = gated_norm(g, x, slot(GateSlot::MlpIn), w.norm2_gain, w.norm2_bias, spec.norm_kind, d)?;
    let mid = slot(GateSlot::MlpMid);
    let hidden = match spec.mlp_kind {
        MlpKind::Gated => {
            let w2 = w
                .w2
                .ok_or_else(|| DispError::contract("gated MLP is missing W2"))?;
            let a = gate_mul(g, g.matmul(h2, w.w1)?, mid)?;
            let b = gate_mul(g, g.matmul(h2, w2)?, mid)?;
            g.mul(g.silu(a), b)?
        }
        MlpKind::Standard => {
            let a = gate_mul(g, g.matmul(h2, w.w1)?, mid)?;
            g.gelu(a)
        }
    };
    let hidden = gate_mul(g, hidden, mid)?;
    let mlp = g.matmul(hidden, w.w3)?;
    let mlp = gate_mul(g, mlp, slot(GateSlot::MlpOut))?;
    g.add(x, mlp)
}

/// Token + position embedding of `tokens` (`batch` rows of equal length).
pub fn embed<T: Real>(
    g: &Graph<T>,
    spec: &ModelSpec,
    bound: &BoundModel,
    tokens: &[usize],
    batch: usize,
) -> Result<(Var, usize)> {
    if batch == 0 || tokens.len() % batch != 0 {
        return Err(DispError::contract(format!(
            "{} tokens do not split into {batch} equal rows",
            tokens.len()
        )));
    }
    let seq = tokens.len() / batch;
    if seq == 0 || seq > spec.max_seq_len {
        return Err(DispError::contract(format!(
            "sequence length {seq} outside 1..={}",
            spec.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= spec.vocab_size) {
        return Err(DispError::contract(format!(
            "token id {bad} out of range for vocabulary {}",
            spec.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq).collect();
    let tok = g.gather_rows(bound.tok_emb, tokens)?;
    let pos = g.gather_rows(bound.pos_emb, &positions)?;
    Ok((g.add(tok, pos)?, seq))
}

/// Final ungated norm followed by the LM head; returns `[batch, seq, V]`.
pub fn lm_head<T: Real>(
    g: &Graph<T>,
    spec: &ModelSpec,
    bound: &BoundModel,
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let h = g.masked_norm(
        x,
        &vec![true; spec.d],
        bound.final_gain,
        bound.final_bias,
        spec.norm_kind,
        lit(NORM_EPS),
    )?;
    let logits = match bound.head {
        Some(head) => g.matmul(h, head)?,
        None => {
            let rows = batch * seq;
            let h3 = g.reshape(h, &[1, rows, spec.d])?;
            let emb = g.reshape(bound.tok_emb, &[1, spec.vocab_size, spec.d])?;
            g.batch_matmul(h3, emb, true)?
        }
    };
    g.reshape(logits, &[batch, seq, spec.vocab_size])
}

/// Causal next-token logits `[batch, seq, V]`. `gates = None` is the dense model.
pub fn model_forward<T: Real>(
    g: &Graph<T>,
    spec: &ModelSpec,
    bound: &BoundModel,
    tokens: &[usize],
    batch: usize,
    gates: Option<&[BlockGateVars]>,
) -> Result<Var> {
    if let Some(gs) = gates {
        if gs.len() != spec.n_layers {
            return Err(DispError::contract(format!(
                "expected gates for {} blocks, got {}",
                spec.n_layers,
                gs.len()
            )));
        }
    }
    let (mut x, seq) = embed(g, spec, bound, tokens, batch)?;
    for (l, w) in bound.blocks.iter().enumerate() {
        x = block_forward_masked(g, spec, w, x, batch, seq, gates.map(|gs| &gs[l]))?;
    }
    lm_head(g, spec, bound, x, batch, seq)
}

/// Mean next-token cross-entropy (natural log).
pub fn lm_loss<T: Real>(g: &Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

#[cfg(test)]
mod tests;
