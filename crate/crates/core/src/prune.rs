//! Gate finalization, weight extraction and pruned inference.
//!
//! A pruned block keeps the residual stream at full width `d`. Each layer
//! gathers its input coordinates, runs on sliced weights and scatter-adds its
//! output back into the residual:
//!
//! ```text
//! x̂ = norm(x[Ind₁]);  x[Ind₂] += attn(x̂ W̃q, x̂ W̃k, x̂ W̃v) W̃o
//! x̂ = norm(x[Ind₃]);  x[Ind₅] += mlp(x̂; W̃₁, W̃₂, W̃₃)
//! ```

use rand::Rng;

use crate::budget::{block_params, count_params_exact, PruneBudget};
use crate::data::LanguageModel;
use crate::error::{DispError, Result};
use crate::hypernet::{latent_range, HyperNet};
use crate::model::{
    block_forward_masked, causal_attention, validate_gates, BlockGateVars, BlockGates, DenseModel,
    GateSlot, MlpKind, ModelSpec, NORM_EPS,
};
use crate::reinmax::ReinMaxConfig;
use crate::rng::{normal_tensor, stream_rng, Stream};
use crate::selection::{index_add, index_select, slice_weight, GateVector, IndexSet};
use crate::tensor::{lit, Graph, Real, Tensor, Var};

/// Binary gates from trained latents by `π₀ ≥ 0.5`, optionally pushed to the
/// budget by flipping the least confident bits.
pub fn finalize_gates<T: Real>(
    spec: &ModelSpec,
    net: &HyperNet<T>,
    cfg: &ReinMaxConfig,
    tied: bool,
    enforce: Option<&PruneBudget>,
) -> Result<Vec<BlockGates>> {
    let latents: Vec<Vec<f64>> = net
        .latents()?
        .iter()
        .map(|t| t.data().iter().map(|x| x.to_f64().unwrap()).collect())
        .collect();
    finalize_from_latents(spec, &latents, cfg, tied, enforce)
}

/// As [`finalize_gates`] for raw per-block latent vectors of width `4d + d_mid`.
/// With `tied`, s2, s3 and s5 reuse the s1 latents.
pub fn finalize_from_latents(
    spec: &ModelSpec,
    latents: &[Vec<f64>],
    cfg: &ReinMaxConfig,
    tied: bool,
    enforce: Option<&PruneBudget>,
) -> Result<Vec<BlockGates>> {
    cfg.validate()?;
    if latents.len() != spec.n_layers {
        return Err(DispError::contract(format!(
            "expected latents for {} blocks, got {}",
            spec.n_layers,
            latents.len()
        )));
    }
    let width = 4 * spec.d + spec.d_mid;
    let mut gates = Vec::with_capacity(spec.n_layers);
    for lat in latents {
        if lat.len() != width {
            return Err(DispError::dim("finalize latents", &[width], &[lat.len()]));
        }
        let gate = |slot: GateSlot| -> Result<GateVector> {
            let src = match slot {
                GateSlot::AttnOut | GateSlot::MlpIn | GateSlot::MlpOut if tied => GateSlot::AttnIn,
                s => s,
            };
            // stored logits are those of π₀, i.e. latent + c
            let logits: Vec<f64> = lat[latent_range(src, spec.d, spec.d_mid)].iter().map(|x| x + cfg.c).collect();
            GateVector::new(logits.iter().map(|&l| l >= 0.0).collect()).with_logits(logits)
        };
        gates.push(BlockGates {
            gates: [
                gate(GateSlot::AttnIn)?,
                gate(GateSlot::AttnOut)?,
                gate(GateSlot::MlpIn)?,
                gate(GateSlot::MlpMid)?,
                gate(GateSlot::MlpOut)?,
            ],
        });
    }
    if let Some(budget) = enforce {
        enforce_budget(spec, &mut gates, budget, tied);
    }
    Ok(gates)
}

struct Unit {
    block: usize,
    slots: &'static [GateSlot],
    j: usize,
    margin: f64,
}

const TIED: &[GateSlot] = &[GateSlot::AttnIn, GateSlot::AttnOut, GateSlot::MlpIn, GateSlot::MlpOut];
const SINGLE: [&[GateSlot]; 5] = [
    &[GateSlot::AttnIn],
    &[GateSlot::AttnOut],
    &[GateSlot::MlpIn],
    &[GateSlot::MlpMid],
    &[GateSlot::MlpOut],
];

fn widths(b: &BlockGates) -> [u64; 5] {
    GateSlot::ALL.map(|s| b.get(s).nnz() as u64)
}

/// Greedy margin-ordered flips that strictly reduce `|T(s) − p·T_total|`.
fn enforce_budget(spec: &ModelSpec, gates: &mut [BlockGates], budget: &PruneBudget, tied: bool) {
    let target = budget.target();
    let mut t = count_params_exact(spec, gates) as f64;
    let closing = t > target;
    let margin = |b: &BlockGates, slot: GateSlot, j: usize| {
        b.get(slot).logits().map_or(0.0, |l| (crate::tensor::sigmoid(l[j]) - 0.5).abs())
    };
    let mut units = Vec::new();
    for (l, b) in gates.iter().enumerate() {
        let groups: Vec<&'static [GateSlot]> = if tied {
            vec![TIED, SINGLE[GateSlot::MlpMid as usize]]
        } else {
            SINGLE.to_vec()
        };
        for slots in groups {
            let lead = slots[0];
            for j in 0..b.get(lead).dim() {
                if b.get(lead).get(j) == closing {
                    units.push(Unit {
                        block: l,
                        slots,
                        j,
                        margin: margin(b, lead, j),
                    });
                }
            }
        }
    }
    units.sort_by(|a, b| a.margin.total_cmp(&b.margin));
    for u in units {
        let b = &mut gates[u.block];
        let before = block_params(spec, widths(b)) as f64;
        if closing && u.slots.contains(&GateSlot::MlpMid) {
            let w = widths(b);
            let mlp_alive = w[GateSlot::MlpIn as usize] > 0 && w[GateSlot::MlpOut as usize] > 0;
            if mlp_alive && w[GateSlot::MlpMid as usize] == 1 {
                continue;
            }
        }
        for &s in u.slots {
            b.get_mut(s).set(u.j, !closing);
        }
        let after = block_params(spec, widths(b)) as f64;
        let t_new = t - before + after;
        if (t_new - target).abs() < (t - target).abs() {
            t = t_new;
        } else {
            for &s in u.slots {
                b.get_mut(s).set(u.j, closing);
            }
        }
    }
}

/// One block's index sets and sliced weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedBlock<T> {
    /// `Ind₁..Ind₅` in gate-slot order.
    pub ind: [IndexSet; 5],
    pub norm1_gain: Tensor<T>,
    pub norm1_bias: Option<Tensor<T>>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub norm2_gain: Tensor<T>,
    pub norm2_bias: Option<Tensor<T>>,
    pub w1: Tensor<T>,
    pub w2: Option<Tensor<T>>,
    pub w3: Tensor<T>,
}

impl<T: Real> PrunedBlock<T> {
    pub fn index(&self, slot: GateSlot) -> &IndexSet {
        &self.ind[slot as usize]
    }

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

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// The deployable pruned model: sliced blocks plus untouched embeddings,
/// final norm and head.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedModel<T> {
    pub spec: ModelSpec,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<PrunedBlock<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Option<Tensor<T>>,
    pub head: Option<Tensor<T>>,
}

fn slice_vec<T: Real>(v: &Tensor<T>, ind: &IndexSet) -> Tensor<T> {
    Tensor::from_vec(ind.as_slice().iter().map(|&j| v.data()[j]).collect())
}

pub fn extract<T: Real>(model: &DenseModel<T>, gates: &[BlockGates]) -> Result<PrunedModel<T>> {
    validate_gates(&model.spec, gates)?;
    let blocks = model
        .blocks
        .iter()
        .zip(gates)
        .map(|(w, gs)| {
            let ind = GateSlot::ALL.map(|s| gs.get(s).to_index_set());
            let [i1, i2, i3, i4, i5] = &ind;
            Ok(PrunedBlock {
                norm1_gain: slice_vec(&w.norm1_gain, i1),
                norm1_bias: w.norm1_bias.as_ref().map(|b| slice_vec(b, i1)),
                wq: slice_weight(&w.wq, Some(i1), None)?,
                wk: slice_weight(&w.wk, Some(i1), None)?,
                wv: slice_weight(&w.wv, Some(i1), None)?,
                wo: slice_weight(&w.wo, None, Some(i2))?,
                norm2_gain: slice_vec(&w.norm2_gain, i3),
                norm2_bias: w.norm2_bias.as_ref().map(|b| slice_vec(b, i3)),
                w1: slice_weight(&w.w1, Some(i3), Some(i4))?,
                w2: w.w2.as_ref().map(|w2| slice_weight(w2, Some(i3), Some(i4))).transpose()?,
                w3: slice_weight(&w.w3, Some(i4), Some(i5))?,
                ind: ind.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrunedModel {
        spec: model.spec.clone(),
        tok_emb: model.tok_emb.clone(),
        pos_emb: model.pos_emb.clone(),
        blocks,
        final_gain: model.final_gain.clone(),
        final_bias: model.final_bias.clone(),
        head: model.head.clone(),
    })
}

/// Algorithm-1 inference for one block on the full-width stream `x[batch·seq, d]`.
pub fn pruned_block_forward<T: Real>(
    g: &Graph<T>,
    spec: &ModelSpec,
    block: &PrunedBlock<T>,
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let width = g.shape(x)[1];
    if width != spec.d {
        return Err(DispError::contract(format!(
            "pruned block input width {width}, model width {}",
            spec.d
        )));
    }
    let c = |t: &Tensor<T>| g.constant(t.clone());
    let eps = lit::<T>(NORM_EPS);
    let mut x = x;

    let (i1, i2) = (block.index(GateSlot::AttnIn), block.index(GateSlot::AttnOut));
    if !i2.is_empty() {
        let xs = index_select(g, x, i1)?;
        let h = g.masked_norm(
            xs,
            &vec![true; i1.len()],
            c(&block.norm1_gain),
            block.norm1_bias.as_ref().map(c),
            spec.norm_kind,
            eps,
        )?;
        let q = g.matmul(h, c(&block.wq))?;
        let k = g.matmul(h, c(&block.wk))?;
        let v = g.matmul(h, c(&block.wv))?;
        let ctx = causal_attention(g, q, k, v, batch, seq, spec.n_heads)?;
        let attn = g.matmul(ctx, c(&block.wo))?;
        x = index_add(g, x, attn, i2)?;
    }

    let (i3, i4, i5) = (
        block.index(GateSlot::MlpIn),
        block.index(GateSlot::MlpMid),
        block.index(GateSlot::MlpOut),
    );
    if !i5.is_empty() && !i4.is_empty() {
        let xs = index_select(g, x, i3)?;
        let h = g.masked_norm(
            xs,
            &vec![true; i3.len()],
            c(&block.norm2_gain),
            block.norm2_bias.as_ref().map(c),
            spec.norm_kind,
            eps,
        )?;
        let hidden = match spec.mlp_kind {
            MlpKind::Gated => {
                let w2 = block
                    .w2
                    .as_ref()
                    .ok_or_else(|| DispError::contract("gated MLP is missing W2"))?;
                let a = g.matmul(h, c(&block.w1))?;
                let b = g.matmul(h, c(w2))?;
                g.mul(g.silu(a), b)?
            }
            MlpKind::Standard => g.gelu(g.matmul(h, c(&block.w1))?),
        };
        let mlp = g.matmul(hidden, c(&block.w3))?;
        x = index_add(g, x, mlp, i5)?;
    }
    Ok(x)
}

impl<T: Real> PrunedModel<T> {
    pub fn param_count(&self) -> usize {
        self.block_param_count()
            + self.tok_emb.len()
            + self.pos_emb.len()
            + self.final_gain.len()
            + self.final_bias.as_ref().map_or(0, Tensor::len)
            + self.head.as_ref().map_or(0, Tensor::len)
    }

    /// Parameters held by the pruned blocks (the gate-controllable part).
    pub fn block_param_count(&self) -> usize {
        self.blocks.iter().map(PrunedBlock::param_count).sum()
    }

    pub fn gates(&self) -> Vec<BlockGates> {
        self.blocks
            .iter()
            .map(|b| BlockGates {
                gates: b.ind.clone().map(|i| GateVector::from_index_set(&i)),
            })
            .collect()
    }

    /// Non-block weights as a dense-model shell for embedding and head reuse.
    fn shell(&self) -> DenseModel<T> {
        DenseModel {
            spec: self.spec.clone(),
            tok_emb: self.tok_emb.clone(),
            pos_emb: self.pos_emb.clone(),
            blocks: Vec::new(),
            final_gain: self.final_gain.clone(),
            final_bias: self.final_bias.clone(),
            head: self.head.clone(),
        }
    }

    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        let g = Graph::new();
        let shell = self.shell();
        let bound = shell.bind(&g, false);
        let (mut x, seq) = crate::model::embed(&g, &self.spec, &bound, tokens, batch)?;
        for b in &self.blocks {
            x = pruned_block_forward(&g, &self.spec, b, x, batch, seq)?;
        }
        let out = crate::model::lm_head(&g, &self.spec, &bound, x, batch, seq)?;
        Ok(g.value(out))
    }
}

impl<T: Real> LanguageModel<T> for PrunedModel<T> {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        PrunedModel::logits(self, tokens, batch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub trials: usize,
    /// Largest end-to-end logit difference over all trials.
    pub max_abs_diff: f64,
    /// Largest per-block output difference, with both paths fed the same input.
    pub per_block_diffs: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
    /// First block whose difference exceeds the tolerance.
    pub offending_block: Option<usize>,
}

pub const EQUIVALENCE_TOL: f64 = 1e-9;

/// Compares masked and pruned forwards on `trials` random token batches.
pub fn equivalence_report<T: Real>(
    dense: &DenseModel<T>,
    pruned: &PrunedModel<T>,
    gates: &[BlockGates],
    trials: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    validate_gates(&dense.spec, gates)?;
    let spec = &dense.spec;
    if pruned.blocks.len() != spec.n_layers {
        return Err(DispError::contract("pruned model has a different block count"));
    }
    let mut max_abs = 0.0f64;
    let mut per_block = vec![0.0f64; spec.n_layers];
    for trial in 0..trials {
        let mut rng = stream_rng(seed, Stream::Verification, trial as u64);
        let batch = rng.gen_range(1..=2);
        let seq = rng.gen_range(1..=spec.max_seq_len.min(16));
        let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
        let a = dense.logits(&tokens, batch, Some(gates))?;
        let b = pruned.logits(&tokens, batch)?;
        max_abs = max_abs.max(a.max_abs_diff(&b)?.to_f64().unwrap());

        let x0 = normal_tensor::<T, _>(&mut rng, &[batch * seq, spec.d], 1.0);
        let g = Graph::new();
        let bound = dense.bind(&g, false);
        let x = g.constant(x0);
        for l in 0..spec.n_layers {
            let gv = BlockGateVars::constant(&g, &gates[l]);
            let masked = block_forward_masked(&g, spec, &bound.blocks[l], x, batch, seq, Some(&gv))?;
            let pr = pruned_block_forward(&g, spec, &pruned.blocks[l], x, batch, seq)?;
            let diff = g.value(masked).max_abs_diff(&g.value(pr))?.to_f64().unwrap();
            per_block[l] = per_block[l].max(diff);
        }
    }
    let offending_block = per_block.iter().position(|&d| !(d <= EQUIVALENCE_TOL));
    let pass = max_abs <= EQUIVALENCE_TOL && offending_block.is_none();
    Ok(EquivalenceReport {
        trials,
        max_abs_diff: max_abs,
        per_block_diffs: per_block,
        tolerance: EQUIVALENCE_TOL,
        pass,
        offending_block,
    })
}

/// Uniformly random gates with each bit open with probability `p_open`.
pub fn random_gates<R: Rng>(spec: &ModelSpec, rng: &mut R, p_open: f64) -> Vec<BlockGates> {
    (0..spec.n_layers)
        .map(|_| BlockGates {
            gates: spec
                .gate_dims()
                .map(|n| GateVector::new((0..n).map(|_| rng.gen_bool(p_open)).collect())),
        })
        .collect()
}
