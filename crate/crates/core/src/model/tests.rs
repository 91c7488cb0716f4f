use super::*;
use crate::rng::normal_tensor;
use crate::tensor::gradcheck::{contract, gradcheck};
use rand::Rng;

fn small_spec(mlp_kind: MlpKind, norm_kind: NormKind) -> ModelSpec {
    ModelSpec {
        d: 8,
        n_layers: 2,
        n_heads: 2,
        d_mid: 12,
        mlp_kind,
        norm_kind,
        vocab_size: 11,
        max_seq_len: 6,
        tie_embeddings: false,
    }
}

fn random_gates(spec: &ModelSpec, seed: u64) -> Vec<BlockGates> {
    let mut rng = stream_rng(seed, Stream::Verification, 0);
    (0..spec.n_layers)
        .map(|_| BlockGates {
            gates: spec
                .gate_dims()
                .map(|n| GateVector::new((0..n).map(|_| rng.gen_bool(0.6)).collect())),
        })
        .collect()
}

fn tokens(spec: &ModelSpec, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Verification, 1);
    (0..n).map(|_| rng.gen_range(0..spec.vocab_size)).collect()
}

#[test]
fn identity_gates_match_ungated_bitwise() {
    for kind in [MlpKind::Gated, MlpKind::Standard] {
        for norm in [NormKind::LayerNorm, NormKind::RmsNorm] {
            let spec = small_spec(kind, norm);
            let m = DenseModel::<f64>::init(&spec, 3).unwrap();
            let toks = tokens(&spec, 10, 0);
            let ones: Vec<_> = (0..spec.n_layers).map(|_| BlockGates::ones(&spec)).collect();
            let a = m.logits(&toks, 2, None).unwrap();
            let b = m.logits(&toks, 2, Some(&ones)).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn logits_shape_contract() {
    let spec = small_spec(MlpKind::Gated, NormKind::LayerNorm);
    let m = DenseModel::<f64>::init(&spec, 0).unwrap();
    let out = m.logits(&[1, 2, 3, 4], 1, None).unwrap();
    assert_eq!(out.shape(), &[1, 4, spec.vocab_size]);
    assert!(m.logits(&[1, 2, 3], 2, None).is_err());
    assert!(m.logits(&[1, 99], 1, None).is_err());
    assert!(m.logits(&[0; 7], 1, None).is_err());
    let bad = vec![BlockGates::ones(&spec)];
    assert!(m.logits(&[1, 2], 1, Some(&bad)).is_err());
}

#[test]
fn closed_output_gates_make_blocks_passthrough() {
    let spec = small_spec(MlpKind::Gated, NormKind::LayerNorm);
    let m = DenseModel::<f64>::init(&spec, 5).unwrap();
    let mut gates = random_gates(&spec, 1);
    for b in &mut gates {
        *b.get_mut(GateSlot::AttnOut) = GateVector::zeros(spec.d);
        *b.get_mut(GateSlot::MlpOut) = GateVector::zeros(spec.d);
    }
    let toks = tokens(&spec, 6, 2);
    let gated = m.logits(&toks, 1, Some(&gates)).unwrap();

    // embedding -> final norm -> head, with no blocks at all
    let g = Graph::new();
    let bound = m.bind(&g, false);
    let (x, seq) = embed(&g, &spec, &bound, &toks, 1).unwrap();
    let direct = g.value(lm_head(&g, &spec, &bound, x, 1, seq).unwrap());
    assert_eq!(gated, direct);
}

#[test]
fn residual_only_written_where_output_gates_open() {
    let spec = small_spec(MlpKind::Standard, NormKind::RmsNorm);
    let m = DenseModel::<f64>::init(&spec, 8).unwrap();
    let gates = random_gates(&spec, 4);
    let toks = tokens(&spec, 5, 3);
    let g = Graph::new();
    let bound = m.bind(&g, false);
    let (x, seq) = embed(&g, &spec, &bound, &toks, 1).unwrap();
    let gv = BlockGateVars::constant(&g, &gates[0]);
    let y = block_forward_masked(&g, &spec, &bound.blocks[0], x, 1, seq, Some(&gv)).unwrap();
    let (xv, yv) = (g.value(x), g.value(y));
    let open: Vec<bool> = (0..spec.d)
        .map(|j| gates[0].get(GateSlot::AttnOut).get(j) || gates[0].get(GateSlot::MlpOut).get(j))
        .collect();
    for r in 0..seq {
        for j in 0..spec.d {
            if !open[j] {
                assert_eq!(xv.data()[r * spec.d + j], yv.data()[r * spec.d + j]);
            }
        }
    }
}

#[test]
fn head_dim_must_divide_width() {
    let mut spec = small_spec(MlpKind::Gated, NormKind::LayerNorm);
    spec.n_heads = 3;
    assert!(DenseModel::<f64>::init(&spec, 0).is_err());
    spec.n_heads = 4;
    assert_eq!(spec.head_dim(), 2);
    assert_eq!(spec.gate_count(), 2 * (4 * 8 + 12));
}

#[test]
fn param_count_matches_shapes() {
    let spec = small_spec(MlpKind::Gated, NormKind::LayerNorm);
    let m = DenseModel::<f64>::init(&spec, 0).unwrap();
    let (d, k, v, n) = (8, 12, 11, 6);
    let block = 4 * d * d + 3 * d * k + 4 * d;
    assert_eq!(m.param_count(), v * d + n * d + 2 * block + 2 * d + d * v);
    let g = Graph::<f64>::new();
    assert_eq!(m.bind(&g, true).vars().len(), m.named_tensors().len());
}

fn block_gradcheck(spec: &ModelSpec, seed: u64) -> f64 {
    let m = DenseModel::<f64>::init(spec, seed).unwrap();
    let mut rng = stream_rng(seed, Stream::Verification, 9);
    let (batch, seq) = (2, 3);
    let x = normal_tensor::<f64, _>(&mut rng, &[batch * seq, spec.d], 1.0);
    let mut weights: Vec<Tensor<f64>> = vec![x];
    // perturb gains/biases away from their init so their gradients are generic
    for (_, t) in m.blocks[0].named_tensors() {
        let noise = normal_tensor::<f64, _>(&mut rng, t.shape(), 0.3);
        weights.push(Tensor::from_fn(t.shape(), |i| t.data()[i] * 10.0 + noise.data()[i]));
    }
    let gates = random_gates(spec, seed)[0].clone();
    let gate_vals: Vec<Tensor<f64>> = gates.gates.iter().map(|g| g.to_tensor()).collect();
    let n_w = weights.len();
    weights.extend(gate_vals);
    let proj = normal_tensor::<f64, _>(&mut rng, &[batch * seq, spec.d], 1.0);
    let has_bias = spec.has_norm_bias();
    let gated = spec.mlp_kind == MlpKind::Gated;
    let report = gradcheck(&weights, 1e-5, |g, v| {
        let mut it = v[1..n_w].iter().copied();
        let mut next = || it.next().unwrap();
        let norm1_gain = next();
        let norm1_bias = has_bias.then(&mut next);
        let (wq, wk, wv, wo) = (next(), next(), next(), next());
        let norm2_gain = next();
        let norm2_bias = has_bias.then(&mut next);
        let w1 = next();
        let w2 = gated.then(&mut next);
        let w3 = next();
        let block = BoundBlock {
            norm1_gain,
            norm1_bias,
            wq,
            wk,
            wv,
            wo,
            norm2_gain,
            norm2_bias,
            w1,
            w2,
            w3,
        };
        let gv = BlockGateVars {
            slots: std::array::from_fn(|i| GateInput::from_var(g, v[n_w + i])),
        };
        let y = block_forward_masked(g, spec, &block, v[0], batch, seq, Some(&gv))?;
        contract(g, y, &proj)
    })
    .unwrap();
    report.rel_err
}

#[test]
fn block_gradients_match_finite_differences() {
    for (i, kind) in [MlpKind::Gated, MlpKind::Standard].into_iter().enumerate() {
        for norm in [NormKind::LayerNorm, NormKind::RmsNorm] {
            let spec = small_spec(kind, norm);
            let err = block_gradcheck(&spec, 20 + i as u64);
            assert!(err <= 1e-5, "{kind:?}/{norm:?}: rel err {err}");
        }
    }
}

#[test]
fn tied_head_uses_embedding() {
    let mut spec = small_spec(MlpKind::Gated, NormKind::LayerNorm);
    spec.tie_embeddings = true;
    let m = DenseModel::<f64>::init(&spec, 1).unwrap();
    assert!(m.head.is_none());
    let out = m.logits(&[1, 2, 3], 1, None).unwrap();
    assert_eq!(out.shape(), &[1, 3, spec.vocab_size]);
}

#[test]
fn f32_forward_tracks_f64() {
    let spec = small_spec(MlpKind::Gated, NormKind::LayerNorm);
    let m64 = DenseModel::<f64>::init(&spec, 2).unwrap();
    let m32 = DenseModel::<f32>::init(&spec, 2).unwrap();
    let toks = tokens(&spec, 6, 1);
    let a = m64.logits(&toks, 1, None).unwrap();
    let b = m32.logits(&toks, 1, None).unwrap().cast::<f64>();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-4);
}
