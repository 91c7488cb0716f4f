//! Invariant suites run by `disp verify` and the acceptance tests.

use std::fmt;

use rand::Rng;

use crate::budget::{budget_regularizer, count_params, PruneBudget};
use crate::error::{DispError, Result};
use crate::hypernet::{GateParam, HyperNet, HyperNetDims};
use crate::model::{
    block_forward_masked, BlockGateVars, BoundBlock, DenseModel, GateInput, MlpKind, ModelSpec,
};
use crate::prune::{equivalence_report, extract, random_gates, EQUIVALENCE_TOL};
use crate::reinmax::{reinmax_forward, reinmax_with_draw, ReinMaxConfig, SampleMode};
use crate::rng::{normal_tensor, stream_rng, uniform_tensor, Stream};
use crate::selection::{compose_nnz_bound_check, GateVector};
use crate::tensor::gradcheck::{contract, gradcheck};
use crate::tensor::{Graph, NormKind, Tensor, Var};

pub const OP_TOL: f64 = 1e-6;
pub const GRAPH_TOL: f64 = 1e-5;
pub const REINMAX_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Prop1,
    Reinmax,
    Equivalence,
    All,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Prop1 => "prop1",
            Suite::Reinmax => "reinmax",
            Suite::Equivalence => "equivalence",
            Suite::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Suite::Gradcheck, Suite::Prop1, Suite::Reinmax, Suite::Equivalence, Suite::All]
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                DispError::Usage(format!(
                    "unknown suite `{s}` (expected gradcheck, prop1, reinmax, equivalence or all)"
                ))
            })
    }
}

/// One named check: the worst observed error over its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, instances: usize, worst: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            instances,
            worst,
            tolerance,
            pass: worst.is_finite() && worst <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {:<5} {:<32} trials {:>6}  worst {:.3e}  tol {:.1e}",
                self.suite.as_str(),
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.instances,
                c.worst,
                c.tolerance
            )?;
        }
        write!(
            f,
            "[{}] suite {}",
            self.suite.as_str(),
            if self.pass() { "passed" } else { "FAILED" }
        )
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(match suite {
        Suite::Gradcheck => vec![gradcheck_suite(seed, 20)?],
        Suite::Prop1 => vec![prop1_suite(seed, 10_000)?],
        Suite::Reinmax => vec![reinmax_suite(seed, 1_000_000)?],
        Suite::Equivalence => vec![equivalence_suite(seed, 20)?],
        Suite::All => vec![
            gradcheck_suite(seed, 20)?,
            prop1_suite(seed, 10_000)?,
            reinmax_suite(seed, 1_000_000)?,
            equivalence_suite(seed, 20)?,
        ],
    })
}

type Build = fn(&Graph<f64>, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    /// Input shapes; `positive` inputs are drawn from (0.5, 3).
    inputs: &'static [&'static [usize]],
    positive: bool,
    out: &'static [usize],
    build: Build,
}

const SEL: [usize; 3] = [1, 4, 7];

fn op_cases() -> Vec<OpCase> {
    let c = |name, inputs, out, build| OpCase { name, inputs, positive: false, out, build };
    vec![
        c("matmul", &[&[4, 5], &[5, 3]], &[4, 3], |g, v| g.matmul(v[0], v[1])),
        c("batch_matmul", &[&[2, 3, 4], &[2, 4, 5]], &[2, 3, 5], |g, v| g.batch_matmul(v[0], v[1], false)),
        c("batch_matmul_t", &[&[2, 3, 4], &[2, 5, 4]], &[2, 3, 5], |g, v| g.batch_matmul(v[0], v[1], true)),
        c("add", &[&[3, 4], &[3, 4]], &[3, 4], |g, v| g.add(v[0], v[1])),
        c("sub", &[&[3, 4], &[3, 4]], &[3, 4], |g, v| g.sub(v[0], v[1])),
        c("mul", &[&[3, 4], &[3, 4]], &[3, 4], |g, v| g.mul(v[0], v[1])),
        c("maximum", &[&[3, 4], &[3, 4]], &[3, 4], |g, v| g.maximum(v[0], v[1])),
        c("add_row", &[&[3, 4], &[4]], &[3, 4], |g, v| g.add_row(v[0], v[1])),
        c("mul_row", &[&[3, 4], &[4]], &[3, 4], |g, v| g.mul_row(v[0], v[1])),
        c("scale", &[&[3, 4]], &[3, 4], |g, v| Ok(g.scale(v[0], 0.3))),
        c("add_scalar", &[&[3, 4]], &[3, 4], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        c("neg", &[&[3, 4]], &[3, 4], |g, v| Ok(g.neg(v[0]))),
        c("sigmoid", &[&[3, 4]], &[3, 4], |g, v| Ok(g.sigmoid(v[0]))),
        c("tanh", &[&[3, 4]], &[3, 4], |g, v| Ok(g.tanh(v[0]))),
        c("gelu", &[&[3, 4]], &[3, 4], |g, v| Ok(g.gelu(v[0]))),
        c("silu", &[&[3, 4]], &[3, 4], |g, v| Ok(g.silu(v[0]))),
        c("exp", &[&[3, 4]], &[3, 4], |g, v| Ok(g.exp(v[0]))),
        OpCase { name: "log", inputs: &[&[3, 4]], positive: true, out: &[3, 4], build: |g, v| Ok(g.log(v[0])) },
        c("softmax", &[&[2, 5]], &[2, 5], |g, v| g.softmax(v[0], false)),
        c("softmax_causal", &[&[2, 4, 4]], &[2, 4, 4], |g, v| g.softmax(v[0], true)),
        c("layernorm_masked", &[&[3, 6], &[6], &[6]], &[3, 6], |g, v| {
            g.masked_norm(v[0], &[true, false, true, true, false, true], v[1], Some(v[2]), NormKind::LayerNorm, 1e-5)
        }),
        c("rmsnorm_masked", &[&[3, 6], &[6]], &[3, 6], |g, v| {
            g.masked_norm(v[0], &[true, true, false, true, true, false], v[1], None, NormKind::RmsNorm, 1e-5)
        }),
        c("cross_entropy", &[&[4, 6]], &[], |g, v| g.cross_entropy(v[0], &[0, 5, 2, 2])),
        c("index_select", &[&[6, 8]], &[6, 3], |g, v| g.index_select(v[0], &SEL)),
        c("index_add", &[&[6, 8], &[6, 3]], &[6, 8], |g, v| g.index_add(v[0], v[1], &SEL)),
        c("concat_cols", &[&[6, 8], &[6, 3]], &[6, 11], |g, v| g.concat_cols(&[v[0], v[1]])),
        c("gather_rows", &[&[6, 8]], &[4, 8], |g, v| g.gather_rows(v[0], &[5, 0, 5, 2])),
        c("split_merge_heads", &[&[6, 8]], &[6, 8], |g, v| {
            let s = g.tanh(g.split_heads(v[0], 2, 3, 2)?);
            g.merge_heads(s, 2, 3, 2)
        }),
        c("reshape", &[&[6, 8]], &[8, 6], |g, v| g.reshape(v[0], &[8, 6])),
        c("sum", &[&[3, 4]], &[], |g, v| Ok(g.sum(g.mul(v[0], v[0])?))),
        c("mean", &[&[3, 4]], &[], |g, v| Ok(g.mean(g.mul(v[0], v[0])?))),
    ]
}

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

fn block_check(spec: &ModelSpec, seed: u64) -> Result<f64> {
    let model = DenseModel::<f64>::init(spec, seed)?;
    let mut rng = stream_rng(seed, Stream::Verification, 100);
    let (batch, seq) = (2, 3);
    let mut inputs = vec![normal_tensor::<f64, _>(&mut rng, &[batch * seq, spec.d], 1.0)];
    for (_, t) in model.blocks[0].named_tensors() {
        let noise = normal_tensor::<f64, _>(&mut rng, t.shape(), 0.3);
        inputs.push(Tensor::from_fn(t.shape(), |i| t.data()[i] * 10.0 + noise.data()[i]));
    }
    let n_w = inputs.len();
    for dim in spec.gate_dims() {
        inputs.push(Tensor::from_fn(&[dim], |_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 }));
    }
    let proj = normal_tensor::<f64, _>(&mut rng, &[batch * seq, spec.d], 1.0);
    let has_bias = spec.has_norm_bias();
    let gated = spec.mlp_kind == MlpKind::Gated;
    let r = gradcheck(&inputs, FD_STEP, |g, v| {
        let mut it = v[1..n_w].iter().copied();
        let mut next = || it.next().expect("block tensor count");
        let block = BoundBlock {
            norm1_gain: next(),
            norm1_bias: has_bias.then(&mut next),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            norm2_gain: next(),
            norm2_bias: has_bias.then(&mut next),
            w1: next(),
            w2: gated.then(&mut next),
            w3: next(),
        };
        let gv = BlockGateVars {
            slots: std::array::from_fn(|i| GateInput::from_var(g, v[n_w + i])),
        };
        let y = block_forward_masked(g, spec, &block, v[0], batch, seq, Some(&gv))?;
        contract(g, y, &proj)
    })?;
    Ok(r.rel_err)
}

fn hypernet_check(mode: GateParam, seed: u64) -> Result<f64> {
    let spec = ModelSpec { d: 2, n_layers: 2, d_mid: 3, n_heads: 1, ..small_spec(MlpKind::Gated, NormKind::LayerNorm) };
    let width = 4 * spec.d + spec.d_mid;
    let mut net = HyperNet::<f64>::with_dims(&spec, mode, HyperNetDims { input: 3, hidden: 4 }, seed)?;
    let mut rng = stream_rng(seed, Stream::Verification, 101);
    for (_, t) in net.named_tensors_mut() {
        *t = normal_tensor(&mut rng, t.shape(), 0.5);
    }
    let inputs: Vec<Tensor<f64>> = net.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let w = normal_tensor::<f64, _>(&mut rng, &[spec.n_layers, width], 1.0);
    let r = gradcheck(&inputs, FD_STEP, |g, v| {
        let lat = net.forward(g, v)?;
        let rows: Vec<Var> = lat.iter().map(|&x| g.reshape(x, &[1, width])).collect::<Result<_>>()?;
        let stacked = g.concat_cols(&rows)?;
        contract(g, g.reshape(stacked, &[spec.n_layers, width])?, &w)
    })?;
    Ok(r.rel_err)
}

fn budget_check(seed: u64) -> Result<f64> {
    let spec = small_spec(MlpKind::Gated, NormKind::LayerNorm);
    let budget = PruneBudget::new(&spec, 0.4, 6.0)?;
    let mut rng = stream_rng(seed, Stream::Verification, 102);
    let inputs: Vec<Tensor<f64>> = (0..spec.n_layers)
        .flat_map(|_| spec.gate_dims())
        .map(|n| uniform_tensor(&mut rng, &[n], 0.05, 1.0))
        .collect();
    let r = gradcheck(&inputs, FD_STEP, |g, v| {
        let gates: Vec<BlockGateVars> = v
            .chunks(5)
            .map(|c| BlockGateVars { slots: std::array::from_fn(|i| GateInput::from_var(g, c[i])) })
            .collect();
        let t = count_params(g, &spec, &gates)?;
        budget_regularizer(g, t, &budget)
    })?;
    Ok(r.rel_err)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Worst relative error of the estimator gradient against central
/// differences of the surrogate with the draw `B` and the stop-gradient
/// offset held fixed.
fn reinmax_frozen_check(seed: u64, n: usize) -> Result<f64> {
    let mut rng = stream_rng(seed, Stream::Verification, 103);
    let cfg = ReinMaxConfig {
        tau: rng.gen_range(0.3..3.0),
        c: rng.gen_range(0.0..4.0),
        seed,
    };
    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..3.0)).collect();
    let draw: Vec<bool> = x0.iter().map(|&x| rng.gen_bool(sigmoid(x + cfg.c))).collect();
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(x0.clone()));
    let s = reinmax_with_draw(&g, x, &draw, &cfg)?;
    let w = normal_tensor::<f64, _>(&mut rng, &[n], 1.0);
    g.backward(contract(&g, s, &w)?)?;
    let analytic = g.grad(x).unwrap_or_else(|| Tensor::zeros(&[n]));
    let numeric: Vec<f64> = x0
        .iter()
        .zip(&draw)
        .zip(w.data())
        .map(|((&x, &b), &wj)| {
            let b = if b { 1.0 } else { 0.0 };
            let y0 = x + cfg.c;
            let k = ((b + sigmoid(y0 / cfg.tau)) / 2.0).ln() - y0;
            let f = |x: f64| 2.0 * sigmoid(k + x + cfg.c) - 0.5 * sigmoid(x + cfg.c);
            wj * (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
        })
        .collect();
    Ok(rel_err(analytic.data(), &numeric))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Every autograd op and the composed graphs, `instances` random draws each.
pub fn gradcheck_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for (k, case) in op_cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut rng = stream_rng(seed, Stream::Verification, (1000 * k + i) as u64);
            let inputs: Vec<Tensor<f64>> = case
                .inputs
                .iter()
                .map(|s| {
                    if case.positive {
                        uniform_tensor(&mut rng, s, 0.5, 3.0)
                    } else {
                        normal_tensor(&mut rng, s, 1.5)
                    }
                })
                .collect();
            let w = normal_tensor::<f64, _>(&mut rng, case.out, 1.0);
            let build = case.build;
            let r = gradcheck(&inputs, FD_STEP, |g, v| {
                let y = build(g, v)?;
                if case.out.is_empty() {
                    Ok(y)
                } else {
                    contract(g, y, &w)
                }
            })?;
            worst = worst.max(r.rel_err);
        }
        checks.push(Check::new(format!("op/{}", case.name), instances, worst, OP_TOL));
    }
    for mlp in [MlpKind::Gated, MlpKind::Standard] {
        for norm in [NormKind::LayerNorm, NormKind::RmsNorm] {
            let spec = small_spec(mlp, norm);
            let mut worst = 0.0f64;
            for i in 0..instances {
                worst = worst.max(block_check(&spec, seed.wrapping_add(i as u64))?);
            }
            let name = format!("graph/block_{}_{}", mlp.as_str(), norm.as_str());
            checks.push(Check::new(name, instances, worst, GRAPH_TOL));
        }
    }
    for mode in GateParam::ALL {
        let mut worst = 0.0f64;
        for i in 0..instances {
            worst = worst.max(hypernet_check(mode, seed.wrapping_add(i as u64))?);
        }
        checks.push(Check::new(format!("graph/hypernet_{}", mode.as_str()), instances, worst, GRAPH_TOL));
    }
    let mut worst = 0.0f64;
    for i in 0..instances {
        worst = worst.max(budget_check(seed.wrapping_add(i as u64))?);
    }
    checks.push(Check::new("graph/budget", instances, worst, GRAPH_TOL));
    let mut worst = 0.0f64;
    for i in 0..instances {
        worst = worst.max(reinmax_frozen_check(seed.wrapping_add(i as u64), 64)?);
    }
    checks.push(Check::new("graph/reinmax_frozen", instances, worst, REINMAX_TOL));
    Ok(SuiteReport { suite: Suite::Gradcheck, checks })
}

fn all_gates(d: usize) -> Vec<GateVector> {
    (0..1usize << d)
        .map(|m| GateVector::new((0..d).map(|j| m >> j & 1 == 1).collect()))
        .collect()
}

/// Width bound of composed selection matrices: exhaustive at d=8 and
/// `random_pairs` uniform pairs at d=16. The reported error counts
/// violations of the bound or of its equality condition.
pub fn prop1_suite(seed: u64, random_pairs: usize) -> Result<SuiteReport> {
    let tally = |a: &GateVector, b: &GateVector, worst: &mut f64, failures: &mut usize| -> Result<()> {
        let r = compose_nnz_bound_check(a, b)?;
        *worst = worst.max(r.nnz_product.saturating_sub(r.min_nnz) as f64);
        let equal = r.nnz_product == r.min_nnz;
        if !r.holds || equal != r.equality_condition_holds {
            *failures += 1;
        }
        Ok(())
    };
    let mut checks = Vec::new();
    let gates = all_gates(8);
    let (mut worst, mut failures) = (0.0, 0);
    for a in &gates {
        for b in &gates {
            tally(a, b, &mut worst, &mut failures)?;
        }
    }
    checks.push(Check::new("exhaustive_d8/max_violation", gates.len() * gates.len(), worst, 0.0));
    checks.push(Check::new("exhaustive_d8/failures", gates.len() * gates.len(), failures as f64, 0.0));
    let mut rng = stream_rng(seed, Stream::Verification, 200);
    let (mut worst, mut failures) = (0.0, 0);
    for _ in 0..random_pairs {
        let mut draw = || GateVector::new((0..16).map(|_| rng.gen_bool(0.5)).collect());
        let (a, b) = (draw(), draw());
        tally(&a, &b, &mut worst, &mut failures)?;
    }
    checks.push(Check::new("random_d16/max_violation", random_pairs, worst, 0.0));
    checks.push(Check::new("random_d16/failures", random_pairs, failures as f64, 0.0));
    Ok(SuiteReport { suite: Suite::Prop1, checks })
}

pub const OPEN_RATE_TOL: f64 = 0.01;

/// Binary forward values, the initial open rate at zero latents, and the
/// frozen-draw gradient.
pub fn reinmax_suite(seed: u64, samples: usize) -> Result<SuiteReport> {
    let cfg = ReinMaxConfig { seed, ..ReinMaxConfig::default() };
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[samples]));
    let mut rng = stream_rng(seed, Stream::GateSample, 0);
    let s = reinmax_forward(&g, x, &cfg, SampleMode::Sample, &mut rng)?;
    let values = g.value(s);
    let non_binary = values.data().iter().filter(|&&v| v != 0.0 && v != 1.0).count();
    let open_rate = values.sum() / samples as f64;
    let expected = sigmoid(cfg.c);

    let mut rng = stream_rng(seed, Stream::Verification, 300);
    let latents: Vec<f64> = (0..samples.min(100_000)).map(|_| rng.gen_range(-12.0..8.0)).collect();
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(latents));
    let s = reinmax_forward(&g, x, &cfg, SampleMode::Sample, &mut rng)?;
    let non_binary_random = g.value(s).data().iter().filter(|&&v| v != 0.0 && v != 1.0).count();

    let mut worst = 0.0f64;
    for i in 0..20 {
        worst = worst.max(reinmax_frozen_check(seed.wrapping_add(i), 256)?);
    }
    Ok(SuiteReport {
        suite: Suite::Reinmax,
        checks: vec![
            Check::new("binary_values/zero_latents", samples, non_binary as f64, 0.0),
            Check::new("binary_values/random_latents", samples.min(100_000), non_binary_random as f64, 0.0),
            Check::new("open_rate_deviation", samples, (open_rate - expected).abs(), OPEN_RATE_TOL),
            Check::new("frozen_draw_gradient", 20 * 256, worst, REINMAX_TOL),
        ],
    })
}

/// Masked and extracted forwards on a 4-block d=64 model for `configs`
/// random gate configurations.
pub fn equivalence_suite(seed: u64, configs: usize) -> Result<SuiteReport> {
    let spec = ModelSpec {
        d: 64,
        n_layers: 4,
        n_heads: 4,
        d_mid: 256,
        max_seq_len: 16,
        ..ModelSpec::tiny()
    };
    let model = DenseModel::<f64>::init(&spec, seed)?;
    let mut rng = stream_rng(seed, Stream::Verification, 400);
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    for i in 0..configs {
        let p_open = match i % 4 {
            0 => 0.5,
            1 => 0.1,
            2 => 0.9,
            _ => rng.gen_range(0.0..1.0),
        };
        let gates = random_gates(&spec, &mut rng, p_open);
        let pruned = extract(&model, &gates)?;
        let report = equivalence_report(&model, &pruned, &gates, 2, seed.wrapping_add(i as u64))?;
        let block_worst = report.per_block_diffs.iter().copied().fold(0.0, f64::max);
        worst = worst.max(report.max_abs_diff).max(block_worst);
        failures += usize::from(!report.pass);
    }
    Ok(SuiteReport {
        suite: Suite::Equivalence,
        checks: vec![
            Check::new("max_abs_logit_diff", configs, worst, EQUIVALENCE_TOL),
            Check::new("failing_configs", configs, failures as f64, 0.0),
        ],
    })
}
