//! The structure search loop: sample gates, masked forward, budgeted
//! objective, update of the gate parametrization only.

use std::fmt::Write as _;

use crate::budget::{budget_regularizer, count_params, total_objective, PruneBudget};
use crate::data::BatchSource;
use crate::error::{DispError, Result};
use crate::hypernet::{split_latent, GateParam, HyperNet};
use crate::model::{lm_loss, model_forward, BlockGateVars, BlockGates, DenseModel, GateInput, GateSlot, ModelSpec};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::prune::finalize_gates;
use crate::reinmax::{reinmax_forward, ReinMaxConfig, SampleMode};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Graph, Real, Tensor, Var};

/// How gates relate across roles within a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tying {
    /// Five independent gates per block.
    Independent,
    /// s2, s3 and s5 share the s1 gate (dimension-dependent pruning).
    Constrained,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub tying: Tying,
    pub gate_param: GateParam,
    pub reinmax: ReinMaxConfig,
    /// Global gradient-norm clip on Θ.
    pub clip: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.05,
            iterations: 10_000,
            batch_size: 1,
            seq_len: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            tying: Tying::Independent,
            gate_param: GateParam::HyperNet,
            reinmax: ReinMaxConfig::default(),
            clip: 1.0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(DispError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.iterations == 0 {
            return Err(DispError::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(DispError::Config("batch_size and seq_len must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(DispError::Config(format!("clip must be positive, got {}", self.clip)));
        }
        self.reinmax.validate()
    }

    /// Applies a named search mode: `disp`, `constrained`, `elementwise` or `no-gru`.
    pub fn set_mode(&mut self, mode: &str) -> Result<()> {
        match mode {
            "disp" => {
                self.tying = Tying::Independent;
                self.gate_param = GateParam::HyperNet;
            }
            "constrained" => {
                self.tying = Tying::Constrained;
                self.gate_param = GateParam::HyperNet;
            }
            "elementwise" | "no-gru" => {
                self.tying = Tying::Independent;
                self.gate_param = GateParam::parse(mode)?;
            }
            other => return Err(DispError::Usage(format!("unknown search mode `{other}`"))),
        }
        Ok(())
    }

    pub fn mode_name(&self) -> String {
        match (self.tying, self.gate_param) {
            (Tying::Constrained, GateParam::HyperNet) => "constrained".into(),
            (Tying::Constrained, p) => format!("constrained+{}", p.as_str()),
            (Tying::Independent, GateParam::HyperNet) => "disp".into(),
            (Tying::Independent, p) => p.as_str().into(),
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub lm: f64,
    pub r_raw: f64,
    /// `T(s) / T_total` of the sampled gates.
    pub ratio: f64,
    pub open_fraction: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    /// Largest raw regularizer value of the run.
    pub fn r_max(&self) -> f64 {
        self.records.iter().map(|r| r.r_raw).fold(0.0, f64::max)
    }

    /// `R / max R`, or 0 when the regularizer never left zero.
    pub fn r_normalized(&self) -> Vec<f64> {
        let m = self.r_max();
        self.records
            .iter()
            .map(|r| if m > 0.0 { r.r_raw / m } else { 0.0 })
            .collect()
    }

    /// First iteration whose normalized regularizer is below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.r_normalized()
            .iter()
            .zip(&self.records)
            .find(|(r, _)| **r < threshold)
            .map(|(_, rec)| rec.iteration)
    }

    pub fn to_csv(&self) -> String {
        let blocks = self.records.first().map_or(0, |r| r.open_fraction.len());
        let mut out = String::from("iteration,lm,r_raw,r_norm,ratio");
        for l in 0..blocks {
            let _ = write!(out, ",open_b{l}");
        }
        out.push('\n');
        for (rec, rn) in self.records.iter().zip(self.r_normalized()) {
            let _ = write!(out, "{},{:e},{:e},{:e},{:e}", rec.iteration, rec.lm, rec.r_raw, rn, rec.ratio);
            for f in &rec.open_fraction {
                let _ = write!(out, ",{f:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DispError::Format("empty run log".into()))?;
        if !header.starts_with("iteration,lm,r_raw,r_norm,ratio") {
            return Err(DispError::Format("unexpected run log header".into()));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| DispError::Format(format!("bad number `{s}` in run log")))
        };
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 5 {
                return Err(DispError::Format(format!("short run log row `{line}`")));
            }
            records.push(LogRecord {
                iteration: f[0]
                    .parse()
                    .map_err(|_| DispError::Format(format!("bad iteration `{}`", f[0])))?,
                lm: parse(f[1])?,
                r_raw: parse(f[2])?,
                ratio: parse(f[4])?,
                open_fraction: f[5..].iter().map(|s| parse(s)).collect::<Result<_>>()?,
            });
        }
        Ok(RunLog { records })
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome<T> {
    pub net: HyperNet<T>,
    pub log: RunLog,
    /// `π₀ ≥ 0.5` gates of the trained parametrization.
    pub gates: Vec<BlockGates>,
    /// Model tensors that held a gradient buffer at any step (expected 0).
    pub model_grad_buffers: usize,
    /// Scalars of optimizer state; equals twice the size of Θ.
    pub optimizer_state_len: usize,
}

/// Samples one gate set from latents. Tied gates reuse the s1 draw.
pub fn sample_gates<T: Real>(
    g: &Graph<T>,
    spec: &ModelSpec,
    latents: &[Var],
    cfg: &ReinMaxConfig,
    tying: Tying,
    mode: SampleMode,
    rng: &mut impl rand::Rng,
) -> Result<Vec<BlockGateVars>> {
    latents
        .iter()
        .map(|&lat| {
            let parts = split_latent(g, lat, spec.d, spec.d_mid)?;
            let mut vars: [Option<Var>; 5] = [None; 5];
            for slot in GateSlot::ALL {
                let tied_to_s1 = tying == Tying::Constrained
                    && matches!(slot, GateSlot::AttnOut | GateSlot::MlpIn | GateSlot::MlpOut);
                vars[slot as usize] = Some(if tied_to_s1 {
                    vars[GateSlot::AttnIn as usize].expect("s1 sampled first")
                } else {
                    reinmax_forward(g, parts[slot as usize], cfg, mode, rng)?
                });
            }
            Ok(BlockGateVars {
                slots: vars.map(|v| GateInput::from_var(g, v.expect("all slots sampled"))),
            })
        })
        .collect()
}

/// Trains Θ for `cfg.iterations` steps with the model weights frozen.
///
/// `net` defaults to a fresh parametrization for `cfg.gate_param`.
/// `on_log` is called every `cfg.log_every` iterations and at the last one.
pub fn search<T: Real>(
    model: &DenseModel<T>,
    data: &mut BatchSource<'_>,
    budget: &PruneBudget,
    cfg: &TrainConfig,
    net: Option<HyperNet<T>>,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<SearchOutcome<T>> {
    cfg.validate()?;
    let spec = &model.spec;
    let mut net = match net {
        Some(n) => n,
        None => HyperNet::new(spec, cfg.gate_param, cfg.seed)?,
    };
    let sizes: Vec<usize> = net.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::<T>::new(cfg.adamw(), &sizes)?;
    let t_total = budget.t_total as f64;
    let gate_width = (4 * spec.d + spec.d_mid) as f64;
    let mut log = RunLog::default();
    let mut model_grad_buffers = 0;

    for it in 0..cfg.iterations {
        let batch = data.next_batch();
        let g = Graph::new();
        let bound = model.bind(&g, false);
        let theta = net.bind(&g);
        let latents = net.forward(&g, &theta)?;
        let mut rng = stream_rng(cfg.seed, Stream::GateSample, it as u64);
        let gates = sample_gates(&g, spec, &latents, &cfg.reinmax, cfg.tying, SampleMode::Sample, &mut rng)?;
        let logits = model_forward(&g, spec, &bound, &batch.inputs, batch.batch, Some(&gates))?;
        let lm = lm_loss(&g, logits, &batch.targets)?;
        let t = count_params(&g, spec, &gates)?;
        let open_fraction: Vec<f64> = gates
            .iter()
            .map(|b| {
                let open: usize = GateSlot::ALL
                    .iter()
                    .map(|&s| b.get(s).bits.iter().filter(|&&x| x).count())
                    .sum();
                open as f64 / gate_width
            })
            .collect();
        let lm_v = g.item(lm).to_f64().unwrap_or(f64::NAN);
        let t_v = g.item(t).to_f64().unwrap_or(f64::NAN);
        let diverged = |detail: &str| DispError::Diverged {
            iteration: it,
            detail: format!("{detail}; lm {lm_v}, T(s)/T_total {}, open fraction per block {open_fraction:?}", t_v / t_total),
        };
        if t_v <= 0.0 {
            return Err(diverged("every gate closed"));
        }
        let r = budget_regularizer(&g, t, budget)?;
        let obj = total_objective(&g, lm, r, budget.lambda)?;
        let r_v = g.item(r).to_f64().unwrap_or(f64::NAN);
        if !g.item(obj).is_finite() {
            return Err(diverged("non-finite objective"));
        }
        g.backward(obj)?;
        model_grad_buffers = model_grad_buffers.max(bound.vars().iter().filter(|&&v| g.grad(v).is_some()).count());
        let mut grads: Vec<Option<Tensor<T>>> = theta.iter().map(|&v| g.grad(v)).collect();
        let norm = clip_global_norm(&mut grads, cfg.clip);
        if !norm.is_finite() {
            return Err(diverged("non-finite gradient"));
        }
        let mut params: Vec<&mut Tensor<T>> = net.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(&mut params, &grads)?;

        let rec = LogRecord {
            iteration: it,
            lm: lm_v,
            r_raw: r_v,
            ratio: t_v / t_total,
            open_fraction,
        };
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            on_log(&rec);
        }
        log.records.push(rec);
    }
    let gates = finalize_gates(spec, &net, &cfg.reinmax, cfg.tying == Tying::Constrained, None)?;
    Ok(SearchOutcome {
        net,
        log,
        gates,
        model_grad_buffers,
        optimizer_state_len: opt.state_len(),
    })
}

/// True iff every model tensor is bitwise identical.
pub fn freeze_check<T: Real>(before: &DenseModel<T>, after: &DenseModel<T>) -> bool {
    let (a, b) = (before.named_tensors(), after.named_tensors());
    a.len() == b.len()
        && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::{count_params_exact, total_params};
    use crate::model::MlpKind;
    use crate::tensor::NormKind;

    fn spec() -> ModelSpec {
        ModelSpec {
            d: 8,
            n_layers: 2,
            n_heads: 2,
            d_mid: 16,
            mlp_kind: MlpKind::Gated,
            norm_kind: NormKind::LayerNorm,
            vocab_size: 20,
            max_seq_len: 8,
            tie_embeddings: false,
        }
    }

    fn tokens() -> Vec<usize> {
        (0..400).map(|i| (i * 7 + i / 3) % 20).collect()
    }

    fn quick(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            seq_len: 8,
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.reinmax.c, c.reinmax.tau), (1e-3, 0.05, 3.0, 1.0));
        assert_eq!(PruneBudget::DEFAULT_LAMBDA, 6.0);
        assert!(TrainConfig { lr: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { iterations: 0, ..c }.validate().is_err());
    }

    #[test]
    fn modes_parse() {
        let mut c = TrainConfig::default();
        for m in ["disp", "constrained", "elementwise", "no-gru"] {
            c.set_mode(m).unwrap();
            assert_eq!(c.mode_name(), m);
        }
        assert!(matches!(c.set_mode("bogus"), Err(DispError::Usage(_))));
    }

    #[test]
    fn weights_frozen_and_only_theta_optimized() {
        let s = spec();
        let model = DenseModel::<f64>::init(&s, 1).unwrap();
        let before = model.clone();
        let toks = tokens();
        let mut data = BatchSource::new(&toks, 8, 1, 0).unwrap();
        let budget = PruneBudget::new(&s, 0.5, 6.0).unwrap();
        let out = search(&model, &mut data, &budget, &quick(5), None, |_| {}).unwrap();
        assert!(freeze_check(&before, &model));
        assert_eq!(out.model_grad_buffers, 0);
        assert_eq!(out.optimizer_state_len, 2 * out.net.param_count());
        let mut perturbed = model.clone();
        perturbed.blocks[0].wq.data_mut()[0] += 1e-12;
        assert!(!freeze_check(&model, &perturbed));
    }

    #[test]
    fn full_budget_keeps_regularizer_near_zero() {
        let s = spec();
        let model = DenseModel::<f64>::init(&s, 1).unwrap();
        let toks = tokens();
        let mut data = BatchSource::new(&toks, 8, 1, 0).unwrap();
        let budget = PruneBudget::new(&s, 1.0, 6.0).unwrap();
        let out = search(&model, &mut data, &budget, &quick(3), None, |_| {}).unwrap();
        let first = &out.log.records[0];
        assert!(first.ratio > 0.85);
        assert!(first.open_fraction.iter().all(|&f| f > 0.85));
        assert_eq!(count_params_exact(&s, &out.gates), total_params(&s));
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let s = spec();
        let model = DenseModel::<f64>::init(&s, 1).unwrap();
        let toks = tokens();
        let budget = PruneBudget::new(&s, 0.5, 6.0).unwrap();
        let run = |seed| {
            let mut data = BatchSource::new(&toks, 8, 1, seed).unwrap();
            search(&model, &mut data, &budget, &TrainConfig { seed, ..quick(6) }, None, |_| {}).unwrap()
        };
        let (a, b, c) = (run(3), run(3), run(4));
        assert_eq!(a.log, b.log);
        assert_eq!(a.gates, b.gates);
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn constrained_mode_samples_tied_gates() {
        let s = spec();
        let g = Graph::<f64>::new();
        let net = HyperNet::<f64>::new(&s, GateParam::HyperNet, 0).unwrap();
        let theta = net.bind(&g);
        let lat = net.forward(&g, &theta).unwrap();
        let mut rng = stream_rng(0, Stream::GateSample, 0);
        let cfg = ReinMaxConfig { c: 0.0, ..ReinMaxConfig::default() };
        let gates = sample_gates(&g, &s, &lat, &cfg, Tying::Constrained, SampleMode::Sample, &mut rng).unwrap();
        for b in &gates {
            assert!(b.to_block_gates().is_constrained());
        }
    }

    #[test]
    fn run_log_csv_roundtrip_and_normalization() {
        let log = RunLog {
            records: vec![
                LogRecord { iteration: 0, lm: 2.5, r_raw: 0.4, ratio: 0.9, open_fraction: vec![0.9, 0.95] },
                LogRecord { iteration: 1, lm: 2.4, r_raw: 0.01, ratio: 0.52, open_fraction: vec![0.5, 0.6] },
            ],
        };
        let rn = log.r_normalized();
        assert_eq!(rn[0], 1.0);
        assert!((rn[1] - 0.025).abs() < 1e-15);
        assert_eq!(log.first_below(0.05), Some(1));
        let csv = log.to_csv();
        assert!(csv.starts_with("iteration,lm,r_raw,r_norm,ratio,open_b0,open_b1\n"));
        assert_eq!(RunLog::from_csv(&csv).unwrap(), log);
        let zero = RunLog {
            records: vec![LogRecord { iteration: 0, lm: 1.0, r_raw: 0.0, ratio: 1.0, open_fraction: vec![] }],
        };
        assert_eq!(zero.r_normalized(), vec![0.0]);
    }

    #[test]
    fn gradients_reach_every_hypernet_tensor() {
        let s = spec();
        let model = DenseModel::<f64>::init(&s, 2).unwrap();
        let net = HyperNet::<f64>::new(&s, GateParam::HyperNet, 0).unwrap();
        let toks = tokens();
        let mut data = BatchSource::new(&toks, 8, 1, 0).unwrap();
        let budget = PruneBudget::new(&s, 0.5, 6.0).unwrap();
        let out = search(&model, &mut data, &budget, &quick(2), Some(net.clone()), |_| {}).unwrap();
        for ((name, a), (_, b)) in net.named_tensors().iter().zip(out.net.named_tensors()) {
            assert_ne!(*a, b, "{name} unchanged");
        }
    }
}
