//! Binary ReinMax straight-through estimator.
//!
//! Forward values are exact Bernoulli draws; the backward pass follows the
//! second-order surrogate `2π₁ − π₀/2`.

use rand::Rng;

use crate::error::{DispError, Result};
use crate::tensor::{lit, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReinMaxConfig {
    pub tau: f64,
    /// Bias added to every latent; `c = 3` opens ~95% of gates at zero latents.
    pub c: f64,
    pub seed: u64,
}

impl Default for ReinMaxConfig {
    fn default() -> Self {
        ReinMaxConfig {
            tau: 1.0,
            c: 3.0,
            seed: 0,
        }
    }
}

impl ReinMaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(DispError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !self.c.is_finite() {
            return Err(DispError::Config(format!("gate bias must be finite, got {}", self.c)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Deterministic,
}

/// `π₀ = sigmoid(x + c)`.
pub fn gate_open_probability<T: Real>(x: &Tensor<T>, cfg: &ReinMaxConfig) -> Tensor<T> {
    let c = lit::<T>(cfg.c);
    x.map(|v| crate::tensor::sigmoid(v + c))
}

/// Samples gates from latents `x`. In sample mode `rng` supplies one
/// Bernoulli draw per element; deterministic mode thresholds `π₀ ≥ 0.5`
/// and returns a constant.
pub fn reinmax_forward<T: Real, R: Rng + ?Sized>(
    g: &Graph<T>,
    x: Var,
    cfg: &ReinMaxConfig,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Var> {
    cfg.validate()?;
    let pi0 = gate_open_probability(&g.value_ref(x), cfg);
    if pi0.data().iter().any(|p| p.is_nan()) {
        return Err(DispError::contract("reinmax: non-finite latents"));
    }
    match mode {
        SampleMode::Deterministic => {
            let half = lit::<T>(0.5);
            Ok(g.constant(pi0.map(|p| if p >= half { T::one() } else { T::zero() })))
        }
        SampleMode::Sample => {
            let draw: Vec<bool> = pi0
                .data()
                .iter()
                .map(|p| rng.gen::<f64>() < p.to_f64().unwrap())
                .collect();
            reinmax_with_draw(g, x, &draw, cfg)
        }
    }
}

/// The estimator for a given draw `B`: value `B`, gradient of `2π₁ − π₀/2`.
pub fn reinmax_with_draw<T: Real>(g: &Graph<T>, x: Var, draw: &[bool], cfg: &ReinMaxConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x);
    if draw.len() != g.value_ref(x).len() {
        return Err(DispError::dim("reinmax", &shape, &[draw.len()]));
    }
    let b = g.constant(Tensor::new(
        shape,
        draw.iter().map(|&on| if on { T::one() } else { T::zero() }).collect(),
    )?);
    let y = g.add_scalar(x, lit(cfg.c));
    let pi0 = g.sigmoid(y);
    let soft = g.sigmoid(g.scale(y, lit(1.0 / cfg.tau)));
    let pi1 = g.scale(g.add(b, soft)?, lit(0.5));
    // value π₁, gradient of sigmoid through y
    let offset = g.stop_gradient(g.sub(g.log(pi1), y)?);
    let pi1 = g.sigmoid(g.add(offset, y)?);
    let pi2 = g.sub(g.scale(pi1, lit(2.0)), g.scale(pi0, lit(0.5)))?;
    let centred = g.sub(pi2, g.stop_gradient(pi2))?;
    g.add(centred, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream_rng, Stream};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Derivative of the estimator output w.r.t. one latent with `B` and the
    /// stop-gradient offset frozen at `x0`, by central differences.
    fn frozen_fd(x0: f64, b: f64, cfg: &ReinMaxConfig) -> f64 {
        let pi1 = (b + sig((x0 + cfg.c) / cfg.tau)) / 2.0;
        let k = pi1.ln() - (x0 + cfg.c);
        let f = |x: f64| 2.0 * sig(k + x + cfg.c) - 0.5 * sig(x + cfg.c);
        let h = 1e-5;
        (f(x0 + h) - f(x0 - h)) / (2.0 * h)
    }

    #[test]
    fn open_probability_examples() {
        let cfg = ReinMaxConfig::default();
        let p = gate_open_probability(&Tensor::from_vec(vec![0.0, -3.0, 1e6]), &cfg);
        assert!((p.data()[0] - 0.952_574_126_822_433_4_f64).abs() < 1e-15);
        assert_eq!(p.data()[1], 0.5);
        assert_eq!(p.data()[2], 1.0);
    }

    #[test]
    fn deterministic_mode_thresholds() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![0.0, -10.0, -3.0, -3.1]));
        let cfg = ReinMaxConfig::default();
        let mut rng = stream_rng(0, Stream::GateSample, 0);
        let s = reinmax_forward(&g, x, &cfg, SampleMode::Deterministic, &mut rng).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 1.0, 0.0]);
        assert!(!g.requires_grad(s));
    }

    #[test]
    fn rejects_nonpositive_tau() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![0.0]));
        let mut rng = stream_rng(0, Stream::GateSample, 0);
        for tau in [0.0, -1.0, f64::NAN] {
            let cfg = ReinMaxConfig { tau, ..ReinMaxConfig::default() };
            let r = reinmax_forward(&g, x, &cfg, SampleMode::Sample, &mut rng);
            assert!(matches!(r, Err(DispError::Config(_))));
        }
    }

    #[test]
    fn sample_values_equal_draw() {
        let g = Graph::<f64>::new();
        let mut rng = stream_rng(1, Stream::Verification, 0);
        let x = g.param(normal_tensor(&mut rng, &[500], 4.0));
        let cfg = ReinMaxConfig::default();
        let mut a = stream_rng(7, Stream::GateSample, 3);
        let s = reinmax_forward(&g, x, &cfg, SampleMode::Sample, &mut a).unwrap();
        let pi0 = gate_open_probability(&g.value(x), &cfg);
        let mut b = stream_rng(7, Stream::GateSample, 3);
        for (v, p) in g.value(s).data().iter().zip(pi0.data()) {
            let drawn = b.gen::<f64>() < *p;
            assert_eq!(*v, if drawn { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn gradient_matches_frozen_draw_finite_differences() {
        let cfgs = [
            ReinMaxConfig::default(),
            ReinMaxConfig { tau: 0.5, c: 1.0, seed: 0 },
            ReinMaxConfig { tau: 2.0, c: -1.0, seed: 0 },
        ];
        for (i, cfg) in cfgs.iter().enumerate() {
            let mut rng = stream_rng(i as u64, Stream::Verification, 2);
            let x0 = normal_tensor::<f64, _>(&mut rng, &[64], 3.0);
            let g = Graph::new();
            let x = g.param(x0.clone());
            let mut draw_rng = stream_rng(i as u64, Stream::GateSample, 0);
            let s = reinmax_forward(&g, x, cfg, SampleMode::Sample, &mut draw_rng).unwrap();
            let b = g.value(s);
            g.backward(g.sum(s)).unwrap();
            let analytic = g.grad(x).unwrap();
            let numeric: Vec<f64> = (0..64).map(|j| frozen_fd(x0.data()[j], b.data()[j], cfg)).collect();
            let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum();
            let na: f64 = analytic.data().iter().map(|a| a * a).sum();
            let nn: f64 = numeric.iter().map(|a| a * a).sum();
            let rel = diff.sqrt() / na.sqrt().max(nn.sqrt());
            assert!(rel <= 1e-6, "cfg {cfg:?}: rel err {rel}");
        }
    }

    #[test]
    fn initial_open_fraction_near_sigmoid_c() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[10_000]));
        let mut rng = stream_rng(3, Stream::GateSample, 0);
        let s = reinmax_forward(&g, x, &ReinMaxConfig::default(), SampleMode::Sample, &mut rng).unwrap();
        let mean = g.value(s).sum() / 10_000.0;
        assert!((mean - sig(3.0)).abs() <= 0.01, "{mean}");
    }

    proptest! {
        #[test]
        fn values_binary_and_gradient_nonvanishing(
            xs in proptest::collection::vec(-13.0f64..7.0, 1..40),
            seed in 0u64..1000,
        ) {
            let cfg = ReinMaxConfig::default();
            let g = Graph::<f64>::new();
            let x = g.param(Tensor::from_vec(xs.clone()));
            let mut rng = stream_rng(seed, Stream::GateSample, 0);
            let s = reinmax_forward(&g, x, &cfg, SampleMode::Sample, &mut rng).unwrap();
            prop_assert!(g.value(s).data().iter().all(|&v| v == 0.0 || v == 1.0));
            g.backward(g.sum(s)).unwrap();
            for (gx, x) in g.grad(x).unwrap().data().iter().zip(&xs) {
                if (x + cfg.c).abs() <= 10.0 {
                    prop_assert!(gx.abs() > 0.0);
                }
            }
        }

        #[test]
        fn same_seed_same_draw(seed in 0u64..10_000, step in 0u64..100) {
            let cfg = ReinMaxConfig::default();
            let run = || {
                let g = Graph::<f64>::new();
                let x = g.param(Tensor::from_vec(vec![-3.0; 32]));
                let mut rng = stream_rng(seed, Stream::GateSample, step);
                g.value(reinmax_forward(&g, x, &cfg, SampleMode::Sample, &mut rng).unwrap())
            };
            prop_assert_eq!(run(), run());
        }
    }
}
