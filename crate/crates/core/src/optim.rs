//! Adam with decoupled weight decay, plus global-norm gradient clipping.

use crate::error::{DispError, Result};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for a fixed, ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, shapes: &[usize]) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(DispError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        Ok(AdamW {
            cfg,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of scalars of optimizer state.
    pub fn state_len(&self) -> usize {
        self.m.iter().chain(&self.v).map(Vec::len).sum()
    }

    /// One update. `grads[i]` may be `None` for parameters that received no
    /// gradient this step; they still decay.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DispError::contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (lit::<T>(self.cfg.beta1), lit::<T>(self.cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = lit::<T>(self.cfg.lr);
        let decay = T::one() - lr * lit::<T>(self.cfg.weight_decay);
        let eps = lit::<T>(self.cfg.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let data = p.data_mut();
            if data.len() != self.m[i].len() {
                return Err(DispError::dim("adamw", &[self.m[i].len()], &[data.len()]));
            }
            let g = grads[i].as_ref();
            for j in 0..data.len() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                let m = b1 * self.m[i][j] + (T::one() - b1) * gj;
                let v = b2 * self.v[i][j] + (T::one() - b2) * gj * gj;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let update = (m / bc1) / ((v / bc2).sqrt() + eps);
                data[j] = data[j] * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> T {
    let sq: T = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&x| x * x)
        .sum();
    let norm = sq.sqrt();
    let max = lit::<T>(max_norm);
    if norm > max && norm.is_finite() {
        let s = max / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f64>::new(cfg, &[2]).unwrap();
        let mut p = Tensor::from_vec(vec![1.0, -1.0]);
        let g = Some(Tensor::from_vec(vec![0.3, -7.0]));
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.data()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default(), &[1]).unwrap();
        let mut p = Tensor::from_vec(vec![2.0]);
        opt.step(&mut [&mut p], &[None]).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 1e-3 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut grads = vec![Some(Tensor::from_vec(vec![3.0f64])), None, Some(Tensor::from_vec(vec![4.0]))];
        let n = clip_global_norm(&mut grads, 1.0);
        assert_eq!(n, 5.0);
        let a = grads[0].as_ref().unwrap().data()[0];
        let b = grads[2].as_ref().unwrap().data()[0];
        assert!(((a * a + b * b).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        assert!(AdamW::<f64>::new(cfg, &[1]).is_err());
    }
}
