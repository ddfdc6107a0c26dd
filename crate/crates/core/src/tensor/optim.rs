//! AdamW: adaptive moments with decoupled weight decay.

use std::collections::BTreeMap;

use super::{arg_err, shape_err, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment buffers per parameter plus the shared step counter.
/// Moments are created lazily on the first update of each parameter.
pub struct OptimState<T: Real> {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> OptimState<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        OptimState {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts a new optimizer step; every subsequent [`OptimState::apply`]
    /// uses the incremented counter for bias correction.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Applies one decoupled-weight-decay update to a single parameter.
    /// `lr` is the (possibly scheduled) learning rate for this step.
    pub fn apply(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if self.step == 0 {
            return Err(arg_err("adamw", "apply called before begin_step"));
        }
        if param.shape() != grad.shape() {
            return Err(shape_err(
                "adamw",
                format!("param {:?} vs grad {:?} for '{name}'", param.shape(), grad.shape()),
            ));
        }
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        if m.shape() != param.shape() {
            return Err(shape_err(
                "adamw",
                format!("stale moment shape {:?} for '{name}'", m.shape()),
            ));
        }
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(1.0 - lr * self.cfg.weight_decay);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        for ((p, mm), (vv, &gg)) in param
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(grad.data()))
        {
            *p *= decay;
            *mm = b1 * *mm + (one - b1) * gg;
            *vv = b2 * *vv + (one - b2) * gg * gg;
            let mhat = *mm / bc1;
            let vhat = *vv / bc2;
            *p -= lr_t * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    /// Moment buffers in deterministic (sorted) order, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.moments.iter().map(|(k, (m, v))| (k.as_str(), m, v))
    }

    pub fn insert_moments(&mut self, name: String, m: Tensor<T>, v: Tensor<T>) {
        self.moments.insert(name, (m, v));
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}

/// Half-cosine decay from `base` at `iter == 0` to 0 at `iter == total`.
pub fn cosine_lr(base: f64, iter: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (iter.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut opt: OptimState<f64> = OptimState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = Tensor::new(vec![2], vec![1.5, -2.5]).unwrap();
        let g = Tensor::zeros(&[2]);
        opt.begin_step();
        opt.apply("w", &mut p, &g, 0.1).unwrap();
        assert_eq!(p.data(), &[1.5, -2.5]);
    }

    #[test]
    fn single_step_descends_quadratic() {
        // f(w) = w^2 at w=1: gradient 2. One step with lr 0.1 must shrink |w|.
        let mut opt: OptimState<f64> = OptimState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        opt.begin_step();
        opt.apply("w", &mut p, &g, 0.1).unwrap();
        assert!(p.item().abs() < 1.0);
    }

    #[test]
    fn converges_on_2d_quadratic() {
        // 200 steps with cosine-decayed lr on f(w) = w0^2 + w1^2.
        let mut opt: OptimState<f64> = OptimState::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = Tensor::new(vec![2], vec![1.0, -1.5]).unwrap();
        for it in 0..200 {
            let g = Tensor::new(vec![2], vec![2.0 * p.data()[0], 2.0 * p.data()[1]]).unwrap();
            let lr = cosine_lr(0.05, it, 200);
            opt.begin_step();
            opt.apply("w", &mut p, &g, lr).unwrap();
        }
        let loss: f64 = p.data().iter().map(|v| v * v).sum();
        assert!(loss < 1e-3, "final loss {loss}");
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut opt: OptimState<f64> = OptimState::new(AdamWConfig::default());
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        opt.begin_step();
        assert!(opt.apply("w", &mut p, &g, 0.1).is_err());
    }
}
