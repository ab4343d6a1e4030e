//! AdamW with cosine-annealed warm restarts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    /// Peak learning rate.
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "betas must lie in (0, 1): {} {}",
                self.beta1, self.beta2
            )));
        }
        if self.alpha < 0.0 || self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(
                "alpha and weight decay must be >= 0, epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay. Decay is applied directly to the
/// parameters and never enters the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient
    /// entry are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of {}", store.get(*id).name),
                });
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = store.get(*id);
            if !p.kind.is_trainable() {
                continue;
            }
            let decay = if p.kind.decays() { c.weight_decay } else { 0.0 };
            let n = p.tensor.numel();
            let mo = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let theta = store.tensor_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * gi;
                mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                theta[i] -= lr * (mhat / (vhat.sqrt() + c.epsilon)) + lr * decay * theta[i];
            }
        }
        Ok(())
    }
}

/// Epoch counts per cycle: `L₁ = base`, `Lₖ₊₁ = ⌈Lₖ · growth⌉`.
pub fn cycle_lengths(base: usize, growth: f64, n: usize) -> Result<Vec<usize>> {
    if base < 1 || n < 1 || !(growth >= 1.0 && growth.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "cycle_lengths(base={base}, growth={growth}, n={n})"
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut len = base;
    for _ in 0..n {
        out.push(len);
        len = (len as f64 * growth).ceil() as usize;
    }
    Ok(out)
}

/// Cosine annealing from `eta_max` at step 0 toward `eta_min` at the end of
/// the cycle.
pub fn cosine_lr(step_in_cycle: usize, steps_in_cycle: usize, eta_max: f64, eta_min: f64) -> f64 {
    debug_assert!(step_in_cycle < steps_in_cycle.max(1));
    let frac = step_in_cycle as f64 / steps_in_cycle as f64;
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Position of one epoch in the warm-restart plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSlot {
    /// Zero-based cycle index.
    pub cycle: usize,
    pub epoch_in_cycle: usize,
    pub cycle_len: usize,
    pub lr: f64,
    /// True for the last epoch of a cycle (a snapshot follows).
    pub ends_cycle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleSchedule {
    pub base_epochs: usize,
    pub growth: f64,
    pub num_cycles: usize,
    pub eta_max: f64,
    pub eta_min: f64,
}

impl CycleSchedule {
    pub fn lengths(&self) -> Result<Vec<usize>> {
        cycle_lengths(self.base_epochs, self.growth, self.num_cycles)
    }

    pub fn total_epochs(&self) -> Result<usize> {
        Ok(self.lengths()?.iter().sum())
    }

    /// Every epoch of the run, in order; the learning rate is held fixed
    /// within an epoch.
    pub fn epochs(&self) -> Result<Vec<EpochSlot>> {
        let mut out = Vec::new();
        for (cycle, len) in self.lengths()?.into_iter().enumerate() {
            for e in 0..len {
                out.push(EpochSlot {
                    cycle,
                    epoch_in_cycle: e,
                    cycle_len: len,
                    lr: cosine_lr(e, len, self.eta_max, self.eta_min),
                    ends_cycle: e + 1 == len,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn cycle_length_examples() {
        assert_eq!(cycle_lengths(10, 1.5, 4).unwrap(), vec![10, 15, 23, 35]);
        assert_eq!(cycle_lengths(10, 1.0, 3).unwrap(), vec![10, 10, 10]);
        assert_eq!(cycle_lengths(1, 1.5, 3).unwrap(), vec![1, 2, 3]);
        assert!(cycle_lengths(0, 1.5, 3).is_err());
        assert!(cycle_lengths(3, 0.9, 3).is_err());
        assert!(cycle_lengths(3, 1.5, 0).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 0.0), 1e-3);
        assert!((cosine_lr(5, 10, 1e-3, 0.0) - 5e-4).abs() < 1e-15);
        let near_end = cosine_lr(999_999, 1_000_000, 1e-3, 0.0);
        assert!(near_end < 1e-13);
    }

    #[test]
    fn schedule_restarts_and_decreases() {
        let s = CycleSchedule {
            base_epochs: 10,
            growth: 1.5,
            num_cycles: 4,
            eta_max: 1e-3,
            eta_min: 0.0,
        };
        let epochs = s.epochs().unwrap();
        assert_eq!(epochs.len(), 83);
        assert_eq!(epochs.iter().filter(|e| e.ends_cycle).count(), 4);
        for w in epochs.windows(2) {
            if w[1].cycle == w[0].cycle {
                assert!(w[1].lr < w[0].lr);
            } else {
                assert_eq!(w[1].lr, 1e-3);
            }
        }
    }

    fn scalar_store(v: f64, kind: ParamKind) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", kind, Tensor::vector(vec![v]));
        (s, id)
    }

    #[test]
    fn first_step_is_lr_sized() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut s, id) = scalar_store(0.5, ParamKind::Weight);
        let mut opt = AdamW::new(cfg).unwrap();
        opt.step(&mut s, &[(id, Tensor::vector(vec![1.0]))], 1e-3).unwrap();
        let expected = 0.5 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert_eq!(s.get(id).tensor.data()[0], expected);
    }

    #[test]
    fn zero_gradient_cases() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut s, id) = scalar_store(0.5, ParamKind::Weight);
        let mut opt = AdamW::new(cfg).unwrap();
        opt.step(&mut s, &[(id, Tensor::vector(vec![0.0]))], 1e-3).unwrap();
        assert_eq!(s.get(id).tensor.data()[0], 0.5);

        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let (mut s, id) = scalar_store(0.5, ParamKind::Weight);
        let mut opt = AdamW::new(cfg).unwrap();
        opt.step(&mut s, &[(id, Tensor::vector(vec![0.0]))], 1e-2).unwrap();
        assert_eq!(s.get(id).tensor.data()[0], 0.5 - 1e-2 * 0.1 * 0.5);

        // biases are not decayed
        let (mut s, id) = scalar_store(0.5, ParamKind::Bias);
        let mut opt = AdamW::new(cfg).unwrap();
        opt.step(&mut s, &[(id, Tensor::vector(vec![0.0]))], 1e-2).unwrap();
        assert_eq!(s.get(id).tensor.data()[0], 0.5);
    }

    /// Plain Adam written out independently.
    fn adam_reference(grads: &[f64], theta0: f64, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut th) = (0.0, 0.0, theta0);
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            th -= lr * (mh / (vh.sqrt() + eps)) + lr * 0.0 * th;
        }
        th
    }

    #[test]
    fn no_decay_matches_plain_adam() {
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut s, id) = scalar_store(1.0, ParamKind::Weight);
        let mut opt = AdamW::new(cfg).unwrap();
        for &g in &grads {
            opt.step(&mut s, &[(id, Tensor::vector(vec![g]))], 1e-2).unwrap();
        }
        assert_eq!(s.get(id).tensor.data()[0], adam_reference(&grads, 1.0, 1e-2));
    }

    #[test]
    fn descends_on_quadratic() {
        let (mut s, id) = scalar_store(1.0, ParamKind::Weight);
        let mut opt = AdamW::new(AdamWConfig {
            alpha: 0.01,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..200 {
            let theta = s.get(id).tensor.data()[0];
            opt.step(&mut s, &[(id, Tensor::vector(vec![theta]))], 0.01).unwrap();
        }
        assert!(s.get(id).tensor.data()[0].abs() < 0.1);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(AdamW::new(AdamWConfig {
            beta1: 1.0,
            ..Default::default()
        })
        .is_err());
        let (mut s, id) = scalar_store(1.0, ParamKind::Weight);
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        assert!(opt
            .step(&mut s, &[(id, Tensor::vector(vec![f64::NAN]))], 1e-3)
            .is_err());
    }
}
