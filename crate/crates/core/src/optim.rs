//! Adam with bias correction and no weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::Module;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub cfg: AdamConfig,
    step: u64,
    /// First and second moments per trainable parameter, in visiting order.
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, cfg: AdamConfig) -> Self {
        Self {
            lr,
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// in place; callers zero them before the next accumulation.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let lr_t = T::lit(self.lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t)));
        let eps_t = T::lit(self.cfg.eps * (1.0 - b2.powi(t)).sqrt());
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let one = T::one();
        let mut idx = 0;
        let moments = &mut self.moments;
        model.visit("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if moments.len() == idx {
                moments.push((vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            }
            let (m, v) = &mut moments[idx];
            assert_eq!(m.len(), p.len(), "parameter set changed between optimizer steps");
            for ((w, &g), (mi, vi)) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                *w -= lr_t * *mi / (vi.sqrt() + eps_t);
            }
            idx += 1;
        });
    }
}
