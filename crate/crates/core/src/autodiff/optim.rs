//! Adam with per-parameter step counts.

use ndarray::ArrayD;

use super::{Gradients, Module, Param};

/// Standard Adam. Each parameter keeps its own step counter, advanced
/// only when that parameter receives a gradient, so alternating between
/// losses that touch disjoint parameter sets leaves the untouched set
/// bit-for-bit identical (values and optimizer state).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update for every trainable parameter present in `grads`.
    pub fn step<M: Module + ?Sized>(&self, module: &mut M, grads: &Gradients) {
        for p in module.params_mut() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(p.name()) {
                self.update_param(p, g);
            }
        }
    }

    pub fn update_param(&self, p: &mut Param, g: &ArrayD<f64>) {
        assert_eq!(p.value.shape(), g.shape(), "grad shape for `{}`", p.name());
        p.t += 1;
        let bc1 = 1.0 - self.beta1.powi(p.t as i32);
        let bc2 = 1.0 - self.beta2.powi(p.t as i32);
        p.m.zip_mut_with(g, |m, &gi| *m = self.beta1 * *m + (1.0 - self.beta1) * gi);
        p.v.zip_mut_with(g, |v, &gi| *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi);
        ndarray::Zip::from(&mut p.value)
            .and(&p.m)
            .and(&p.v)
            .for_each(|w, &m, &v| {
                *w -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
    }
}
