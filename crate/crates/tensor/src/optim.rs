//! SGD with momentum/weight decay and a cosine learning-rate schedule.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::element::Element;
use crate::param::{Gradients, ParamId, ParamStore};

/// Cosine annealing without restarts:
/// `lr(t) = lr_min + ½(lr_max − lr_min)(1 + cos(π t / T))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule {
            lr_max: 1e-2,
            lr_min: 1e-4,
            total_epochs: 150,
        }
    }
}

impl CosineSchedule {
    /// Learning rate at (possibly fractional) epoch `t`, clamped to `[0, T]`.
    pub fn lr(&self, t: f64) -> f64 {
        if self.total_epochs == 0 {
            return self.lr_min;
        }
        let t = t.clamp(0.0, self.total_epochs as f64);
        self.lr_min
            + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * t / self.total_epochs as f64).cos())
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// Update per trainable parameter `p` with gradient `g`:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd::new(0.9, 5e-4)
    }
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        for (id, grad) in grads.iter() {
            let param = store.get_mut(id);
            if param.frozen {
                continue;
            }
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; grad.numel()]);
            for ((p, g), vel) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(v.iter_mut())
            {
                let pv = p.as_f64();
                *vel = self.momentum * *vel + g.as_f64() + self.weight_decay * pv;
                *p = T::from_f64(pv - lr * *vel);
            }
        }
    }
}
