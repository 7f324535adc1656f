//! First-order optimizers over the per-array gradients of a [`ModelState`].

use serde::{Deserialize, Serialize};

use crate::model::ModelState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Radam,
}

impl OptimizerKind {
    pub fn build(self) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd),
            OptimizerKind::Radam => Box::new(RAdam::default()),
        }
    }
}

pub trait Optimizer {
    /// Applies one update to `model` from `grads` (one entry per array, φ
    /// then θ) at learning rate `lr`.
    fn step(&mut self, model: &mut ModelState, grads: &[Vec<f64>], lr: f64);
}

/// `w <- w - lr * g`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn step(&mut self, model: &mut ModelState, grads: &[Vec<f64>], lr: f64) {
        for (a, g) in model.arrays_mut().zip(grads) {
            for (w, gi) in a.data.iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
    }
}

/// Rectified Adam. While the variance estimate is too short-horizon to be
/// trusted (`rho_t <= 5`) it falls back to bias-corrected momentum SGD.
#[derive(Clone, Debug)]
pub struct RAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for RAdam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for RAdam {
    fn step(&mut self, model: &mut ModelState, grads: &[Vec<f64>], lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let b2t = b2.powi(self.t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho = rho_inf - 2.0 * self.t as f64 * b2t / (1.0 - b2t);
        let rect = (rho > 5.0)
            .then(|| ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt());
        for (((a, g), m), v) in model.arrays_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in a.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                *w -= match rect {
                    Some(r) => lr * r * m_hat / ((*vi / (1.0 - b2t)).sqrt() + self.eps),
                    None => lr * m_hat,
                };
            }
        }
    }
}
