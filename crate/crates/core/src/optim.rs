//! Optimizers and the learning-rate schedule for the training loop.
//!
//! Two standard optimizers are provided: SGD with momentum and AdamW.
//! Weight decay follows the usual transformer convention — it applies only
//! to parameters named `*.weight` (projection matrices), never to biases,
//! norm gains, the class token, or position embeddings. AdamW's decay is
//! decoupled; SGD folds it into the gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::vit::ParameterStore;

/// Which update rule to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

const SGD_MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state aligned with a [`ParameterStore`]'s slot order.
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    /// SGD momentum or Adam first moment, per parameter.
    first_moment: Vec<Array2<f64>>,
    /// Adam second moment, per parameter (unused for SGD).
    second_moment: Vec<Array2<f64>>,
    /// Whether weight decay applies, per parameter.
    decayed: Vec<bool>,
    steps: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParameterStore, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> =
            params.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Optimizer {
            kind,
            weight_decay,
            first_moment: zeros.clone(),
            second_moment: zeros,
            decayed: params.iter().map(|p| p.name.ends_with(".weight")).collect(),
            steps: 0,
        }
    }

    /// Applies one update with the given (already scheduled) learning rate,
    /// consuming the gradients currently accumulated in `params`.
    pub fn step(&mut self, params: &mut ParameterStore, learning_rate: f64) {
        self.steps += 1;
        for (slot, p) in params.iter_mut().enumerate() {
            let wd = if self.decayed[slot] { self.weight_decay } else { 0.0 };
            match self.kind {
                OptimizerKind::Sgd => {
                    let m = &mut self.first_moment[slot];
                    // v ← μ·v + (g + wd·θ); θ ← θ − lr·v
                    m.zip_mut_with(&(&p.grad + &(&p.value * wd)), |v, g| {
                        *v = SGD_MOMENTUM * *v + g;
                    });
                    p.value.scaled_add(-learning_rate, m);
                }
                OptimizerKind::AdamW => {
                    let bias1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
                    let bias2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
                    let m = &mut self.first_moment[slot];
                    let v = &mut self.second_moment[slot];
                    m.zip_mut_with(&p.grad, |m, g| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    });
                    v.zip_mut_with(&p.grad, |v, g| {
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    });
                    for ((theta, m), v) in p.value.iter_mut().zip(m.iter()).zip(v.iter()) {
                        let m_hat = m / bias1;
                        let v_hat = v / bias2;
                        *theta -=
                            learning_rate * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *theta);
                    }
                }
            }
        }
    }
}

/// Learning rate at 1-based iteration `t` of `total`: linear warmup over the
/// first `warmup_fraction` of the run, then cosine decay from `base` down to
/// `base · min_fraction`.
pub fn learning_rate_at(
    base: f64,
    t: usize,
    total: usize,
    warmup_fraction: f64,
    min_fraction: f64,
) -> f64 {
    debug_assert!(t >= 1 && t <= total);
    let warmup = (warmup_fraction * total as f64).ceil() as usize;
    if t <= warmup && warmup > 0 {
        return base * t as f64 / warmup as f64;
    }
    let floor = base * min_fraction;
    if total == warmup {
        return base;
    }
    let progress = (t - warmup) as f64 / (total - warmup) as f64;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
