use serde::{Deserialize, Serialize};

use super::config::{OptimConfig, OptimizerKind};
use crate::params::Parameters;

/// First and second moment estimates, flattened in parameter visiting order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub updates: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, parameters: usize) -> Self {
        let n = if kind == OptimizerKind::Adam { parameters } else { 0 };
        Self { kind, updates: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Applies one update of `grads` to `params`.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, cfg: &OptimConfig) {
        let mut flat = Vec::with_capacity(params.num_parameters());
        grads.visit(&mut |_, s| flat.extend_from_slice(s));
        self.updates += 1;
        let lr = cfg.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                let mut i = 0;
                params.visit_mut(&mut |_, s| {
                    for x in s.iter_mut() {
                        *x -= lr * flat[i];
                        i += 1;
                    }
                });
            }
            OptimizerKind::Adam => {
                let t = self.updates as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                let (m, v) = (&mut self.m, &mut self.v);
                let mut i = 0;
                params.visit_mut(&mut |_, s| {
                    for x in s.iter_mut() {
                        let g = flat[i];
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                        *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                        i += 1;
                    }
                });
            }
        }
    }
}
