//! First-order optimizers over a [`ParamStore`].

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::ParamStore;

/// Which update rule to run. The default is a momentum-free adaptive method
/// (RMSProp); plain SGD with momentum is available as an option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    RmsProp,
    SgdMomentum,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    /// RMSProp squared-gradient decay.
    pub alpha: f32,
    pub eps: f32,
    /// SGD momentum factor.
    pub momentum: f32,
    state: Vec<Option<ArrayD<f32>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32, weight_decay: f32) -> Optimizer {
        Optimizer {
            kind,
            lr,
            weight_decay,
            alpha: 0.9,
            eps: 1e-8,
            momentum: 0.9,
            state: Vec::new(),
        }
    }

    /// Applies one update using the gradients accumulated in the store.
    /// Weight decay enters as an L2 term added to the gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (idx, param) in store.iter_mut().enumerate() {
            if !param.trainable {
                continue;
            }
            let slot = self.state[idx].get_or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
            match self.kind {
                OptimizerKind::RmsProp => {
                    for ((v, g), s) in param
                        .value
                        .iter_mut()
                        .zip(param.grad.iter())
                        .zip(slot.iter_mut())
                    {
                        let g = g + self.weight_decay * *v;
                        *s = self.alpha * *s + (1.0 - self.alpha) * g * g;
                        *v -= self.lr * g / (s.sqrt() + self.eps);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for ((v, g), s) in param
                        .value
                        .iter_mut()
                        .zip(param.grad.iter())
                        .zip(slot.iter_mut())
                    {
                        let g = g + self.weight_decay * *v;
                        *s = self.momentum * *s + g;
                        *v -= self.lr * *s;
                    }
                }
            }
        }
    }
}
