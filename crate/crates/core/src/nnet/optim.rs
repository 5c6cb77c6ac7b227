use super::DenseNet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn momentum() -> Self {
        OptimizerKind::Momentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyperparameters plus auxiliary buffers shaped like the
/// parameters they update. Weight decay is added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, params: &DenseNet) -> Self {
        let n = params.num_params();
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Momentum { .. } => (vec![0.0; n], Vec::new()),
            OptimizerKind::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
        };
        OptimizerState {
            kind,
            lr,
            weight_decay,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut DenseNet, grad: &DenseNet) -> Result<()> {
        if !params.same_shape(grad) {
            return Err(Error::shape("gradient layout differs from parameters"));
        }
        if !self.first.is_empty() && self.first.len() != params.num_params() {
            return Err(Error::shape("optimizer buffers sized for another network"));
        }
        self.step += 1;
        let lr = self.lr;
        let wd = self.weight_decay;
        let p = params.params_mut();
        let g = grad.params();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in p.iter_mut().zip(g) {
                    *p -= lr * (g + wd * *p);
                }
            }
            OptimizerKind::Momentum { momentum } => {
                let first_step = self.step == 1;
                for ((p, &g), buf) in p.iter_mut().zip(g).zip(self.first.iter_mut()) {
                    let g = g + wd * *p;
                    *buf = if first_step { g } else { momentum * *buf + g };
                    *p -= lr * *buf;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, &g), m), v) in p
                    .iter_mut()
                    .zip(g)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let g = g + wd * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
