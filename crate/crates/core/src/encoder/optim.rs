use super::{EncoderParams, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter; the buffers follow the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    pub first_moment: Vec<f64>,
    /// Empty for SGD.
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, num_params: usize) -> Self {
        let second = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; num_params],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            learning_rate,
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: second,
        }
    }

    pub fn adam(learning_rate: f64, params: &EncoderParams) -> Self {
        Self::new(OptimizerKind::adam(), learning_rate, params.layout().len())
    }

    /// Applies one update to `params` in place and advances the step counter.
    pub fn apply(&mut self, params: &mut EncoderParams, grads: &Gradients) -> Result<()> {
        let n = params.layout().len();
        if grads.len() != n || self.first_moment.len() != n {
            return Err(Error::LayoutMismatch(format!(
                "optimizer step with {} params, {} grads, {} moments",
                n,
                grads.len(),
                self.first_moment.len()
            )));
        }
        self.step += 1;
        let lr = self.learning_rate;
        let values = params.values_mut();
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.second_moment.len() != n {
                    return Err(Error::LayoutMismatch("second moment length".into()));
                }
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..n {
                    let g = grads[i];
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    values[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for i in 0..n {
                    let buf = &mut self.first_moment[i];
                    *buf = momentum * *buf + grads[i];
                    values[i] -= lr * *buf;
                }
            }
        }
        Ok(())
    }
}
