//! Adagrad and global-norm gradient clipping.

use crate::tensor::{Result, Tensor, TensorError};

/// Scales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the factor applied (1 when untouched).
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm <= max_norm {
        return 1.0;
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= factor;
        }
    }
    factor
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Per-coordinate Adagrad: `acc += g²; θ -= lr·g / (√acc + ε)`.
#[derive(Debug, Clone)]
pub struct Adagrad {
    learning_rate: f64,
    epsilon: f64,
    accum: Vec<Tensor>,
}

impl Adagrad {
    /// Zero accumulators shaped like `params`.
    pub fn new(learning_rate: f64, epsilon: f64, params: &[Tensor]) -> Self {
        assert!(learning_rate > 0.0 && epsilon > 0.0);
        Self {
            learning_rate,
            epsilon,
            accum: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Resumes from previously accumulated squared gradients.
    pub fn with_accumulators(learning_rate: f64, epsilon: f64, accum: Vec<Tensor>) -> Self {
        assert!(learning_rate > 0.0 && epsilon > 0.0);
        Self {
            learning_rate,
            epsilon,
            accum,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accum
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.accum.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adagrad_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for ((p, g), a) in params.iter().zip(grads).zip(&self.accum) {
            if p.shape() != g.shape() || p.shape() != a.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adagrad_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        for ((p, g), a) in params.iter_mut().zip(grads).zip(self.accum.iter_mut()) {
            for ((theta, &gv), acc) in p.data_mut().iter_mut().zip(g.data()).zip(a.data_mut()) {
                if gv == 0.0 {
                    continue;
                }
                *acc += gv * gv;
                *theta -= self.learning_rate * gv / (acc.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
