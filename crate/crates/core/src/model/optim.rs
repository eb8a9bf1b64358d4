use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    #[default]
    Sgd,
    Adam,
}

/// Linear warmup to `base_lr`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            warmup_steps: (warmup_ratio * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    /// Learning rate for update number `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let left = self.total_steps.saturating_sub(step) as f64;
        self.base_lr * (left / span as f64).clamp(0.0, 1.0)
    }
}

/// Clipped first-order optimizer over a flat parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub clip_norm: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, clip_norm: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            kind,
            clip_norm,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> f64 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, gi) in p.data_mut().iter_mut().zip(g) {
                        *w -= lr * scale * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.steps as i32);
                let c2 = 1.0 - BETA2.powi(self.steps as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let gj = g[j] * scale;
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                        *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule::new(1.0, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr(9), 1.0);
        assert_eq!(s.lr(10), 1.0);
        assert!((s.lr(55) - 0.5).abs() < 1e-15);
        assert_eq!(s.lr(100), 0.0);
        assert_eq!(LrSchedule::new(0.3, 0.0, 5).lr(0), 0.3);
    }

    #[test]
    fn sgd_clips_to_norm() {
        let mut p = vec![Tensor::zeros(&[1, 2])];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, &p);
        let norm = opt.step(&mut p, &[vec![3.0, 4.0]], 1.0);
        assert_eq!(norm, 5.0);
        assert!((p[0].data()[0] + 0.6).abs() < 1e-15);
        assert!((p[0].data()[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::zeros(&[1, 2])];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &p);
        opt.step(&mut p, &[vec![0.5, -2.0]], 0.01);
        assert!((p[0].data()[0] + 0.01).abs() < 1e-9);
        assert!((p[0].data()[1] - 0.01).abs() < 1e-9);
    }
}
