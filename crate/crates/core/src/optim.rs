//! SGD with momentum, decoupled weight decay, linear warmup and cosine decay.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Total steps for cosine decay after warmup; `None` keeps the base rate.
    pub total_steps: Option<usize>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 300,
            total_steps: None,
        }
    }
}

pub struct SgdMomentum {
    cfg: SgdConfig,
    step: usize,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(cfg: SgdConfig, params: &[Tensor]) -> SgdMomentum {
        let velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        SgdMomentum { cfg, step: 0, velocity }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Effective learning rate at a given step:
    /// `base * min((step+1)/warmup, 1) * cosine(step)` with the cosine factor
    /// equal to 1 up to the warmup step and decaying to 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            (((step + 1) as f64) / self.cfg.warmup_steps as f64).min(1.0)
        };
        let cosine = match self.cfg.total_steps {
            Some(total) if step > self.cfg.warmup_steps && total > self.cfg.warmup_steps => {
                let t = (step - self.cfg.warmup_steps) as f64
                    / (total - self.cfg.warmup_steps) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
            _ => 1.0,
        };
        self.cfg.lr * warm * cosine
    }

    /// One update: `v <- mu*v + g + wd*w; w <- w - lr_t*v`.
    /// Consumes and clears the accumulated gradients.
    pub fn apply(&mut self, params: &[Tensor]) -> f64 {
        assert_eq!(params.len(), self.velocity.len());
        let lr = self.lr_at(self.step);
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (param, vel) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = param.grad();
            let g = grad.as_deref().unwrap_or(&[]);
            let mut w = param.to_vec();
            for i in 0..w.len() {
                let gi = g.get(i).copied().unwrap_or(0.0);
                vel[i] = mu * vel[i] + gi + wd * w[i];
                w[i] -= lr * vel[i];
            }
            param.set_data(&w);
            param.zero_grad();
        }
        self.step += 1;
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent_when_no_momentum() {
        let p = Tensor::param(vec![1.0, 2.0], &[2]);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: None,
        };
        let mut opt = SgdMomentum::new(cfg, std::slice::from_ref(&p));
        p.sq_sum().backward().unwrap(); // grad = 2w
        opt.apply(std::slice::from_ref(&p));
        let w = p.to_vec();
        assert!((w[0] - (1.0 - 0.1 * 2.0)).abs() < 1e-12);
        assert!((w[1] - (2.0 - 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn two_step_momentum_recursion() {
        // mu=0.9, constant g=1, lr=1, wd=0, from w=0: w2 = -(1) - (1.9) = -2.9
        let p = Tensor::param(vec![0.0], &[1]);
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: None,
        };
        let mut opt = SgdMomentum::new(cfg, std::slice::from_ref(&p));
        for _ in 0..2 {
            p.sum_all().backward().unwrap(); // grad = 1
            opt.apply(std::slice::from_ref(&p));
        }
        assert!((p.item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn warmup_schedule_contract() {
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 100,
            total_steps: Some(1000),
        };
        let opt = SgdMomentum::new(cfg, &[]);
        assert!((opt.lr_at(0) - 0.5 / 100.0).abs() < 1e-15);
        assert!((opt.lr_at(100) - 0.5).abs() < 1e-15);
        // non-decreasing over warmup
        for s in 1..=100 {
            assert!(opt.lr_at(s) >= opt.lr_at(s - 1));
        }
        // decays afterwards, reaching ~0 at the end
        assert!(opt.lr_at(500) < 0.5);
        assert!(opt.lr_at(999) < 0.01);
    }
}
