use serde::{Deserialize, Serialize};

/// AdamW with decoupled weight decay applied to masked coordinates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, weight_decay: f64, decay: Vec<bool>) -> Self {
        assert_eq!(decay.len(), n);
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.decay[i] {
                params[i] -= lr * self.weight_decay * params[i];
            }
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}

/// Linear warmup then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule {
            base_lr: 1.0,
            warmup_steps: 4,
            total_steps: 14,
        };
        assert_eq!(s.lr(0), 0.25);
        assert_eq!(s.lr(3), 1.0);
        assert_eq!(s.lr(4), 1.0);
        assert!((s.lr(9) - 0.5).abs() < 1e-12);
        assert!(s.lr(14).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = AdamW::new(2, 0.9, 0.999, 0.0, vec![false; 2]);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = vec![1.0, 1.0];
        let mut opt = AdamW::new(2, 0.9, 0.999, 0.5, vec![true, false]);
        opt.step(&mut p, &[0.0, 0.0], 0.1);
        assert!((p[0] - 0.95).abs() < 1e-12);
        assert_eq!(p[1], 1.0);
    }
}
