//! SGD with momentum and L2 weight decay, and the stepped learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

/// `g <- grad + wd * theta; v <- momentum * v + g; theta <- theta - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.velocity.len(), "optimizer/parameter size mismatch");
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Piecewise-constant schedule: `base * factor^(milestones passed)`.
/// Epochs are fractional so milestones may fall inside an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base: f64,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr(&self, epoch: f64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_on_a_quadratic_matches_closed_form() {
        // f(theta) = a/2 theta^2
        let (a, theta0, lr, mom, wd) = (3.0, 1.5, 0.1, 0.9, 5e-4);
        let mut sgd = Sgd::new(1, mom, wd);
        let mut p = [theta0];
        sgd.step(&mut p, &[a * theta0], lr);
        let v1 = (a + wd) * theta0;
        let theta1 = theta0 - lr * v1;
        assert!((p[0] - theta1).abs() < 1e-10);
        sgd.step(&mut p, &[a * theta1], lr);
        let v2 = mom * v1 + (a + wd) * theta1;
        assert!((p[0] - (theta1 - lr * v2)).abs() < 1e-10);
    }

    #[test]
    fn schedule_counts_passed_milestones() {
        let s = StepSchedule {
            base: 0.1,
            milestones: vec![120.0, 160.0, 180.0],
            factor: 0.1,
        };
        assert_eq!(s.lr(0.0), 0.1);
        assert!((s.lr(130.0) - 0.01).abs() < 1e-15);
        assert!((s.lr(199.0) - 1e-4).abs() < 1e-15);
    }
}
