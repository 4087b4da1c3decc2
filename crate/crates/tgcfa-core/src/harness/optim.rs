//! Adam with a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub schedule: ScheduleKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            schedule: ScheduleKind::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            ScheduleKind::Constant => self.learning_rate,
            ScheduleKind::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

trait Elem: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Elem for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Elem for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Adam state over a fixed list of flat parameter tensors. Moment
/// estimates are kept in f64 regardless of the parameter precision.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: OptimConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step_impl<E: Elem>(&mut self, params: &mut [&mut [E]], grads: &[&[E]], lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(param.len(), grad.len());
            debug_assert_eq!(param.len(), m.len());
            for i in 0..param.len() {
                let g = grad[i].to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let update = lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
                param[i] = E::from_f64(param[i].to_f64() - update);
            }
        }
    }

    pub fn step_f32(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f64) {
        self.step_impl(params, grads, lr)
    }

    pub fn step_f64(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.step_impl(params, grads, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let cfg = OptimConfig::default();
        assert!((cfg.lr_at(0, 100) - 3e-4).abs() < 1e-12);
        assert!(cfg.lr_at(50, 100) < 3e-4 * 0.51);
        assert!(cfg.lr_at(100, 100).abs() < 1e-10);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(x) = 0.5 * sum((x - target)^2)
        let target = [1.0f32, -2.0, 0.5];
        let mut x = vec![0.0f32; 3];
        let cfg = OptimConfig {
            learning_rate: 0.05,
            schedule: ScheduleKind::Constant,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &[3]);
        for _ in 0..500 {
            let grad: Vec<f32> = x.iter().zip(target.iter()).map(|(a, t)| a - t).collect();
            adam.step_f32(&mut [&mut x], &[&grad], cfg.learning_rate);
        }
        for (a, t) in x.iter().zip(target.iter()) {
            assert!((a - t).abs() < 1e-3, "{a} vs {t}");
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = OptimConfig::default();
        let run = || {
            let mut x = vec![0.3f64, -0.7];
            let mut adam = Adam::new(cfg, &[2]);
            for step in 0..50 {
                let grad: Vec<f64> = x.iter().map(|a| 2.0 * a + 0.1).collect();
                adam.step_f64(&mut [&mut x], &[&grad], cfg.lr_at(step, 50));
            }
            x
        };
        assert_eq!(run(), run());
    }
}
