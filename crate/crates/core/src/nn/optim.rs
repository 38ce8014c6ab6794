//! Adam with linear warmup followed by cosine decay.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Floor as a fraction of `peak`.
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        Self {
            peak,
            warmup_steps: 100,
            total_steps,
            min_ratio: 0.0,
        }
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            peak: lr,
            warmup_steps: 0,
            total_steps: 0,
            min_ratio: 1.0,
        }
    }

    /// Learning rate at zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (PI * progress).cos());
        self.peak * (self.min_ratio + (1.0 - self.min_ratio) * cosine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradient max-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(ps: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || ps.ids().map(|id| Array2::zeros(ps.value(id).raw_dim())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update from the gradients stored in `ps`.
    pub fn step(&mut self, ps: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !ps.grads_finite() {
            return Err(Error::Training("non-finite gradient".into()));
        }
        let scale = match self.cfg.clip_norm {
            Some(max) => {
                let norm = ps
                    .ids()
                    .map(|id| ps.grad(id).iter().map(|g| g * g).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = ps.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = ps.grad(id).clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            Zip::from(ps.value_mut(id))
                .and(m)
                .and(v)
                .and(&grad)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", array![[1.5, -2.0]]);
        let mut opt = Adam::new(&ps, AdamConfig::default());
        for _ in 0..10 {
            opt.step(&mut ps, 1e-3).unwrap();
        }
        assert_eq!(ps.value(id), &array![[1.5, -2.0]]);
    }

    fn run_quadratic() -> Vec<f64> {
        let mut ps = ParamStore::new();
        let id = ps.add("x", array![[3.0]]);
        let sched = LrSchedule::new(0.05, 500);
        let mut opt = Adam::new(&ps, AdamConfig { clip_norm: None, ..Default::default() });
        let mut traj = Vec::new();
        for step in 0..500 {
            let x = ps.value(id)[[0, 0]];
            ps.zero_grads();
            // loss = (x - 1)^2
            ps.grad_mut(id)[[0, 0]] = 2.0 * (x - 1.0);
            opt.step(&mut ps, sched.lr_at(step)).unwrap();
            traj.push(ps.value(id)[[0, 0]]);
        }
        traj
    }

    #[test]
    fn quadratic_converges() {
        let traj = run_quadratic();
        assert!((traj.last().unwrap() - 1.0).abs() < 1e-3, "{}", traj.last().unwrap());
    }

    #[test]
    fn deterministic_trajectory() {
        let a = run_quadratic();
        let b = run_quadratic();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_gradient_is_error() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", array![[1.0]]);
        ps.grad_mut(id)[[0, 0]] = f64::NAN;
        let mut opt = Adam::new(&ps, AdamConfig::default());
        assert!(matches!(opt.step(&mut ps, 1e-3), Err(Error::Training(_))));
        assert!(opt.step(&mut ps, 0.0).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(1e-3, 1100);
        assert!((s.lr_at(0) - 1e-5).abs() < 1e-15);
        assert!((s.lr_at(99) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(600) - 5e-4).abs() < 1e-12);
        assert!(s.lr_at(1100) < 1e-12);
    }
}
