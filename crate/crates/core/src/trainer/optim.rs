use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn issues(&self, name: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            out.push(format!("{name}.lr must be ≥ 0, got {}", self.lr));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name}.{k} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("{name}.eps must be positive, got {}", self.eps));
        }
        out
    }
}

/// Adam with bias correction, one instance per parameter family.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: ParameterSet,
    v: ParameterSet,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        params.check_layout(grads, "optimizer step")?;
        if !grads.is_finite() {
            return Err(Error::non_finite("gradient"));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let m_it = self.m.iter_mut();
        let v_it = self.v.iter_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in
            params.iter_mut().zip(grads.iter()).zip(m_it).zip(v_it)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        params.bump_version();
        Ok(())
    }
}

/// Anything that turns a gradient into a parameter update.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()>;
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        Adam::step(self, params, grads)
    }
}

/// Plain gradient descent with a fixed rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        sgd_step(params, grads, self.lr)
    }
}

/// Plain gradient descent `p ← p − lr·g`.
pub fn sgd_step(params: &mut ParameterSet, grads: &ParameterSet, lr: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::non_finite("gradient"));
    }
    params.add_scaled(grads, -lr)?;
    params.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn one(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", ArrayD::from_elem(IxDyn(&[1]), v)).unwrap();
        p
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g) (up to eps)
        let mut p = one(1.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &p,
        );
        opt.step(&mut p, &one(3.0)).unwrap();
        assert!((p.flatten()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_and_zero_grad_leave_params() {
        let mut p = one(2.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            &p,
        );
        opt.step(&mut p, &one(5.0)).unwrap();
        assert_eq!(p.flatten(), vec![2.0]);
        sgd_step(&mut p, &one(0.0), 0.5).unwrap();
        assert_eq!(p.flatten(), vec![2.0]);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = one(3.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let g = one(2.0 * p.flatten()[0]);
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.flatten()[0].abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = one(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let mut g = ParameterSet::new();
        g.insert("w", ArrayD::from_elem(IxDyn(&[1]), 0.0)).unwrap();
        g.get_mut("w").unwrap()[[0]] = f64::NAN;
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(p.flatten(), vec![1.0]);
    }
}
