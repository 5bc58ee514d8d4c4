use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the constraint multipliers evolve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualMode {
    /// Projected dual ascent after every iteration.
    PrimalDual,
    /// Multipliers stay at their initial values (plain penalty ablation).
    Fixed,
}

/// `λ_{t+1} = max(λ_t + η(L̂ − ε), 0)`.
pub fn dual_step(lambda: f64, eta: f64, observed: f64, margin: f64) -> f64 {
    (lambda + eta * (observed - margin)).max(0.0)
}

/// Smallest `t` with `λ_t = 0` when every observation undershoots the
/// margin by at least `gap`: `⌈λ₀ / (η·gap)⌉`.
pub fn steps_to_zero_bound(lambda0: f64, eta: f64, gap: f64) -> usize {
    (lambda0 / (eta * gap)).ceil() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub lambda2: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eta: f64,
    pub mode: DualMode,
}

impl DualState {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "dual rate must be positive, got {}",
                self.eta
            )));
        }
        if !(self.lambda >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::Invariant(format!(
                "multipliers must be non-negative (λ = {}, λ₂ = {})",
                self.lambda, self.lambda2
            )));
        }
        Ok(())
    }

    /// Applies one dual step to each multiplier that has an observation.
    pub fn update(&mut self, l_con: Option<f64>, l_con2: Option<f64>) {
        if self.mode == DualMode::Fixed {
            return;
        }
        if let Some(l) = l_con {
            self.lambda = dual_step(self.lambda, self.eta, l, self.eps1);
        }
        if let Some(l) = l_con2 {
            self.lambda2 = dual_step(self.lambda2, self.eta, l, self.eps2);
        }
    }
}
