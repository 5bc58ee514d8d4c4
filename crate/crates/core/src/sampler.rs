//! Short-run Langevin dynamics in data and latent space.

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ebm::{conditional_energy_and_grad, EnergyFunction};
use crate::error::{Error, Result};
use crate::restoration::{restoration_objective_with_range, DegradationOperator};
use crate::vae::Vae;

/// Chain settings. `sigma` is the proximity scale of the conditional energy;
/// `None` drops the proximity term (unconditional chain).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be ≥ 0, got {}",
                self.temperature
            )));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "proximity sigma must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Noise stream for chain row `index`: every row draws from its own stream,
/// so results do not depend on how rows are batched.
pub fn chain_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs `x ← x − (s/2)∇U(x) + √s·τ·ξ` for `cfg.steps` steps.
///
/// `grad_u` returns `∇U` for the whole batch.
pub fn langevin<F>(
    x0: ArrayView2<f64>,
    mut grad_u: F,
    cfg: &LangevinConfig,
    seed: u64,
) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>) -> Result<Array2<f64>>,
{
    cfg.validate()?;
    let mut x = x0.to_owned();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("langevin initial state"));
    }
    let noise_scale = cfg.step_size.sqrt() * cfg.temperature;
    let mut rngs: Vec<ChaCha8Rng> = (0..x.nrows()).map(|i| chain_rng(seed, i)).collect();
    for step in 0..cfg.steps {
        let g = grad_u(&x)?;
        if g.dim() != x.dim() {
            return Err(Error::shape(
                "langevin gradient",
                &[x.nrows(), x.ncols()],
                &[g.nrows(), g.ncols()],
            ));
        }
        x.scaled_add(-0.5 * cfg.step_size, &g);
        if noise_scale > 0.0 {
            for (mut row, rng) in x.outer_iter_mut().zip(rngs.iter_mut()) {
                for v in row.iter_mut() {
                    let xi: f64 = rng.sample(StandardNormal);
                    *v += noise_scale * xi;
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::ChainDiverged { step: step + 1 });
        }
    }
    Ok(x)
}

/// Data-space calibration: starts at the generated samples and targets
/// `E(x̃) + ‖x̃ − x_gen‖²/(2σ²)` (or `E` alone when `cfg.sigma` is `None`).
pub fn calibrate_samples<E: EnergyFunction + ?Sized>(
    energy: &E,
    x_gen: ArrayView2<f64>,
    cfg: &LangevinConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    conditional_langevin(energy, x_gen, x_gen, cfg, seed)
}

/// Conditional chain with separate start point and anchor.
pub fn conditional_langevin<E: EnergyFunction + ?Sized>(
    energy: &E,
    x0: ArrayView2<f64>,
    anchor: ArrayView2<f64>,
    cfg: &LangevinConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    langevin(
        x0,
        |x| match cfg.sigma {
            Some(s) => Ok(conditional_energy_and_grad(energy, x.view(), anchor, s)?.1),
            None => Ok(energy.energy_and_grad(x.view())?.1),
        },
        cfg,
        seed,
    )
}

/// Latent calibration toward the true posterior `p(z|x)`, starting from `z0`
/// and anchored to it with `‖z − z0‖²/(2σ²)` when `cfg.sigma` is set.
pub fn calibrate_latent(
    vae: &Vae,
    x: ArrayView2<f64>,
    z0: ArrayView2<f64>,
    cfg: &LangevinConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    if x.nrows() != z0.nrows() {
        return Err(Error::shape(
            "latent chain batch",
            &[x.nrows()],
            &[z0.nrows()],
        ));
    }
    langevin(
        z0,
        |z| {
            let (_, g) = vae.log_joint_grad_z(x, z.view())?;
            let mut grad_u = -g;
            if let Some(s) = cfg.sigma {
                Zip::from(&mut grad_u)
                    .and(z)
                    .and(z0)
                    .for_each(|gu, &zi, &z0i| *gu += (zi - z0i) / (s * s));
            }
            Ok(grad_u)
        },
        cfg,
        seed,
    )
}

/// Latent chain for restoration: ascends the restoration objective
/// (see [`crate::restoration::restoration_objective`]) from `z0`.
pub fn restore_latent<E: EnergyFunction + ?Sized>(
    z0: ArrayView2<f64>,
    y: ArrayView2<f64>,
    op: &DegradationOperator,
    vae: &Vae,
    energy: Option<&E>,
    sigma_r: f64,
    cfg: &LangevinConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    let range = op.apply_pinv(y)?;
    langevin(
        z0,
        |z| {
            Ok(
                -restoration_objective_with_range(
                    z.view(),
                    range.view(),
                    op,
                    vae,
                    energy,
                    sigma_r,
                )?
                .1,
            )
        },
        cfg,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebm::{QuadraticEnergy, ZeroEnergy};
    use ndarray::{array, Array1};

    fn cfg(steps: usize, step_size: f64, temperature: f64, sigma: Option<f64>) -> LangevinConfig {
        LangevinConfig {
            steps,
            step_size,
            temperature,
            sigma,
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let x = array![[1.0, 2.0], [-3.0, 0.5]];
        let out =
            calibrate_samples(&ZeroEnergy, x.view(), &cfg(0, 0.1, 1.0, Some(0.5)), 0).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn flat_energy_pulls_toward_condition() {
        // (1 − s/(2σ²))ᴷ with s = 0.2, σ = 1, K = 2
        let out = conditional_langevin(
            &ZeroEnergy,
            array![[1.0]].view(),
            array![[0.0]].view(),
            &cfg(2, 0.2, 0.0, Some(1.0)),
            0,
        )
        .unwrap();
        assert!((out[[0, 0]] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn quadratic_examples() {
        let q = QuadraticEnergy {
            center: Array1::zeros(1),
            curvature: 1.0,
        };
        let one = calibrate_samples(&q, array![[2.0]].view(), &cfg(1, 1.0, 0.0, None), 0).unwrap();
        assert!((one[[0, 0]] - 1.0).abs() < 1e-12);
        let ten = calibrate_samples(&q, array![[2.0]].view(), &cfg(10, 0.2, 0.0, None), 0).unwrap();
        assert!((ten[[0, 0]] - 2.0 * 0.9f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn conditional_quadratic_reaches_fixed_point() {
        // U = u²/2 + (u − x)²/(2σ²): minimiser x(1/σ²)/(1 + 1/σ²).
        let q = QuadraticEnergy {
            center: Array1::zeros(1),
            curvature: 1.0,
        };
        let x = array![[1.7]];
        let out = calibrate_samples(&q, x.view(), &cfg(2000, 0.01, 0.0, Some(0.5)), 0).unwrap();
        let target = 1.7 * 4.0 / 5.0;
        assert!((out[[0, 0]] - target).abs() < 1e-10);
    }

    #[test]
    fn flat_energy_at_anchor_is_pure_diffusion() {
        let x = array![[0.4, -0.2, 1.0]];
        let c = cfg(1, 0.04, 0.5, Some(1.0));
        let out = calibrate_samples(&ZeroEnergy, x.view(), &c, 7).unwrap();
        let mut rng = chain_rng(7, 0);
        for j in 0..3 {
            let xi: f64 = rng.sample(StandardNormal);
            assert!((out[[0, j]] - (x[[0, j]] + 0.2 * 0.5 * xi)).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_quadratic_recursion() {
        // x_k = (1 − sκ/2)^k x_0 with no noise.
        let q = QuadraticEnergy {
            center: Array1::zeros(2),
            curvature: 3.0,
        };
        let x0 = array![[1.5, -0.7]];
        for k in [1usize, 5, 40] {
            let out = calibrate_samples(&q, x0.view(), &cfg(k, 0.1, 0.0, None), 0).unwrap();
            let a = (1.0f64 - 0.15).powi(k as i32);
            assert!((out[[0, 0]] - a * 1.5).abs() < 1e-10);
            assert!((out[[0, 1]] + a * 0.7).abs() < 1e-10);
        }
    }

    #[test]
    fn noisy_recursion_replays_exactly() {
        // Conditional quadratic: ∇U = κx + (x − a)/σ²; replay with the same noise stream.
        let q = QuadraticEnergy {
            center: Array1::zeros(1),
            curvature: 2.0,
        };
        let anchor = array![[0.8], [-0.4]];
        let c = cfg(12, 0.05, 0.7, Some(0.5));
        let out = calibrate_samples(&q, anchor.view(), &c, 99).unwrap();
        for i in 0..2 {
            let mut rng = chain_rng(99, i);
            let a = anchor[[i, 0]];
            let mut x = a;
            for _ in 0..12 {
                let g = 2.0 * x + (x - a) / 0.25;
                let xi: f64 = rng.sample(StandardNormal);
                x = x - 0.025 * g + 0.05f64.sqrt() * 0.7 * xi;
            }
            assert!((out[[i, 0]] - x).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_moments_match_closed_form() {
        // For U = x²/2 the chain's law stays Gaussian with
        // m' = a m, v' = a² v + s τ², a = 1 − s/2.
        let q = QuadraticEnergy {
            center: Array1::zeros(1),
            curvature: 1.0,
        };
        let n = 40_000;
        let x0 = Array2::from_elem((n, 1), 2.0);
        let (s, tau, k) = (0.2, 1.0, 10);
        let out = calibrate_samples(&q, x0.view(), &cfg(k, s, tau, None), 5).unwrap();
        let a: f64 = 1.0 - s / 2.0;
        let (mut m, mut v) = (2.0, 0.0);
        for _ in 0..k {
            m *= a;
            v = a * a * v + s * tau * tau;
        }
        let col = out.column(0);
        let mean = col.mean().unwrap();
        let var = col.var(1.0);
        assert!(
            (mean - m).abs() < 4.0 * (v / n as f64).sqrt(),
            "mean {mean} vs {m}"
        );
        assert!(
            (var - v).abs() < 4.0 * v * (2.0 / n as f64).sqrt(),
            "var {var} vs {v}"
        );
    }

    #[test]
    fn noise_std_is_sqrt_step_times_temperature() {
        let n = 50_000;
        let x = Array2::zeros((n, 1));
        let out = calibrate_samples(&ZeroEnergy, x.view(), &cfg(1, 0.09, 2.0, None), 3).unwrap();
        let sd = out.column(0).std(1.0);
        assert!(
            (sd - 0.6).abs() < 4.0 * 0.6 / (2.0 * n as f64).sqrt(),
            "sd {sd}"
        );
    }

    #[test]
    fn rows_are_batch_independent() {
        let q = QuadraticEnergy {
            center: array![0.5, 0.5],
            curvature: 1.0,
        };
        let x = array![[0.0, 1.0], [2.0, -1.0], [0.3, 0.3]];
        let c = cfg(6, 0.1, 1.0, Some(0.8));
        let full = calibrate_samples(&q, x.view(), &c, 11).unwrap();
        let again = calibrate_samples(&q, x.view(), &c, 11).unwrap();
        assert_eq!(full, again);
        let first = calibrate_samples(&q, x.slice(ndarray::s![..1, ..]), &c, 11).unwrap();
        assert_eq!(first.row(0), full.row(0));
        let other = calibrate_samples(&q, x.view(), &c, 12).unwrap();
        assert_ne!(full, other);
    }

    #[test]
    fn divergence_is_reported() {
        let q = QuadraticEnergy {
            center: Array1::zeros(1),
            curvature: 1e300,
        };
        let r = calibrate_samples(&q, array![[1.0]].view(), &cfg(10, 1e10, 0.0, None), 0);
        assert!(matches!(r, Err(Error::ChainDiverged { .. })), "{r:?}");
    }

    #[test]
    fn invalid_config_rejected() {
        let x = array![[0.0]];
        assert!(calibrate_samples(&ZeroEnergy, x.view(), &cfg(1, 0.0, 1.0, None), 0).is_err());
        assert!(calibrate_samples(&ZeroEnergy, x.view(), &cfg(1, 0.1, -1.0, None), 0).is_err());
        assert!(calibrate_samples(&ZeroEnergy, x.view(), &cfg(1, 0.1, 1.0, Some(0.0)), 0).is_err());
    }
}
