//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Worst relative error between the analytic gradient returned by `f` and
/// the central difference `(f(x+h) − f(x−h)) / 2h` over `probes` randomly
/// chosen coordinates (all coordinates when `probes` ≥ the dimension).
pub fn grad_check_vec<F>(mut f: F, x: &[f64], probes: usize, h: f64, seed: u64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step h must be positive, got {h}"
        )));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::non_finite("loss at base point"));
    }
    if analytic.len() != x.len() {
        return Err(Error::shape(
            "analytic gradient",
            &[x.len()],
            &[analytic.len()],
        ));
    }
    let coords: Vec<usize> = if probes >= x.len() {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, x.len(), probes).into_vec()
    };
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        probe[i] = x[i] + h;
        let (up, _) = f(&probe)?;
        probe[i] = x[i] - h;
        let (down, _) = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::non_finite(format!("loss at probe coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check_vec`] over the flattened coordinates of a parameter set.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &ParameterSet,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&ParameterSet) -> Result<(f64, ParameterSet)>,
{
    let mut scratch = params.clone();
    let flat = params.flatten();
    grad_check_vec(
        |v| {
            scratch.unflatten(v)?;
            let (loss, grad) = loss_fn(&scratch)?;
            scratch.check_layout(&grad, "gradient")?;
            Ok((loss, grad.flatten()))
        },
        &flat,
        probes,
        h,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn params(values: &[f64]) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(
            "p",
            ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap(),
        )
        .unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(
            |p| {
                let v = p.flatten();
                let mut g = p.zeros_like();
                g.unflatten(&v.iter().map(|x| 2.0 * x).collect::<Vec<_>>())?;
                Ok((v.iter().map(|x| x * x).sum(), g))
            },
            &params(&[1.0, 2.0]),
            10,
            1e-5,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn constant_loss_reports_zero() {
        let err = grad_check(
            |p| Ok((3.5, p.zeros_like())),
            &params(&[1.0, -2.0, 0.5]),
            3,
            1e-5,
            0,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check_vec(|x| Ok((x[0] * x[0], vec![x[0]])), &[1.0], 1, 1e-5, 0).unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let res = grad_check_vec(
            |x| Ok((if x[0] > 0.0 { f64::NAN } else { 0.0 }, vec![0.0])),
            &[0.0],
            1,
            1e-5,
            0,
        );
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }
}
