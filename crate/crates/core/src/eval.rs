//! Metrics: true-density likelihood, mode coverage, reconstruction, PSNR, consistency.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::MixtureSpec;
use crate::error::{Error, Result};
use crate::restoration::DegradationOperator;
use crate::vae::Vae;

/// Fraction of samples a mode needs to count as covered.
pub const COVERAGE_THRESHOLD: f64 = 0.005;

/// Mean of the mixture log-density over `samples`.
pub fn mean_true_loglik(samples: ArrayView2<f64>, spec: &MixtureSpec) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    Ok(spec.log_density(samples)?.mean().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageReport {
    pub counts: Vec<usize>,
    pub modes_covered: usize,
    pub high_quality_fraction: f64,
    pub total: usize,
}

/// Nearest-mean assignment; a mode is covered at ≥ `threshold` of samples and
/// a sample is high quality within `radius` of its mean.
pub fn mode_coverage(
    samples: ArrayView2<f64>,
    spec: &MixtureSpec,
    radius: f64,
    threshold: f64,
) -> Result<CoverageReport> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius must be positive, got {radius}"
        )));
    }
    if samples.ncols() != spec.dim() {
        return Err(Error::shape(
            "coverage samples",
            &[spec.dim()],
            &[samples.ncols()],
        ));
    }
    let n = samples.nrows();
    let mut counts = vec![0usize; spec.num_components()];
    let mut good = 0usize;
    for row in samples.outer_iter() {
        let (k, d) = spec.nearest(row);
        counts[k] += 1;
        if d <= radius {
            good += 1;
        }
    }
    let need = threshold * n as f64;
    let modes_covered = if n == 0 {
        0
    } else {
        counts
            .iter()
            .filter(|&&c| c as f64 >= need && c > 0)
            .count()
    };
    Ok(CoverageReport {
        counts,
        modes_covered,
        high_quality_fraction: if n == 0 { 0.0 } else { good as f64 / n as f64 },
        total: n,
    })
}

/// MSE between `x` and `g(mean of q(z|x))`, averaged over all elements.
pub fn recon_mse(vae: &Vae, x: ArrayView2<f64>) -> Result<f64> {
    let post = vae.encode(x)?;
    let g = vae.decode(post.mean.view())?;
    Ok((&g - &x).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Mean single-draw ELBO averaged over `m_eval` posterior draws per datum.
pub fn heldout_elbo(vae: &Vae, x: ArrayView2<f64>, m_eval: usize, seed: u64) -> Result<f64> {
    if m_eval == 0 {
        return Err(Error::InvalidArgument("m_eval must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..m_eval {
        let eps = Array2::from_shape_simple_fn((x.nrows(), vae.latent_dim()), || {
            rng.sample(StandardNormal)
        });
        total += vae.elbo(x, &eps)?.elbo.mean().unwrap();
    }
    Ok(total / m_eval as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+∞`.
pub fn psnr(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "peak must be positive, got {peak}"
        )));
    }
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(
            "psnr",
            &[x.nrows(), x.ncols()],
            &[x_hat.nrows(), x_hat.ncols()],
        ));
    }
    let mse = (&x - &x_hat).mapv(|v| v * v).mean().unwrap_or(0.0);
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Per-image PSNR values (rows), for averaging over a set.
pub fn psnr_per_row(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, peak: f64) -> Result<Vec<f64>> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(
            "psnr",
            &[x.nrows(), x.ncols()],
            &[x_hat.nrows(), x_hat.ncols()],
        ));
    }
    Ok((&x - &x_hat)
        .map_axis(Axis(1), |r| {
            psnr_from_mse(r.mapv(|v| v * v).mean().unwrap_or(0.0), peak)
        })
        .to_vec())
}

/// Mean absolute deviation `|A x̂ − A x|` per element of the degraded space.
pub fn consistency(
    x: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    op: &DegradationOperator,
) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(
            "consistency",
            &[x.nrows(), x.ncols()],
            &[x_hat.nrows(), x_hat.ncols()],
        ));
    }
    let d = &op.apply(x_hat)? - &op.apply(x)?;
    Ok(d.mapv(f64::abs).mean().unwrap_or(0.0))
}

/// Squared-exponential MMD² (biased V-statistic) with bandwidth `h`.
pub fn mmd_rbf(a: ArrayView2<f64>, b: ArrayView2<f64>, h: f64) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape("mmd", &[a.ncols()], &[b.ncols()]));
    }
    if a.nrows() == 0 || b.nrows() == 0 || !(h > 0.0) {
        return Err(Error::InvalidArgument(
            "mmd needs non-empty sets and h > 0".into(),
        ));
    }
    let k = |p: ArrayView2<f64>, q: ArrayView2<f64>| -> f64 {
        let mut s = 0.0;
        for u in p.outer_iter() {
            for v in q.outer_iter() {
                let d2: f64 = u.iter().zip(v.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                s += (-d2 / (2.0 * h * h)).exp();
            }
        }
        s / (p.nrows() * q.nrows()) as f64
    };
    Ok(k(a, a) + k(b, b) - 2.0 * k(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::nets::{Activation, NetKind, Network, NetworkSpec};
    use crate::vae::{Prior, Vae};
    use ndarray::{array, Array1, ArrayD, IxDyn};
    use std::f64::consts::PI;

    fn spec() -> MixtureSpec {
        MixtureSpec::default_grid()
    }

    #[test]
    fn loglik_at_means() {
        let s = spec();
        let v = mean_true_loglik(s.means.view(), &s).unwrap();
        assert!((v - 0.93471).abs() < 1e-5);
    }

    #[test]
    fn loglik_of_mixture_samples_matches_reference() {
        let s = spec();
        let (reference, se) = s
            .reference_loglik(100_000, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let (x, _) = s.sample(100_000, &mut ChaCha8Rng::seed_from_u64(2));
        let v = mean_true_loglik(x.view(), &s).unwrap();
        assert!(
            (v - reference).abs() < 3.0 * se * 2f64.sqrt(),
            "{v} vs {reference}"
        );
    }

    #[test]
    fn loglik_outlier_decreases_and_bounded() {
        let s = spec();
        let (x, _) = s.sample(100, &mut ChaCha8Rng::seed_from_u64(3));
        let base = mean_true_loglik(x.view(), &s).unwrap();
        let mut y = x.clone();
        y.row_mut(0).assign(&array![20.0, 20.0]);
        assert!(mean_true_loglik(y.view(), &s).unwrap() < base);
        assert!(base <= 0.93472);
        let perm: Vec<usize> = (0..100).rev().collect();
        let p = mean_true_loglik(x.select(Axis(0), &perm).view(), &s).unwrap();
        assert!((p - base).abs() < 1e-12);
    }

    #[test]
    fn coverage_cases() {
        let s = spec();
        let r = mode_coverage(s.means.view(), &s, 0.15, COVERAGE_THRESHOLD).unwrap();
        assert_eq!(r.modes_covered, 25);
        assert_eq!(r.high_quality_fraction, 1.0);
        let one = Array2::from_shape_fn((40, 2), |(_, j)| s.means[[7, j]]);
        let r = mode_coverage(one.view(), &s, 0.15, COVERAGE_THRESHOLD).unwrap();
        assert_eq!(r.modes_covered, 1);
        assert_eq!(r.counts.iter().sum::<usize>(), 40);
    }

    #[test]
    fn coverage_high_quality_fraction_of_true_samples() {
        let s = spec();
        let n = 100_000;
        let (x, _) = s.sample(n, &mut ChaCha8Rng::seed_from_u64(4));
        let r = mode_coverage(x.view(), &s, 3.0 * s.std, COVERAGE_THRESHOLD).unwrap();
        // 2-dim: P(‖ξ‖ ≤ 3) = 1 − e^{−4.5}
        let p = 1.0 - (-4.5f64).exp();
        assert!((r.high_quality_fraction - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
        assert_eq!(r.modes_covered, 25);
    }

    fn zero_net(spec: NetworkSpec) -> Network {
        let mut p = spec.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.scale(0.0);
        Network::with_params(spec, p).unwrap()
    }

    #[test]
    fn recon_mse_identity_autoencoder_is_zero() {
        // encoder mean = x, decoder = identity
        let enc_spec = NetworkSpec::mlp(NetKind::Encoder, "", 2, &[], 4, Activation::Identity);
        let mut p = enc_spec.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *p.get_mut("dense0.weight").unwrap() =
            ArrayD::from_shape_vec(IxDyn(&[2, 4]), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
                .unwrap();
        let dec_spec = NetworkSpec::mlp(NetKind::Decoder, "", 2, &[], 2, Activation::Identity);
        let mut q = dec_spec.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *q.get_mut("dense0.weight").unwrap() =
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let vae = Vae::new(
            Network::with_params(enc_spec, p).unwrap(),
            Network::with_params(dec_spec, q).unwrap(),
            Prior::StandardNormal { dim: 2 },
            1.0,
        )
        .unwrap();
        let x = array![[0.3, -1.0], [2.0, 0.5]];
        assert_eq!(recon_mse(&vae, x.view()).unwrap(), 0.0);
    }

    #[test]
    fn recon_mse_constant_decoder_is_variance() {
        let vae = Vae::new(
            zero_net(NetworkSpec::mlp(
                NetKind::Encoder,
                "",
                2,
                &[3],
                4,
                Activation::Silu,
            )),
            zero_net(NetworkSpec::mlp(
                NetKind::Decoder,
                "",
                2,
                &[3],
                2,
                Activation::Silu,
            )),
            Prior::StandardNormal { dim: 2 },
            1.0,
        )
        .unwrap();
        let x = array![[1.0, -2.0], [-1.0, 2.0]];
        let var = x.mapv(|v| v * v).mean().unwrap();
        assert_eq!(recon_mse(&vae, x.view()).unwrap(), var);
    }

    fn random_vae(seed: u64) -> Vae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Vae::new(
            Network::new(
                NetworkSpec::mlp(NetKind::Encoder, "", 2, &[6], 4, Activation::Silu),
                &mut rng,
            )
            .unwrap(),
            Network::new(
                NetworkSpec::mlp(NetKind::Decoder, "", 2, &[6], 2, Activation::Silu),
                &mut rng,
            )
            .unwrap(),
            Prior::StandardNormal { dim: 2 },
            0.8,
        )
        .unwrap()
    }

    #[test]
    fn recon_mse_matches_hand_pipeline() {
        let vae = random_vae(5);
        let x = array![[0.3, 0.1], [-0.4, 1.2], [2.0, -1.0]];
        let enc = vae.encoder.forward(x.view()).unwrap();
        let mean = enc.slice(ndarray::s![.., ..2]).to_owned();
        let g = vae.decoder.forward(mean.view()).unwrap();
        let expected = (&g - &x).mapv(|v| v * v).sum() / 6.0;
        assert!((recon_mse(&vae, x.view()).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn heldout_elbo_matches_manual_average() {
        let vae = random_vae(6);
        let x = array![[0.3, 0.1], [-0.4, 1.2]];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = Array2::from_shape_simple_fn((2, 2), || rng.sample(StandardNormal));
        let manual = vae.elbo(x.view(), &eps).unwrap().elbo.mean().unwrap();
        assert_eq!(heldout_elbo(&vae, x.view(), 1, 9).unwrap(), manual);
    }

    #[test]
    fn heldout_elbo_variance_shrinks_with_m() {
        let vae = random_vae(7);
        let x = array![[0.5, -0.5]];
        let stats = |m: usize| {
            let v: Vec<f64> = (0..300)
                .map(|s| heldout_elbo(&vae, x.view(), m, s).unwrap())
                .collect();
            let a = Array1::from(v);
            (a.mean().unwrap(), a.var(1.0))
        };
        let (m1, v1) = stats(1);
        let (m8, v8) = stats(8);
        assert!(v8 < v1 / 3.0, "{v1} {v8}");
        assert!((m1 - m8).abs() < 4.0 * (v1 / 300.0 + v8 / 300.0).sqrt());
    }

    #[test]
    fn psnr_values() {
        let a = array![[0.0, 0.0]];
        assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), f64::INFINITY);
        let b = array![[1.0, 1.0]];
        assert!(psnr(a.view(), b.view(), 1.0).unwrap().abs() < 1e-12);
        let c = array![[0.1, -0.1]];
        assert!((psnr(a.view(), c.view(), 1.0).unwrap() - 20.0).abs() < 1e-12);
        let x = array![[0.2, 0.7, -0.3]];
        let y = array![[0.25, 0.5, -0.1]];
        let mse = (0.05f64.powi(2) + 0.2f64.powi(2) + 0.2f64.powi(2)) / 3.0;
        assert!(
            (psnr(x.view(), y.view(), 2.0).unwrap() - 10.0 * (4.0 / mse).log10()).abs() < 1e-12
        );
        assert!(psnr_from_mse(0.1, 1.0) > psnr_from_mse(0.2, 1.0));
    }

    #[test]
    fn consistency_values() {
        let op = DegradationOperator::colorization(ImageShape::new(3, 1, 2)).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]];
        assert_eq!(consistency(x.view(), x.view(), &op).unwrap(), 0.0);
        let xh = array![[0.4, 0.2, 0.3, 0.4, 0.5, 0.0]];
        // pixel means differ by 0.1 and 0.2
        assert!((consistency(x.view(), xh.view(), &op).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn mmd_zero_for_identical_sets() {
        let a = array![[0.0, 1.0], [2.0, 3.0]];
        assert!(mmd_rbf(a.view(), a.view(), 1.0).unwrap().abs() < 1e-15);
        let b = array![[10.0, 10.0]];
        assert!(mmd_rbf(a.view(), b.view(), 1.0).unwrap() > 0.5);
        let _ = PI;
    }
}
