//! Gaussian-posterior VAE: encoder, decoder likelihood, prior and ELBO.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::{standard_normal_log_density, CouplingFlow};
use crate::nets::{Network, ParameterSet};

/// Diagonal Gaussian `q(z|x)` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
}

impl GaussianPosterior {
    pub fn std(&self) -> Array2<f64> {
        self.log_std.mapv(f64::exp)
    }

    /// Per-example `log q(z|x)`.
    pub fn log_density(&self, z: &Array2<f64>) -> Result<Array1<f64>> {
        if z.dim() != self.mean.dim() {
            return Err(Error::shape(
                "posterior sample",
                &[self.mean.nrows(), self.mean.ncols()],
                &[z.nrows(), z.ncols()],
            ));
        }
        let d = z.ncols() as f64;
        let mut out = Array1::zeros(z.nrows());
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = -0.5 * d * (2.0 * PI).ln();
            for j in 0..z.ncols() {
                let ls = self.log_std[[i, j]];
                let e = (z[[i, j]] - self.mean[[i, j]]) * (-ls).exp();
                acc += -0.5 * e * e - ls;
            }
            *o = acc;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    StandardNormal,
    Flow,
}

/// Latent prior `p_θ(z)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    StandardNormal { dim: usize },
    Flow(CouplingFlow),
}

impl Prior {
    pub fn kind(&self) -> PriorKind {
        match self {
            Prior::StandardNormal { .. } => PriorKind::StandardNormal,
            Prior::Flow(_) => PriorKind::Flow,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::StandardNormal { dim } => *dim,
            Prior::Flow(f) => f.dim(),
        }
    }

    pub fn params(&self) -> Option<&ParameterSet> {
        match self {
            Prior::StandardNormal { .. } => None,
            Prior::Flow(f) => Some(&f.params),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParameterSet> {
        match self {
            Prior::StandardNormal { .. } => None,
            Prior::Flow(f) => Some(&mut f.params),
        }
    }

    pub fn log_prob(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        match self {
            Prior::StandardNormal { .. } => Ok(standard_normal_log_density(&z.to_owned())),
            Prior::Flow(f) => f.log_prob(z),
        }
    }

    /// `(log p(z), ∇_z log p(z))` per example.
    pub fn log_prob_input_grad(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        match self {
            Prior::StandardNormal { .. } => Ok((standard_normal_log_density(&z.to_owned()), -&z)),
            Prior::Flow(f) => f.log_prob_input_grad(z),
        }
    }

    /// Draws `z ~ p_θ`; for a flow prior this is the inverse map of a normal draw.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let eps = Array2::from_shape_simple_fn((n, self.dim()), || rng.sample(StandardNormal));
        match self {
            Prior::StandardNormal { .. } => Ok(eps),
            Prior::Flow(f) => f.inverse(eps.view()),
        }
    }
}

/// `z = μ + exp(log σ) ⊙ ε`.
pub fn reparameterize(post: &GaussianPosterior, eps: &Array2<f64>) -> Result<Array2<f64>> {
    if eps.dim() != post.mean.dim() {
        return Err(Error::shape(
            "reparameterization noise",
            &[post.mean.nrows(), post.mean.ncols()],
            &[eps.nrows(), eps.ncols()],
        ));
    }
    Ok(&post.mean + &(post.std() * eps))
}

/// Closed-form `KL(q(z|x) ‖ N(0, I))` per example.
pub fn gaussian_kl(post: &GaussianPosterior, prior: &Prior) -> Result<Array1<f64>> {
    if prior.kind() != PriorKind::StandardNormal {
        return Err(Error::InvalidArgument(
            "closed-form KL needs a standard-normal prior; use kl_via_samples for flow priors"
                .into(),
        ));
    }
    let mut kl = Array1::zeros(post.mean.nrows());
    for ((k, mu), ls) in kl
        .iter_mut()
        .zip(post.mean.outer_iter())
        .zip(post.log_std.outer_iter())
    {
        *k = mu
            .iter()
            .zip(ls.iter())
            .map(|(&m, &l)| 0.5 * (m * m + (2.0 * l).exp() - 1.0 - 2.0 * l))
            .sum();
    }
    Ok(kl)
}

/// Single-sample estimate `log q(z|x) − log p_θ(z)` per example.
pub fn kl_via_samples(
    post: &GaussianPosterior,
    prior: &Prior,
    z: &Array2<f64>,
) -> Result<Array1<f64>> {
    let log_q = post.log_density(z)?;
    let log_p = prior.log_prob(z.view())?;
    if log_p.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("prior log-density"));
    }
    Ok(log_q - log_p)
}

/// Gaussian observation log-density `log N(x; mean, σ² I)` per example.
pub fn recon_log_likelihood(
    x: ArrayView2<f64>,
    mean: ArrayView2<f64>,
    sigma: f64,
) -> Result<Array1<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "observation std must be positive, got {sigma}"
        )));
    }
    if x.dim() != mean.dim() {
        return Err(Error::shape(
            "reconstruction",
            &[x.nrows(), x.ncols()],
            &[mean.nrows(), mean.ncols()],
        ));
    }
    let d = x.ncols() as f64;
    let norm = -0.5 * d * (2.0 * PI * sigma * sigma).ln();
    Ok((&x - &mean).map_axis(Axis(1), |r| norm - r.dot(&r) / (2.0 * sigma * sigma)))
}

/// Per-example ELBO terms from one posterior sample.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub elbo: Array1<f64>,
    pub recon: Array1<f64>,
    pub kl: Array1<f64>,
    pub posterior: GaussianPosterior,
    pub z: Array2<f64>,
    pub reconstruction: Array2<f64>,
}

/// Gradients of a VAE objective, one set per function family.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeGrads {
    pub encoder: ParameterSet,
    pub decoder: ParameterSet,
    pub prior: ParameterSet,
}

/// Extra encoder pull `λ₂ · mean ‖z − z̃‖²` toward calibrated latents.
#[derive(Clone, Copy, Debug)]
pub struct LatentPull<'a> {
    pub target: &'a Array2<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub encoder: Network,
    pub decoder: Network,
    pub prior: Prior,
    pub sigma_dec: f64,
}

impl Vae {
    pub fn new(encoder: Network, decoder: Network, prior: Prior, sigma_dec: f64) -> Result<Self> {
        let latent = prior.dim();
        if encoder.spec.output_len() != 2 * latent {
            return Err(Error::shape(
                "encoder output (mean, log-std)",
                &[2 * latent],
                &encoder.spec.output_shape,
            ));
        }
        if decoder.spec.input_len() != latent {
            return Err(Error::shape(
                "decoder input",
                &[latent],
                &decoder.spec.input_shape,
            ));
        }
        if decoder.spec.output_shape != encoder.spec.input_shape {
            return Err(Error::shape(
                "decoder output",
                &encoder.spec.input_shape,
                &decoder.spec.output_shape,
            ));
        }
        if !(sigma_dec > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma_dec must be positive, got {sigma_dec}"
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            prior,
            sigma_dec,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn data_dim(&self) -> usize {
        self.decoder.spec.output_len()
    }

    fn split_posterior(&self, out: &Array2<f64>) -> GaussianPosterior {
        let l = self.latent_dim();
        GaussianPosterior {
            mean: out.slice(s![.., ..l]).to_owned(),
            log_std: out.slice(s![.., l..]).to_owned(),
        }
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<GaussianPosterior> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("encoder input"));
        }
        let out = self.encoder.forward(x)?;
        Ok(self.split_posterior(&out))
    }

    pub fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.decoder.forward(z)
    }

    /// Draws `z ~ p_θ` and returns `(g_β(z), z)`; no observation noise is added.
    pub fn sample_prior_decode<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let z = self.prior.sample(n, rng)?;
        let x = self.decode(z.view())?;
        Ok((x, z))
    }

    fn kl_term(&self, post: &GaussianPosterior, z: &Array2<f64>) -> Result<Array1<f64>> {
        match self.prior {
            Prior::StandardNormal { .. } => gaussian_kl(post, &self.prior),
            Prior::Flow(_) => kl_via_samples(post, &self.prior, z),
        }
    }

    /// Single-sample ELBO with noise `eps` (closed-form KL under a standard
    /// normal prior, sampled KL under a flow prior).
    pub fn elbo(&self, x: ArrayView2<f64>, eps: &Array2<f64>) -> Result<ElboTerms> {
        let posterior = self.encode(x)?;
        let z = reparameterize(&posterior, eps)?;
        let reconstruction = self.decode(z.view())?;
        let recon = recon_log_likelihood(x, reconstruction.view(), self.sigma_dec)?;
        let kl = self.kl_term(&posterior, &z)?;
        Ok(ElboTerms {
            elbo: &recon - &kl,
            recon,
            kl,
            posterior,
            z,
            reconstruction,
        })
    }

    /// `−mean ELBO` (plus an optional latent pull) and its gradient with
    /// respect to encoder, decoder and prior parameters.
    pub fn neg_elbo_grad(
        &self,
        x: ArrayView2<f64>,
        eps: &Array2<f64>,
        pull: Option<LatentPull<'_>>,
    ) -> Result<(f64, ElboTerms, VaeGrads)> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("encoder input"));
        }
        let w = 1.0 / n as f64;
        let (enc_out, enc_tape) = self.encoder.forward_tape(x)?;
        let posterior = self.split_posterior(&enc_out);
        let z = reparameterize(&posterior, eps)?;
        let (recon_mean, dec_tape) = self.decoder.forward_tape(z.view())?;
        let recon = recon_log_likelihood(x, recon_mean.view(), self.sigma_dec)?;

        let mut grads = VaeGrads {
            encoder: self.encoder.params.zeros_like(),
            decoder: self.decoder.params.zeros_like(),
            prior: self
                .prior
                .params()
                .map(ParameterSet::zeros_like)
                .unwrap_or_default(),
        };

        let var = self.sigma_dec * self.sigma_dec;
        let dg = (&recon_mean - &x) * (w / var);
        let mut dz = self
            .decoder
            .backward(&dec_tape, dg, Some(&mut grads.decoder))?;

        let std = posterior.std();
        let mut dmu = Array2::zeros(posterior.mean.raw_dim());
        let mut dls = Array2::zeros(posterior.mean.raw_dim());
        let kl = match &self.prior {
            Prior::StandardNormal { .. } => {
                dmu.assign(&(&posterior.mean * w));
                dls.assign(&(std.mapv(|s| s * s - 1.0) * w));
                gaussian_kl(&posterior, &self.prior)?
            }
            Prior::Flow(flow) => {
                // log q(z|x) at z = μ + σε is −½ε² − log σ − const: only log σ moves it.
                dls.fill(-w);
                let weights = Array1::from_elem(n, -w);
                let (log_p, dz_prior, pg) =
                    flow.weighted_log_prob_grads(z.view(), &weights, true)?;
                dz += &dz_prior;
                grads.prior = pg.expect("requested");
                let log_q = posterior.log_density(&z)?;
                log_q - log_p
            }
        };
        let elbo = &recon - &kl;
        let mut loss = -elbo.mean().unwrap();

        if let Some(p) = pull {
            if p.target.dim() != z.dim() {
                return Err(Error::shape(
                    "calibrated latents",
                    &[z.nrows(), z.ncols()],
                    &[p.target.nrows(), p.target.ncols()],
                ));
            }
            let diff = &z - p.target;
            loss += p.weight * w * diff.iter().map(|v| v * v).sum::<f64>();
            dz.scaled_add(2.0 * p.weight * w, &diff);
        }

        dmu += &dz;
        dls += &(&dz * &std * eps);
        let denc = concatenate![Axis(1), dmu, dls];
        self.encoder
            .backward(&enc_tape, denc, Some(&mut grads.encoder))?;

        let terms = ElboTerms {
            elbo,
            recon,
            kl,
            posterior,
            z,
            reconstruction: recon_mean,
        };
        Ok((loss, terms, grads))
    }

    /// `(log p(x, z), ∇_z log p(x, z))` per example; the gradient equals
    /// `∇_z log p(z|x)` because `log p(x)` does not depend on `z`.
    pub fn log_joint_grad_z(
        &self,
        x: ArrayView2<f64>,
        z: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let (g, tape) = self.decoder.forward_tape(z)?;
        let recon = recon_log_likelihood(x, g.view(), self.sigma_dec)?;
        let var = self.sigma_dec * self.sigma_dec;
        let dg = (&x - &g) / var;
        let dz_dec = self.decoder.backward(&tape, dg, None)?;
        let (log_p, dz_prior) = self.prior.log_prob_input_grad(z)?;
        Ok((recon + log_p, dz_dec + dz_prior))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{grad_check, grad_check_vec, Activation, NetKind, NetworkSpec};
    use ndarray::{array, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
    }

    fn toy_vae(prior_flow: bool, seed: u64) -> Vae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Network::new(
            NetworkSpec::mlp(NetKind::Encoder, "", 2, &[6, 6], 4, Activation::Silu),
            &mut rng,
        )
        .unwrap();
        let dec = Network::new(
            NetworkSpec::mlp(NetKind::Decoder, "", 2, &[6, 6], 2, Activation::Silu),
            &mut rng,
        )
        .unwrap();
        let prior = if prior_flow {
            let mut f = CouplingFlow::new(
                NetKind::PriorFlow,
                2,
                2,
                &[5],
                Activation::Tanh,
                2.0,
                &mut rng,
            )
            .unwrap();
            let n = f.params.num_elements();
            let v: Vec<f64> = (0..n)
                .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            f.params.unflatten(&v).unwrap();
            Prior::Flow(f)
        } else {
            Prior::StandardNormal { dim: 2 }
        };
        Vae::new(enc, dec, prior, 0.7).unwrap()
    }

    fn zero_net(spec: NetworkSpec) -> Network {
        let mut p = spec.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.scale(0.0);
        Network::with_params(spec, p).unwrap()
    }

    /// Linear decoder `g(z) = W z + b` (weights stored `[latent, data]`).
    fn linear_decoder(w: &[[f64; 2]; 2], b: [f64; 2]) -> Network {
        let spec = NetworkSpec::mlp(NetKind::Decoder, "", 2, &[], 2, Activation::Identity);
        let mut p = spec.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // weight[k, i] = W[i][k]
        *p.get_mut("dense0.weight").unwrap() =
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![w[0][0], w[1][0], w[0][1], w[1][1]])
                .unwrap();
        *p.get_mut("dense0.bias").unwrap() =
            ArrayD::from_shape_vec(IxDyn(&[2]), b.to_vec()).unwrap();
        Network::with_params(spec, p).unwrap()
    }

    /// log N(x; b, W Wᵀ + σ² I) for 2×2 W, computed directly.
    fn linear_gaussian_log_marginal(
        w: &[[f64; 2]; 2],
        b: [f64; 2],
        sigma: f64,
        x: [f64; 2],
    ) -> f64 {
        let mut c = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] = w[i][0] * w[j][0]
                    + w[i][1] * w[j][1]
                    + if i == j { sigma * sigma } else { 0.0 };
            }
        }
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let inv = [
            [c[1][1] / det, -c[0][1] / det],
            [-c[1][0] / det, c[0][0] / det],
        ];
        let r = [x[0] - b[0], x[1] - b[1]];
        let quad = r[0] * (inv[0][0] * r[0] + inv[0][1] * r[1])
            + r[1] * (inv[1][0] * r[0] + inv[1][1] * r[1]);
        -0.5 * quad - 0.5 * det.ln() - (2.0 * PI).ln()
    }

    #[test]
    fn zero_encoder_gives_standard_posterior() {
        let enc = zero_net(NetworkSpec::mlp(
            NetKind::Encoder,
            "",
            3,
            &[4],
            4,
            Activation::Silu,
        ));
        let dec = zero_net(NetworkSpec::mlp(
            NetKind::Decoder,
            "",
            2,
            &[4],
            3,
            Activation::Silu,
        ));
        let vae = Vae::new(enc, dec, Prior::StandardNormal { dim: 2 }, 1.0).unwrap();
        let post = vae
            .encode(array![[1.0, -2.0, 3.0], [0.0, 0.0, 9.0]].view())
            .unwrap();
        assert!(post
            .mean
            .iter()
            .chain(post.log_std.iter())
            .all(|&v| v == 0.0));
        assert!(vae.encode(array![[f64::NAN, 0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let post = GaussianPosterior {
            mean: array![[0.0, 0.0]],
            log_std: array![[0.0, 0.0]],
        };
        assert_eq!(
            reparameterize(&post, &array![[1.0, -1.0]]).unwrap(),
            array![[1.0, -1.0]]
        );
        let post = GaussianPosterior {
            mean: array![[0.3, -2.0]],
            log_std: array![[1.5, -0.5]],
        };
        assert_eq!(
            reparameterize(&post, &array![[0.0, 0.0]]).unwrap(),
            post.mean
        );
        assert!(reparameterize(&post, &array![[0.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn reparameterize_log_std_gradient() {
        let eps = [0.7, -1.3];
        let err = grad_check_vec(
            |ls| {
                let post = GaussianPosterior {
                    mean: array![[0.2, 0.1]],
                    log_std: array![[ls[0], ls[1]]],
                };
                let z = reparameterize(&post, &array![[eps[0], eps[1]]])?;
                // f = Σ z, so ∂f/∂ls = ε ⊙ exp(ls)
                Ok((z.sum(), vec![eps[0] * ls[0].exp(), eps[1] * ls[1].exp()]))
            },
            &[0.4, -0.6],
            2,
            1e-5,
            0,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn closed_form_kl_values() {
        let prior = Prior::StandardNormal { dim: 1 };
        let kl = |m: f64, s: f64| {
            gaussian_kl(
                &GaussianPosterior {
                    mean: array![[m]],
                    log_std: array![[s.ln()]],
                },
                &prior,
            )
            .unwrap()[0]
        };
        assert_eq!(kl(0.0, 1.0), 0.0);
        assert!((kl(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((kl(0.0, 2.0) - 0.806853).abs() < 1e-6);
    }

    #[test]
    fn closed_form_kl_rejects_flow_prior() {
        let vae = toy_vae(true, 1);
        let post = GaussianPosterior {
            mean: array![[0.0, 0.0]],
            log_std: array![[0.0, 0.0]],
        };
        assert!(gaussian_kl(&post, &vae.prior).is_err());
    }

    #[test]
    fn sampled_kl_single_point_oracle() {
        // 1-dim: q = N(0.5, 0.8²), p = N(0, 1), z = 1.1
        let post = GaussianPosterior {
            mean: array![[0.5]],
            log_std: array![[0.8f64.ln()]],
        };
        let z = array![[1.1]];
        let log_q = -0.5 * ((1.1f64 - 0.5) / 0.8).powi(2) - 0.8f64.ln() - 0.5 * (2.0 * PI).ln();
        let log_p = -0.5 * 1.1f64 * 1.1 - 0.5 * (2.0 * PI).ln();
        let kl = kl_via_samples(&post, &Prior::StandardNormal { dim: 1 }, &z).unwrap()[0];
        assert!((kl - (log_q - log_p)).abs() < 1e-14);
    }

    #[test]
    fn sampled_kl_identical_distributions_averages_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let post = GaussianPosterior {
            mean: Array2::zeros((n, 2)),
            log_std: Array2::zeros((n, 2)),
        };
        let z = normal(n, 2, &mut rng);
        let kl = kl_via_samples(&post, &Prior::StandardNormal { dim: 2 }, &z).unwrap();
        assert!(kl.iter().fold(0.0f64, |a, &b| a.max(b.abs())) < 1e-12);
    }

    #[test]
    fn identity_flow_prior_matches_closed_form_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flow = CouplingFlow::new(
            NetKind::PriorFlow,
            2,
            2,
            &[4],
            Activation::Tanh,
            2.0,
            &mut rng,
        )
        .unwrap();
        let n = 100_000;
        let post = GaussianPosterior {
            mean: Array2::from_elem((n, 2), 0.7),
            log_std: Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { -0.3 } else { 0.4 }),
        };
        let z = reparameterize(&post, &normal(n, 2, &mut rng)).unwrap();
        let sampled = kl_via_samples(&post, &Prior::Flow(flow), &z).unwrap();
        let exact = gaussian_kl(&post, &Prior::StandardNormal { dim: 2 }).unwrap()[0];
        let mean = sampled.mean().unwrap();
        let se = sampled.std(1.0) / (n as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "mean {mean}, exact {exact}, se {se}"
        );
    }

    #[test]
    fn recon_log_likelihood_values() {
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let v = recon_log_likelihood(array![[0.4]].view(), array![[0.4]].view(), 1.0).unwrap()[0];
        assert!((v + 0.918939).abs() < 1e-6);
        let v = recon_log_likelihood(array![[2f64.sqrt()]].view(), array![[0.0]].view(), 1.0)
            .unwrap()[0];
        assert!((v + half_log_2pi + 1.0).abs() < 1e-14);
        assert!(recon_log_likelihood(array![[0.0]].view(), array![[0.0]].view(), 0.0).is_err());
        // Random case vs the density written out directly.
        let (x, m, s) = ([0.3, -1.2, 2.5], [0.1, 0.4, 1.9], 0.37);
        let direct: f64 = (0..3)
            .map(|i| {
                -((x[i] - m[i]) as f64).powi(2) / (2.0 * s * s) - 0.5 * (2.0 * PI * s * s).ln()
            })
            .sum();
        let v = recon_log_likelihood(array![x].view(), array![m].view(), s).unwrap()[0];
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn linear_gaussian_exact_posterior_recovers_log_marginal() {
        // Orthogonal columns keep the exact posterior diagonal.
        let w = [[0.8, -0.6], [0.6, 0.8]];
        let scale = [1.5, 0.5];
        let wm = [
            [w[0][0] * scale[0], w[0][1] * scale[1]],
            [w[1][0] * scale[0], w[1][1] * scale[1]],
        ];
        let b = [0.2, -0.4];
        let sigma = 0.6;
        let x = [1.3, 0.7];
        let r = [x[0] - b[0], x[1] - b[1]];
        let mut mean = [0.0; 2];
        let mut log_std = [0.0; 2];
        for k in 0..2 {
            let wk2 = wm[0][k] * wm[0][k] + wm[1][k] * wm[1][k];
            let var = 1.0 / (1.0 + wk2 / (sigma * sigma));
            mean[k] = var * (wm[0][k] * r[0] + wm[1][k] * r[1]) / (sigma * sigma);
            log_std[k] = 0.5 * f64::ln(var);
        }
        let post = GaussianPosterior {
            mean: array![mean],
            log_std: array![log_std],
        };
        let dec = linear_decoder(&wm, b);
        let prior = Prior::StandardNormal { dim: 2 };
        let exact = linear_gaussian_log_marginal(&wm, b, sigma, x);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let z = reparameterize(&post, &normal(1, 2, &mut rng)).unwrap();
            let g = dec.forward(z.view()).unwrap();
            let elbo = recon_log_likelihood(array![x].view(), g.view(), sigma).unwrap()[0]
                - kl_via_samples(&post, &prior, &z).unwrap()[0];
            assert!((elbo - exact).abs() < 1e-8, "{elbo} vs {exact}");
        }
    }

    #[test]
    fn elbo_bounds_log_marginal_for_inexact_posterior() {
        let wm = [[1.0, 0.3], [-0.2, 0.7]];
        let b = [0.1, 0.0];
        let sigma = 0.5;
        let x = [0.9, -0.4];
        let n = 20_000;
        let enc_spec = NetworkSpec::mlp(NetKind::Encoder, "", 2, &[], 4, Activation::Identity);
        let mut p = enc_spec.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.scale(0.0);
        *p.get_mut("dense0.bias").unwrap() =
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.3, -0.1, -0.7, -0.2]).unwrap();
        let vae = Vae::new(
            Network::with_params(enc_spec, p).unwrap(),
            linear_decoder(&wm, b),
            Prior::StandardNormal { dim: 2 },
            sigma,
        )
        .unwrap();
        let xs = Array2::from_shape_fn((n, 2), |(_, j)| x[j]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let terms = vae.elbo(xs.view(), &normal(n, 2, &mut rng)).unwrap();
        let mean = terms.elbo.mean().unwrap();
        let se = terms.elbo.std(1.0) / (n as f64).sqrt();
        let exact = linear_gaussian_log_marginal(&wm, b, sigma, x);
        assert!(mean + 3.0 * se < exact, "{mean} ± {se} vs {exact}");
    }

    #[test]
    fn elbo_is_permutation_equivariant() {
        let vae = toy_vae(false, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = normal(5, 2, &mut rng);
        let eps = normal(5, 2, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let xp = x.select(Axis(0), &perm);
        let ep = eps.select(Axis(0), &perm);
        let a = vae.elbo(x.view(), &eps).unwrap().elbo;
        let b = vae.elbo(xp.view(), &ep).unwrap().elbo;
        for (k, &p) in perm.iter().enumerate() {
            assert!((b[k] - a[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_autoencoder_elbo_is_recon() {
        // Posterior equal to the prior and a constant decoder: KL vanishes.
        let enc = zero_net(NetworkSpec::mlp(
            NetKind::Encoder,
            "",
            2,
            &[3],
            4,
            Activation::Silu,
        ));
        let dec = zero_net(NetworkSpec::mlp(
            NetKind::Decoder,
            "",
            2,
            &[3],
            2,
            Activation::Silu,
        ));
        let vae = Vae::new(enc, dec, Prior::StandardNormal { dim: 2 }, 1.0).unwrap();
        let x = array![[0.0, 0.0]];
        let t = vae.elbo(x.view(), &array![[0.3, -0.2]]).unwrap();
        assert_eq!(t.kl[0], 0.0);
        assert_eq!(t.elbo[0], t.recon[0]);
    }

    fn elbo_grad_check(vae: &Vae, pull: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = normal(4, 2, &mut rng);
        let eps = normal(4, 2, &mut rng);
        let target = normal(4, 2, &mut rng);
        let pull = pull.then_some(LatentPull {
            target: &target,
            weight: 0.8,
        });
        let (_, _, g0) = vae.neg_elbo_grad(x.view(), &eps, pull).unwrap();
        let mut worst = 0.0f64;
        let enc = grad_check(
            |p| {
                let mut v = vae.clone();
                v.encoder.params = p.clone();
                let (l, _, g) = v.neg_elbo_grad(x.view(), &eps, pull)?;
                Ok((l, g.encoder))
            },
            &vae.encoder.params,
            100,
            1e-5,
            1,
        )
        .unwrap();
        worst = worst.max(enc);
        let dec = grad_check(
            |p| {
                let mut v = vae.clone();
                v.decoder.params = p.clone();
                let (l, _, g) = v.neg_elbo_grad(x.view(), &eps, pull)?;
                Ok((l, g.decoder))
            },
            &vae.decoder.params,
            100,
            1e-5,
            2,
        )
        .unwrap();
        worst = worst.max(dec);
        if let Some(pp) = vae.prior.params() {
            assert!(g0.prior.same_layout(pp));
            let pr = grad_check(
                |p| {
                    let mut v = vae.clone();
                    *v.prior.params_mut().unwrap() = p.clone();
                    let (l, _, g) = v.neg_elbo_grad(x.view(), &eps, pull)?;
                    Ok((l, g.prior))
                },
                pp,
                100,
                1e-5,
                3,
            )
            .unwrap();
            worst = worst.max(pr);
        }
        worst
    }

    #[test]
    fn elbo_gradients_standard_prior() {
        let err = elbo_grad_check(&toy_vae(false, 10), false);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn elbo_gradients_flow_prior() {
        let err = elbo_grad_check(&toy_vae(true, 11), false);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn elbo_gradients_with_latent_pull() {
        let err = elbo_grad_check(&toy_vae(false, 12), true);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn zero_pull_weight_changes_nothing() {
        let vae = toy_vae(false, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = normal(3, 2, &mut rng);
        let eps = normal(3, 2, &mut rng);
        let target = normal(3, 2, &mut rng);
        let (la, _, ga) = vae.neg_elbo_grad(x.view(), &eps, None).unwrap();
        let (lb, _, gb) = vae
            .neg_elbo_grad(
                x.view(),
                &eps,
                Some(LatentPull {
                    target: &target,
                    weight: 0.0,
                }),
            )
            .unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn log_joint_gradient_scalar_oracle() {
        // 1-dim latent, linear decoder g(z) = a z + c: ∇ = −z + (x − g) a / σ².
        let spec = NetworkSpec::mlp(NetKind::Decoder, "", 1, &[], 1, Activation::Identity);
        let mut p = spec.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *p.get_mut("dense0.weight").unwrap() = ArrayD::from_elem(IxDyn(&[1, 1]), 1.7);
        *p.get_mut("dense0.bias").unwrap() = ArrayD::from_elem(IxDyn(&[1]), -0.3);
        let enc = zero_net(NetworkSpec::mlp(
            NetKind::Encoder,
            "",
            1,
            &[],
            2,
            Activation::Identity,
        ));
        let vae = Vae::new(
            enc,
            Network::with_params(spec, p).unwrap(),
            Prior::StandardNormal { dim: 1 },
            0.5,
        )
        .unwrap();
        let (x, z) = (0.9, 0.4);
        let g = 1.7 * z - 0.3;
        let expected = -z + (x - g) * 1.7 / 0.25;
        let (_, grad) = vae
            .log_joint_grad_z(array![[x]].view(), array![[z]].view())
            .unwrap();
        assert!((grad[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn prior_decode_sampling() {
        let vae = toy_vae(false, 15);
        let a = vae
            .sample_prior_decode(6, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = vae
            .sample_prior_decode(6, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0, vae.decode(a.1.view()).unwrap());

        let enc = zero_net(NetworkSpec::mlp(
            NetKind::Encoder,
            "",
            2,
            &[3],
            4,
            Activation::Silu,
        ));
        let spec = NetworkSpec::mlp(NetKind::Decoder, "", 2, &[3], 2, Activation::Silu);
        let mut p = spec.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.scale(0.0);
        *p.get_mut("dense1.bias").unwrap() =
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.25, -1.5]).unwrap();
        let vae = Vae::new(
            enc,
            Network::with_params(spec, p).unwrap(),
            Prior::StandardNormal { dim: 2 },
            1.0,
        )
        .unwrap();
        let (x, _) = vae
            .sample_prior_decode(4, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert!(x.outer_iter().all(|r| r[0] == 0.25 && r[1] == -1.5));
    }

    #[test]
    fn flow_prior_sampling_matches_flow_inverse() {
        let vae = toy_vae(true, 16);
        let (_, z) = vae
            .sample_prior_decode(5, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = normal(5, 2, &mut rng);
        let Prior::Flow(flow) = &vae.prior else {
            unreachable!()
        };
        assert_eq!(z, flow.inverse(eps.view()).unwrap());
        let (back, _) = flow.forward(z.view()).unwrap();
        assert!((&back - &eps).iter().all(|e| e.abs() < 1e-10));
    }

    #[test]
    fn mismatched_architecture_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Network::new(
            NetworkSpec::mlp(NetKind::Encoder, "", 2, &[3], 6, Activation::Silu),
            &mut rng,
        )
        .unwrap();
        let dec = Network::new(
            NetworkSpec::mlp(NetKind::Decoder, "", 2, &[3], 2, Activation::Silu),
            &mut rng,
        )
        .unwrap();
        assert!(Vae::new(enc, dec, Prior::StandardNormal { dim: 2 }, 1.0).is_err());
    }
}
