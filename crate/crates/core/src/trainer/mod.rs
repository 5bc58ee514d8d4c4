//! The primal-dual training loop and the model bundle it produces.
//!
//! Per iteration (same order for every variant, gated steps skipped):
//! real batch → prior draw `z`, `x_gen = g(z)` → conditional chain `x̃` →
//! EBM step → generator step (−ELBO or NLL, plus `λ·‖x_gen − x̃‖²` on the
//! decoder, plus `λ₂·‖z − z̃‖²` on the encoder) → dual step → EMA → log.
//! Chains and energies use the pre-update energy parameters.

pub mod config;
pub mod dual;
pub mod metrics;
pub mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use config::{ChainConfig, DataKind, PriorChoice, TrainConfig, Variant};
pub use dual::{dual_step, steps_to_zero_bound, DualMode, DualState};
pub use metrics::{read_metrics, same_stream, MetricRow, MetricsWriter};
pub use optim::{sgd_step, Adam, AdamConfig, Optimizer, Sgd};

use crate::checkpoint;
use crate::data::{Dataset, EpochBatcher, ImageShape};
use crate::ebm::{Ebm, EbmLoss};
use crate::error::{Error, Result};
use crate::flow::CouplingFlow;
use crate::nets::{ema_update, Layer, NetKind, Network, NetworkSpec, ParameterSet};
use crate::sampler::{calibrate_latent, calibrate_samples, LangevinConfig};
use crate::vae::{ElboTerms, LatentPull, Prior, Vae, VaeGrads};

/// The model that produces samples: a VAE decoder or a data-space flow.
#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Vae(Vae),
    Flow(CouplingFlow),
}

impl Generator {
    pub fn data_dim(&self) -> usize {
        match self {
            Generator::Vae(v) => v.data_dim(),
            Generator::Flow(f) => f.dim(),
        }
    }

    /// Direct samples `(x, z)`: decoder of a prior draw, or flow inverse of a base draw.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        match self {
            Generator::Vae(v) => v.sample_prior_decode(n, rng),
            Generator::Flow(f) => f.sample(n, rng),
        }
    }

    pub fn as_vae(&self) -> Option<&Vae> {
        match self {
            Generator::Vae(v) => Some(v),
            Generator::Flow(_) => None,
        }
    }

    /// Parameter families in a fixed order (checkpoint prefixes).
    pub fn families(&self) -> Vec<(&'static str, &ParameterSet)> {
        match self {
            Generator::Vae(v) => {
                let mut out = vec![
                    ("encoder", &v.encoder.params),
                    ("decoder", &v.decoder.params),
                ];
                if let Some(p) = v.prior.params() {
                    out.push(("prior", p));
                }
                out
            }
            Generator::Flow(f) => vec![("flow", &f.params)],
        }
    }

    pub fn families_mut(&mut self) -> Vec<(&'static str, &mut ParameterSet)> {
        match self {
            Generator::Vae(v) => {
                let mut out = vec![
                    ("encoder", &mut v.encoder.params),
                    ("decoder", &mut v.decoder.params),
                ];
                if let Some(p) = v.prior.params_mut() {
                    out.push(("prior", p));
                }
                out
            }
            Generator::Flow(f) => vec![("flow", &mut f.params)],
        }
    }
}

/// Everything a trained run leaves behind.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub data_dim: usize,
    pub image_shape: Option<ImageShape>,
    pub generator: Generator,
    pub ebm: Option<Ebm>,
    /// Shadow of the generator parameters.
    pub ema: Option<Generator>,
    pub dual: DualState,
    pub step: u64,
}

/// Architectures implied by a config and data geometry (fresh parameters).
pub fn build_generator<R: Rng + ?Sized>(
    cfg: &TrainConfig,
    data_dim: usize,
    image_shape: Option<ImageShape>,
    rng: &mut R,
) -> Result<Generator> {
    let m = &cfg.model;
    if cfg.variant.is_flow() {
        let flow = CouplingFlow::new(
            NetKind::Flow,
            data_dim,
            m.flow_layers,
            &m.flow_hidden,
            m.activation,
            m.flow_scale_bound,
            rng,
        )?;
        return Ok(Generator::Flow(flow));
    }
    let (enc_spec, dec_spec) = match image_shape {
        Some(shape) => {
            if shape.len() != data_dim {
                return Err(Error::shape("image data", &[shape.len()], &[data_dim]));
            }
            let mut rev = m.channels.clone();
            rev.reverse();
            (
                NetworkSpec::conv_encoder(
                    NetKind::Encoder,
                    "",
                    shape.as_array(),
                    &m.channels,
                    2 * m.latent_dim,
                    m.activation,
                )?,
                NetworkSpec::conv_decoder("", m.latent_dim, shape.as_array(), &rev, m.activation)?,
            )
        }
        None => (
            NetworkSpec::mlp(
                NetKind::Encoder,
                "",
                data_dim,
                &m.hidden,
                2 * m.latent_dim,
                m.activation,
            ),
            NetworkSpec::mlp(
                NetKind::Decoder,
                "",
                m.latent_dim,
                &m.hidden,
                data_dim,
                m.activation,
            ),
        ),
    };
    let encoder = Network::new(enc_spec, rng)?;
    let decoder = Network::new(dec_spec, rng)?;
    let prior = match m.prior {
        PriorChoice::StandardNormal => Prior::StandardNormal { dim: m.latent_dim },
        PriorChoice::Flow => Prior::Flow(CouplingFlow::new(
            NetKind::PriorFlow,
            m.latent_dim,
            m.prior_flow_layers,
            &m.prior_flow_hidden,
            m.activation,
            m.flow_scale_bound,
            rng,
        )?),
    };
    Ok(Generator::Vae(Vae::new(
        encoder,
        decoder,
        prior,
        m.sigma_dec,
    )?))
}

pub fn build_energy_spec(
    cfg: &TrainConfig,
    data_dim: usize,
    image_shape: Option<ImageShape>,
) -> Result<NetworkSpec> {
    let m = &cfg.model;
    match image_shape {
        Some(shape) => NetworkSpec::conv_encoder(
            NetKind::Energy,
            "",
            shape.as_array(),
            &m.energy_channels,
            1,
            m.activation,
        ),
        None => Ok(NetworkSpec::mlp(
            NetKind::Energy,
            "",
            data_dim,
            &m.energy_hidden,
            1,
            m.activation,
        )),
    }
}

/// Rescales the first parametrised layer's weights and redraws its biases.
/// gain 1, std 0 leaves the network untouched (and consumes no randomness).
fn spread_input_layer<R: Rng + ?Sized>(
    net: &mut Network,
    gain: f64,
    bias_std: f64,
    rng: &mut R,
) -> Result<()> {
    let Some((weight, bias)) = net.spec.layers.iter().find_map(|l| match l {
        Layer::Dense { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } => {
            Some((weight.clone(), bias.clone()))
        }
        _ => None,
    }) else {
        return Ok(());
    };
    if gain != 1.0 {
        if let Some(w) = net.params.get_mut(&weight) {
            w.mapv_inplace(|v| v * gain);
        }
    }
    if bias_std > 0.0 {
        if let Some(b) = net.params.get_mut(&bias) {
            b.mapv_inplace(|_| bias_std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(())
}

impl ModelBundle {
    /// Freshly initialised bundle; all initial randomness comes from the root seed.
    pub fn new(
        cfg: &TrainConfig,
        data_dim: usize,
        image_shape: Option<ImageShape>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::INIT, 0));
        let generator = build_generator(cfg, data_dim, image_shape, &mut rng)?;
        let ebm = if cfg.variant.is_calibrated() {
            let mut net = Network::new(build_energy_spec(cfg, data_dim, image_shape)?, &mut rng)?;
            spread_input_layer(
                &mut net,
                cfg.model.energy_input_gain,
                cfg.model.energy_input_bias_std,
                &mut rng,
            )?;
            Some(Ebm::new(net)?)
        } else {
            None
        };
        let mut dual = cfg.dual.initial_state();
        if !cfg.variant.is_calibrated() {
            dual.lambda = 0.0;
        }
        if !cfg.variant.calibrates_posterior() {
            dual.lambda2 = 0.0;
        }
        dual.validate()?;
        Ok(Self {
            config: cfg.clone(),
            data_dim,
            image_shape,
            ema: Some(generator.clone()),
            generator,
            ebm,
            dual,
            step: 0,
        })
    }

    /// The generator used for sampling: the EMA shadow when requested and present.
    pub fn sampler(&self, use_ema: bool) -> &Generator {
        match (&self.ema, use_ema) {
            (Some(e), true) => e,
            _ => &self.generator,
        }
    }

    /// `n` direct samples, plus test-time calibrated samples when `mcmc` is
    /// given (requires an energy model). Calibration uses the configured
    /// conditional chain with the step count from `mcmc`.
    pub fn generate(
        &self,
        n: usize,
        seed: u64,
        use_ema: bool,
        mcmc: Option<usize>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        if n == 0 {
            let empty = Array2::zeros((0, self.data_dim));
            return Ok((empty.clone(), mcmc.map(|_| empty)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::PRIOR, 0));
        let (x, _) = self.sampler(use_ema).sample(n, &mut rng)?;
        let calibrated = match mcmc {
            None => None,
            Some(steps) => {
                let ebm = self.ebm.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("test-time MCMC needs an energy model".into())
                })?;
                let cfg = LangevinConfig {
                    steps,
                    ..self.config.langevin.to_langevin()
                };
                Some(calibrate_samples(
                    ebm,
                    x.view(),
                    &cfg,
                    derive_seed(seed, stream::CHAIN, 0),
                )?)
            }
        };
        Ok((x, calibrated))
    }
}

/// Named sub-streams of the root seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const PRIOR: u64 = 3;
    pub const EPS: u64 = 4;
    pub const CHAIN: u64 = 5;
    pub const LATENT_CHAIN: u64 = 6;
    pub const EVAL: u64 = 7;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for `(purpose, index)` under `root`; distinct purposes never share streams.
pub fn derive_seed(root: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(purpose)) ^ index)
}

fn standard_normal(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

// ---------------------------------------------------------------- objectives

/// `mean_i ‖x_gen_i − x̃_i‖²`.
pub fn calibration_loss(x_gen: ArrayView2<f64>, x_tilde: ArrayView2<f64>) -> Result<f64> {
    Ok(calibration_loss_grad(x_gen, x_tilde)?.0)
}

/// Loss and its gradient with respect to `x_gen` (`x̃` is a constant).
pub fn calibration_loss_grad(
    x_gen: ArrayView2<f64>,
    x_tilde: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    if x_gen.dim() != x_tilde.dim() {
        return Err(Error::shape(
            "calibration targets",
            &[x_gen.nrows(), x_gen.ncols()],
            &[x_tilde.nrows(), x_tilde.ncols()],
        ));
    }
    let n = x_gen.nrows();
    if n == 0 {
        return Ok((0.0, Array2::zeros(x_gen.raw_dim())));
    }
    let diff = &x_gen - &x_tilde;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;
    Ok((loss, diff * (2.0 / n as f64)))
}

/// Calibration targets for the decoder: the prior draw that produced
/// `x_gen` and the chain output `x̃`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderTarget<'a> {
    pub z: &'a Array2<f64>,
    pub x_tilde: &'a Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct VaeObjective {
    /// `−ELBO + λ·L_cal + λ₂·pull`.
    pub loss: f64,
    pub terms: ElboTerms,
    pub grads: VaeGrads,
    pub l_con: Option<f64>,
}

/// Combined generator objective of the VAE variants and its gradient.
/// The calibration term reaches only the decoder; the pull only the encoder.
pub fn vae_objective_grad(
    vae: &Vae,
    real: ArrayView2<f64>,
    eps: &Array2<f64>,
    target: Option<DecoderTarget<'_>>,
    lambda: f64,
    pull: Option<LatentPull<'_>>,
) -> Result<VaeObjective> {
    if !(lambda >= 0.0) || pull.is_some_and(|p| !(p.weight >= 0.0)) {
        return Err(Error::Invariant(format!(
            "negative multiplier (λ = {lambda})"
        )));
    }
    let (mut loss, terms, mut grads) = vae.neg_elbo_grad(real, eps, pull)?;
    let mut l_con = None;
    if let Some(t) = target {
        let (g, tape) = vae.decoder.forward_tape(t.z.view())?;
        let (l, dg) = calibration_loss_grad(g.view(), t.x_tilde.view())?;
        l_con = Some(l);
        // skipped at λ = 0 so the update is bitwise that of a plain VAE
        if lambda > 0.0 {
            loss += lambda * l;
            vae.decoder
                .backward(&tape, dg * lambda, Some(&mut grads.decoder))?;
        }
    }
    Ok(VaeObjective {
        loss,
        terms,
        grads,
        l_con,
    })
}

#[derive(Clone, Debug)]
pub struct FlowObjective {
    /// `mean NLL + λ·L_cal`.
    pub loss: f64,
    pub nll: f64,
    pub grads: ParameterSet,
    pub l_con: Option<f64>,
}

/// EC-Flow objective: the flow NLL replaces the ELBO and the calibration
/// term differentiates through the inverse pass that produced `x_gen`.
pub fn flow_objective_grad(
    flow: &CouplingFlow,
    real: ArrayView2<f64>,
    target: Option<DecoderTarget<'_>>,
    lambda: f64,
) -> Result<FlowObjective> {
    if !(lambda >= 0.0) {
        return Err(Error::Invariant(format!(
            "negative multiplier (λ = {lambda})"
        )));
    }
    let (nll, mut grads) = flow.nll_and_grad(real)?;
    let mut loss = nll;
    let mut l_con = None;
    if let Some(t) = target {
        let (x, tape) = flow.inverse_tape(t.z.view())?;
        let (l, dx) = calibration_loss_grad(x.view(), t.x_tilde.view())?;
        l_con = Some(l);
        if lambda > 0.0 {
            loss += lambda * l;
            flow.inverse_backward(&tape, dx * lambda, Some(&mut grads))?;
        }
    }
    Ok(FlowObjective {
        loss,
        nll,
        grads,
        l_con,
    })
}

/// One optimizer per VAE parameter family.
#[derive(Clone, Debug)]
pub struct VaeOptimizers {
    pub encoder: Adam,
    pub decoder: Adam,
    pub prior: Option<Adam>,
}

impl VaeOptimizers {
    pub fn new(cfg: AdamConfig, vae: &Vae) -> Self {
        Self {
            encoder: Adam::new(cfg, &vae.encoder.params),
            decoder: Adam::new(cfg, &vae.decoder.params),
            prior: vae.prior.params().map(|p| Adam::new(cfg, p)),
        }
    }

    pub fn apply(&mut self, vae: &mut Vae, grads: &VaeGrads) -> Result<()> {
        self.encoder.step(&mut vae.encoder.params, &grads.encoder)?;
        self.decoder.step(&mut vae.decoder.params, &grads.decoder)?;
        if let (Some(opt), Some(p)) = (self.prior.as_mut(), vae.prior.params_mut()) {
            opt.step(p, &grads.prior)?;
        }
        Ok(())
    }
}

/// One descent step on the EBM contrastive loss with negatives `x̃`.
pub fn primal_step_ebm<O: Optimizer>(
    ebm: &mut Ebm,
    real: ArrayView2<f64>,
    x_tilde: ArrayView2<f64>,
    opt: &mut O,
) -> Result<EbmLoss> {
    let l = ebm.training_loss_and_grad(real, x_tilde)?;
    if !l.loss.is_finite() {
        return Err(Error::non_finite("EBM loss"));
    }
    opt.step(&mut ebm.net.params, &l.grads)?;
    Ok(l)
}

/// One descent step on the combined VAE objective; `z_tilde` (calibrated
/// latents) adds the λ₂ encoder term.
#[allow(clippy::too_many_arguments)]
pub fn primal_step_vae(
    vae: &mut Vae,
    real: ArrayView2<f64>,
    eps: &Array2<f64>,
    target: Option<DecoderTarget<'_>>,
    z_tilde: Option<&Array2<f64>>,
    dual: &DualState,
    opts: &mut VaeOptimizers,
) -> Result<VaeObjective> {
    let pull = z_tilde.map(|t| LatentPull {
        target: t,
        weight: dual.lambda2,
    });
    let obj = vae_objective_grad(vae, real, eps, target, dual.lambda, pull)?;
    if !obj.loss.is_finite() {
        return Err(Error::non_finite("VAE loss"));
    }
    opts.apply(vae, &obj.grads)?;
    Ok(obj)
}

// ---------------------------------------------------------------- loop

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub metrics: Vec<MetricRow>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ecv";

pub fn periodic_checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:08}.ecv")
}

fn is_numerical(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteEnergy { .. } | Error::ChainDiverged { .. }
    )
}

enum GenOptimizer {
    Vae(VaeOptimizers),
    Flow(Adam),
}

/// Gradients of one iteration, computed before anything is applied so a
/// numerical failure leaves every parameter untouched.
struct Pending {
    ebm: Option<EbmLoss>,
    gen: PendingGen,
    l_con: Option<f64>,
    l_con2: Option<f64>,
    elbo: f64,
    mse: f64,
}

enum PendingGen {
    Vae(VaeGrads),
    Flow(ParameterSet),
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    data_chain: LangevinConfig,
    latent_chain: LangevinConfig,
}

impl Loop<'_> {
    fn compute(&self, bundle: &ModelBundle, real: &Array2<f64>, t: u64) -> Result<Pending> {
        let cfg = self.cfg;
        let b = real.nrows();
        let calibrated = match &bundle.ebm {
            Some(ebm) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::PRIOR, t));
                let (x_gen, z) = bundle.generator.sample(b, &mut rng)?;
                let x_tilde = calibrate_samples(
                    ebm,
                    x_gen.view(),
                    &self.data_chain,
                    derive_seed(cfg.seed, stream::CHAIN, t),
                )?;
                let loss = ebm.training_loss_and_grad(real.view(), x_tilde.view())?;
                Some((z, x_tilde, loss))
            }
            None => None,
        };
        let target = calibrated
            .as_ref()
            .map(|(z, xt, _)| DecoderTarget { z, x_tilde: xt });
        let (gen, l_con, l_con2, elbo, mse) = match &bundle.generator {
            Generator::Vae(vae) => {
                let eps =
                    standard_normal(b, vae.latent_dim(), derive_seed(cfg.seed, stream::EPS, t));
                let z_tilde = if cfg.variant.calibrates_posterior() {
                    let post = vae.encode(real.view())?;
                    let z = crate::vae::reparameterize(&post, &eps)?;
                    let zt = calibrate_latent(
                        vae,
                        real.view(),
                        z.view(),
                        &self.latent_chain,
                        derive_seed(cfg.seed, stream::LATENT_CHAIN, t),
                    )?;
                    let d = &z - &zt;
                    Some((zt, d.iter().map(|v| v * v).sum::<f64>() / b as f64))
                } else {
                    None
                };
                let pull = z_tilde.as_ref().map(|(zt, _)| LatentPull {
                    target: zt,
                    weight: bundle.dual.lambda2,
                });
                let obj =
                    vae_objective_grad(vae, real.view(), &eps, target, bundle.dual.lambda, pull)?;
                if !obj.loss.is_finite()
                    || !obj.grads.encoder.is_finite()
                    || !obj.grads.decoder.is_finite()
                    || !obj.grads.prior.is_finite()
                {
                    return Err(Error::non_finite("VAE objective"));
                }
                let r = &obj.terms.reconstruction - real;
                let mse = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
                (
                    PendingGen::Vae(obj.grads),
                    obj.l_con,
                    z_tilde.map(|(_, l)| l),
                    obj.terms.elbo.mean().unwrap(),
                    mse,
                )
            }
            Generator::Flow(flow) => {
                let obj = flow_objective_grad(flow, real.view(), target, bundle.dual.lambda)?;
                if !obj.loss.is_finite() || !obj.grads.is_finite() {
                    return Err(Error::non_finite("flow objective"));
                }
                (PendingGen::Flow(obj.grads), obj.l_con, None, -obj.nll, 0.0)
            }
        };
        let ebm = calibrated.map(|(_, _, l)| l);
        if ebm
            .as_ref()
            .is_some_and(|l| !l.loss.is_finite() || !l.grads.is_finite())
        {
            return Err(Error::non_finite("EBM loss"));
        }
        Ok(Pending {
            ebm,
            gen,
            l_con,
            l_con2,
            elbo,
            mse,
        })
    }
}

/// Runs the configured variant on `data`. With `out_dir`, writes the
/// metrics table, periodic checkpoints and the final checkpoint there.
/// A streak of `max_nonfinite_streak` numerically failed iterations aborts
/// the run after saving the last good state.
pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutput> {
    train_with(cfg, data, out_dir, |_| {})
}

/// [`train`] with a callback per logged metrics row.
pub fn train_with<F: FnMut(&MetricRow)>(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    mut on_row: F,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut bundle = ModelBundle::new(cfg, data.dim(), data.image_shape)?;
    let lp = Loop {
        cfg,
        data_chain: cfg.langevin.to_langevin(),
        latent_chain: cfg.latent_langevin.to_langevin(),
    };
    lp.data_chain.validate()?;
    lp.latent_chain.validate()?;

    let mut gen_opt = match &bundle.generator {
        Generator::Vae(v) => GenOptimizer::Vae(VaeOptimizers::new(cfg.optim, v)),
        Generator::Flow(f) => GenOptimizer::Flow(Adam::new(cfg.optim, &f.params)),
    };
    let mut ebm_opt = bundle
        .ebm
        .as_ref()
        .map(|e| Adam::new(cfg.ebm_optim, &e.net.params));
    let mut batcher = EpochBatcher::new(
        data.len(),
        cfg.run.batch_size,
        derive_seed(cfg.seed, stream::BATCH, 0),
    )?;

    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsWriter::create(&dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let save = |bundle: &ModelBundle, name: &str| -> Result<Option<PathBuf>> {
        match out_dir {
            Some(dir) => {
                let p = dir.join(name);
                checkpoint::save(&p, bundle)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    };

    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut streak = 0usize;
    let total = cfg.run.iterations as u64;
    for t in 1..=total {
        let real = data.batch(&batcher.next_batch());
        let pending = match lp.compute(&bundle, &real, t) {
            Ok(p) => p,
            Err(e) if is_numerical(&e) => {
                streak += 1;
                if streak >= cfg.run.max_nonfinite_streak {
                    save(&bundle, FINAL_CHECKPOINT)?;
                    return Err(Error::TrainingAborted {
                        step: t as usize,
                        reason: format!("{streak} consecutive non-finite iterations, last: {e}"),
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        streak = 0;

        if let (Some(ebm), Some(opt), Some(l)) =
            (bundle.ebm.as_mut(), ebm_opt.as_mut(), pending.ebm.as_ref())
        {
            opt.step(&mut ebm.net.params, &l.grads)?;
        }
        match (&mut bundle.generator, &mut gen_opt, &pending.gen) {
            (Generator::Vae(v), GenOptimizer::Vae(o), PendingGen::Vae(g)) => o.apply(v, g)?,
            (Generator::Flow(f), GenOptimizer::Flow(o), PendingGen::Flow(g)) => {
                o.step(&mut f.params, g)?
            }
            _ => unreachable!("optimizer built from the same generator"),
        }
        if cfg.variant.is_calibrated() {
            bundle.dual.update(pending.l_con, pending.l_con2);
        }
        // warm-up keeps the shadow from averaging in the random init on short runs
        let decay = cfg.run.ema_decay.min((1.0 + t as f64) / (10.0 + t as f64));
        if let Some(ema) = bundle.ema.as_mut() {
            for ((_, shadow), (_, cur)) in ema
                .families_mut()
                .into_iter()
                .zip(bundle.generator.families())
            {
                ema_update(shadow, cur, decay)?;
            }
        }
        bundle.step = t;

        if t % cfg.run.log_every as u64 == 0 || t == total {
            let row = MetricRow {
                step: t,
                elbo: pending.elbo,
                mse: pending.mse,
                ebm_loss: pending.ebm.as_ref().map_or(0.0, |l| l.loss),
                l_con: pending.l_con.unwrap_or(0.0),
                lambda: bundle.dual.lambda,
                lambda2: bundle.dual.lambda2,
                e_real: pending.ebm.as_ref().map_or(0.0, |l| l.e_real),
                e_neg: pending.ebm.as_ref().map_or(0.0, |l| l.e_neg),
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = writer.as_mut() {
                w.write(&row)?;
            }
            on_row(&row);
            metrics.push(row);
        }
        if cfg.run.checkpoint_every > 0 && t % cfg.run.checkpoint_every as u64 == 0 && t != total {
            save(&bundle, &periodic_checkpoint_name(t))?;
        }
    }
    let checkpoint = save(&bundle, FINAL_CHECKPOINT)?;
    Ok(TrainOutput {
        bundle,
        metrics,
        checkpoint,
    })
}
