//! Run configuration (TOML). Every key has a default; unknown keys are errors.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::dual::{DualMode, DualState};
use super::optim::AdamConfig;
use crate::data::{load_images, Dataset, MixtureSpec};
use crate::error::{Error, Result};
use crate::nets::Activation;
use crate::sampler::LangevinConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    EcVae,
    #[serde(alias = "ec-vae+calibrated-posterior")]
    EcVaeCalibratedPosterior,
    EcFlow,
    PlainVae,
    PlainFlow,
}

impl Variant {
    pub fn is_flow(self) -> bool {
        matches!(self, Variant::EcFlow | Variant::PlainFlow)
    }

    /// Uses an energy model and data-space calibration.
    pub fn is_calibrated(self) -> bool {
        matches!(
            self,
            Variant::EcVae | Variant::EcVaeCalibratedPosterior | Variant::EcFlow
        )
    }

    pub fn calibrates_posterior(self) -> bool {
        self == Variant::EcVaeCalibratedPosterior
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::EcVae => "ec-vae",
            Variant::EcVaeCalibratedPosterior => "ec-vae-calibrated-posterior",
            Variant::EcFlow => "ec-flow",
            Variant::PlainVae => "plain-vae",
            Variant::PlainFlow => "plain-flow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Mixture,
    Images,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Training examples drawn once from the mixture.
    pub train_size: usize,
    /// Held-out examples (mixture: fresh draws; images: last files).
    pub heldout_size: usize,
    pub grid_size: usize,
    pub grid_scale: f64,
    pub mixture_std: f64,
    /// Image directory (kind = "images").
    pub path: Option<PathBuf>,
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Mixture,
            train_size: 100_000,
            heldout_size: 10_000,
            grid_size: 5,
            grid_scale: 2.0,
            mixture_std: 0.05,
            path: None,
            resolution: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorChoice {
    StandardNormal,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Hidden widths of the toy encoder/decoder MLPs.
    pub hidden: Vec<usize>,
    pub energy_hidden: Vec<usize>,
    /// First energy layer at init: weights times this gain, biases drawn
    /// N(0, bias_std²). Zero biases put every first-layer kink through the
    /// origin, which leaves an MLP unable to resolve a grid of narrow modes.
    pub energy_input_gain: f64,
    pub energy_input_bias_std: f64,
    pub activation: Activation,
    pub sigma_dec: f64,
    pub prior: PriorChoice,
    pub prior_flow_layers: usize,
    pub prior_flow_hidden: Vec<usize>,
    /// Data-space flow (ec-flow, plain-flow).
    pub flow_layers: usize,
    pub flow_hidden: Vec<usize>,
    pub flow_scale_bound: f64,
    /// Image nets: encoder channel schedule (fine → coarse); the decoder mirrors it.
    pub channels: Vec<usize>,
    pub energy_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 20,
            hidden: vec![256, 256, 256],
            energy_hidden: vec![256, 256, 256],
            energy_input_gain: 1.0,
            energy_input_bias_std: 0.0,
            activation: Activation::Silu,
            sigma_dec: 1.0,
            prior: PriorChoice::StandardNormal,
            prior_flow_layers: 4,
            prior_flow_hidden: vec![64],
            flow_layers: 8,
            flow_hidden: vec![64, 64],
            flow_scale_bound: 2.0,
            channels: vec![32, 64],
            energy_channels: vec![32, 64],
        }
    }
}

/// Chain settings as written in a config file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub temperature: f64,
    pub sigma: f64,
    /// `false` drops the proximity term (unconditional ablation).
    pub conditional: bool,
}

impl ChainConfig {
    pub fn to_langevin(&self) -> LangevinConfig {
        LangevinConfig {
            steps: self.steps,
            step_size: self.step_size,
            temperature: self.temperature,
            sigma: self.conditional.then_some(self.sigma),
        }
    }

    fn issues(&self, name: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.step_size > 0.0) {
            out.push(format!(
                "{name}.step_size must be positive, got {}",
                self.step_size
            ));
        }
        if !(self.temperature >= 0.0) {
            out.push(format!(
                "{name}.temperature must be ≥ 0, got {}",
                self.temperature
            ));
        }
        if !(self.sigma > 0.0) {
            out.push(format!("{name}.sigma must be positive, got {}", self.sigma));
        }
        out
    }
}

fn data_chain() -> ChainConfig {
    ChainConfig {
        steps: 15,
        step_size: 0.01,
        temperature: 1.0,
        sigma: 0.1,
        conditional: true,
    }
}

fn latent_chain() -> ChainConfig {
    ChainConfig {
        steps: 5,
        step_size: 0.01,
        temperature: 1.0,
        sigma: 1.0,
        conditional: true,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualConfig {
    pub mode: DualMode,
    pub lambda: f64,
    pub lambda2: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eta: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            mode: DualMode::PrimalDual,
            lambda: 1.0,
            lambda2: 1.0,
            eps1: 0.0,
            eps2: 0.0,
            eta: 1e-2,
        }
    }
}

impl DualConfig {
    pub fn initial_state(&self) -> DualState {
        DualState {
            lambda: self.lambda,
            lambda2: self.lambda2,
            eps1: self.eps1,
            eps2: self.eps2,
            eta: self.eta,
            mode: self.mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// A metrics row every `log_every` iterations.
    pub log_every: usize,
    /// Periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub ema_decay: f64,
    pub max_nonfinite_streak: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 256,
            log_every: 1,
            checkpoint_every: 0,
            ema_decay: 0.9999,
            max_nonfinite_streak: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: AdamConfig,
    #[serde(default = "ebm_optim")]
    pub ebm_optim: AdamConfig,
    #[serde(default = "data_chain")]
    pub langevin: ChainConfig,
    #[serde(default = "latent_chain")]
    pub latent_langevin: ChainConfig,
    #[serde(default)]
    pub dual: DualConfig,
    #[serde(default)]
    pub run: RunConfig,
}

fn default_variant() -> Variant {
    Variant::EcVae
}

fn ebm_optim() -> AdamConfig {
    AdamConfig::default()
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all keys have defaults")
    }
}

impl TrainConfig {
    /// Parses and validates; every problem is reported, not just the first.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::Config(vec![e.to_string().trim().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        let r = &self.run;
        if r.iterations == 0 {
            out.push("run.iterations must be positive".into());
        }
        if r.batch_size == 0 {
            out.push("run.batch_size must be positive".into());
        }
        if r.log_every == 0 {
            out.push("run.log_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&r.ema_decay) {
            out.push(format!(
                "run.ema_decay must lie in [0, 1], got {}",
                r.ema_decay
            ));
        }
        if r.max_nonfinite_streak == 0 {
            out.push("run.max_nonfinite_streak must be positive".into());
        }
        let d = &self.data;
        match d.kind {
            DataKind::Mixture => {
                if d.train_size == 0 {
                    out.push("data.train_size must be positive".into());
                }
                if d.grid_size == 0 {
                    out.push("data.grid_size must be positive".into());
                }
                if !(d.grid_scale > 0.0) {
                    out.push(format!(
                        "data.grid_scale must be positive, got {}",
                        d.grid_scale
                    ));
                }
                if !(d.mixture_std > 0.0) {
                    out.push(format!(
                        "data.mixture_std must be positive, got {}",
                        d.mixture_std
                    ));
                }
            }
            DataKind::Images => {
                if d.path.is_none() {
                    out.push("data.path is required when data.kind = \"images\"".into());
                }
                if d.resolution == 0 {
                    out.push("data.resolution must be positive".into());
                }
                if self.variant.is_flow() {
                    out.push("flow variants support mixture data only".into());
                }
            }
        }
        let m = &self.model;
        if m.latent_dim == 0 {
            out.push("model.latent_dim must be positive".into());
        }
        if !(m.sigma_dec > 0.0) {
            out.push(format!(
                "model.sigma_dec must be positive, got {}",
                m.sigma_dec
            ));
        }
        if !(m.energy_input_gain > 0.0 && m.energy_input_gain.is_finite()) {
            out.push(format!(
                "model.energy_input_gain must be positive, got {}",
                m.energy_input_gain
            ));
        }
        if !(m.energy_input_bias_std >= 0.0 && m.energy_input_bias_std.is_finite()) {
            out.push(format!(
                "model.energy_input_bias_std must be non-negative, got {}",
                m.energy_input_bias_std
            ));
        }
        if !(m.flow_scale_bound > 0.0) {
            out.push(format!(
                "model.flow_scale_bound must be positive, got {}",
                m.flow_scale_bound
            ));
        }
        if m.prior == PriorChoice::Flow && m.latent_dim < 2 {
            out.push("a flow prior needs model.latent_dim ≥ 2".into());
        }
        if self.variant.is_flow() && m.flow_layers == 0 {
            out.push("model.flow_layers must be positive for flow variants".into());
        }
        if [
            &m.hidden,
            &m.energy_hidden,
            &m.prior_flow_hidden,
            &m.flow_hidden,
            &m.channels,
            &m.energy_channels,
        ]
        .iter()
        .any(|v| v.contains(&0))
        {
            out.push("layer widths and channel counts must be positive".into());
        }
        out.extend(self.optim.issues("optim"));
        out.extend(self.ebm_optim.issues("ebm_optim"));
        out.extend(self.langevin.issues("langevin"));
        out.extend(self.latent_langevin.issues("latent_langevin"));
        let dl = &self.dual;
        if !(dl.eta > 0.0) {
            out.push(format!("dual.eta must be positive, got {}", dl.eta));
        }
        if !(dl.lambda >= 0.0) || !(dl.lambda2 >= 0.0) {
            out.push("dual.lambda and dual.lambda2 must be ≥ 0".into());
        }
        out
    }

    pub fn mixture_spec(&self) -> Result<MixtureSpec> {
        MixtureSpec::grid(
            self.data.grid_size,
            self.data.grid_scale,
            self.data.mixture_std,
        )
    }

    /// `(train, held-out)` sets. Mixture sets come from disjoint seed streams;
    /// image sets hold out the last `heldout_size` files in name order.
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        match self.data.kind {
            DataKind::Mixture => {
                let spec = self.mixture_spec()?;
                let train =
                    Dataset::mixture(spec.clone(), self.data.train_size, self.seed ^ 0x7261_696E)?;
                let held = (self.data.heldout_size > 0)
                    .then(|| {
                        Dataset::mixture(spec, self.data.heldout_size, self.seed ^ 0x6865_6C64)
                    })
                    .transpose()?;
                Ok((train, held))
            }
            DataKind::Images => {
                let path = self
                    .data
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config(vec!["data.path missing".into()]))?;
                let all = load_images(path, self.data.resolution)?;
                let h = self.data.heldout_size.min(all.len().saturating_sub(1));
                if h == 0 {
                    return Ok((all, None));
                }
                let cut = all.len() - h;
                let train_idx: Vec<usize> = (0..cut).collect();
                let held_idx: Vec<usize> = (cut..all.len()).collect();
                let split = |idx: &[usize]| Dataset {
                    data: all.batch(idx),
                    ..all.clone()
                };
                Ok((split(&train_idx), Some(split(&held_idx))))
            }
        }
    }
}
