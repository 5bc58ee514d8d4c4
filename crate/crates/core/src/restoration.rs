//! Zero-shot linear inverse problems via range-null decomposition.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::ebm::EnergyFunction;
use crate::error::{Error, Result};
use crate::sampler::{restore_latent, LangevinConfig};
use crate::vae::Vae;

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    /// RGB → per-pixel channel mean.
    Colorization,
    /// `factor × factor` block average.
    SuperResolution { factor: usize },
    /// Elementwise 0/1 mask over all `C·H·W` values.
    Inpainting { mask: Array1<f64> },
}

/// Linear degradation `A` with its pseudo-inverse `A†`, both matrix-free.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationOperator {
    task: Task,
    shape: ImageShape,
}

impl DegradationOperator {
    pub fn colorization(shape: ImageShape) -> Result<Self> {
        if shape.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "colorization needs 3 channels, got {}",
                shape.channels
            )));
        }
        Ok(Self {
            task: Task::Colorization,
            shape,
        })
    }

    pub fn super_resolution(shape: ImageShape, factor: usize) -> Result<Self> {
        if factor == 0 || shape.height % factor != 0 || shape.width % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "super-resolution ×{factor} needs height and width divisible by {factor}, got {}×{}",
                shape.height, shape.width
            )));
        }
        Ok(Self {
            task: Task::SuperResolution { factor },
            shape,
        })
    }

    /// `mask` holds 1 for observed and 0 for missing entries; either one value
    /// per pixel (shared across channels) or one per element.
    pub fn inpainting(shape: ImageShape, mask: Array1<f64>) -> Result<Self> {
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("inpainting mask must be 0/1".into()));
        }
        let full = if mask.len() == shape.len() {
            mask
        } else if mask.len() == shape.pixels() {
            Array1::from_shape_fn(shape.len(), |i| mask[i % shape.pixels()])
        } else {
            return Err(Error::shape(
                "inpainting mask",
                &[shape.pixels()],
                &[mask.len()],
            ));
        };
        Ok(Self {
            task: Task::Inpainting { mask: full },
            shape,
        })
    }

    /// Mask from a greyscale PNG: pixels brighter than mid-grey are observed.
    pub fn inpainting_from_png(shape: ImageShape, path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        if img.dimensions() != (shape.width as u32, shape.height as u32) {
            return Err(Error::shape(
                "mask image",
                &[shape.height, shape.width],
                &[img.height() as usize, img.width() as usize],
            ));
        }
        let mask = Array1::from_iter(img.pixels().map(|p| if p[0] > 127 { 1.0 } else { 0.0 }));
        Self::inpainting(shape, mask)
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn input_len(&self) -> usize {
        self.shape.len()
    }

    pub fn output_len(&self) -> usize {
        match &self.task {
            Task::Colorization => self.shape.pixels(),
            Task::SuperResolution { factor } => self.shape.len() / (factor * factor),
            Task::Inpainting { .. } => self.shape.len(),
        }
    }

    fn check(&self, x: &ArrayView2<f64>, len: usize, what: &str) -> Result<()> {
        if x.ncols() != len {
            return Err(Error::shape(what, &[len], &[x.ncols()]));
        }
        Ok(())
    }

    /// `(out_index, in_index)` pairs of the block structure for SR.
    fn sr_index(&self, factor: usize, c: usize, i: usize, j: usize) -> usize {
        let (oh, ow) = (self.shape.height / factor, self.shape.width / factor);
        c * oh * ow + (i / factor) * ow + j / factor
    }

    /// Shared kernel: `A` (`scale = 1/n`) and `A†ᵀ` (`scale = 1`) both sum the
    /// preimage of each output entry.
    fn gather(&self, x: ArrayView2<f64>, scale_by_size: bool) -> Array2<f64> {
        let s = self.shape;
        let mut out = Array2::zeros((x.nrows(), self.output_len()));
        match &self.task {
            Task::Colorization => {
                let w = if scale_by_size { 1.0 / 3.0 } else { 1.0 };
                let p = s.pixels();
                for (xr, mut or) in x.outer_iter().zip(out.outer_iter_mut()) {
                    for i in 0..p {
                        or[i] = w * (xr[i] + xr[p + i] + xr[2 * p + i]);
                    }
                }
            }
            Task::SuperResolution { factor } => {
                let f = *factor;
                let w = if scale_by_size {
                    1.0 / (f * f) as f64
                } else {
                    1.0
                };
                for (xr, mut or) in x.outer_iter().zip(out.outer_iter_mut()) {
                    for c in 0..s.channels {
                        for i in 0..s.height {
                            for j in 0..s.width {
                                or[self.sr_index(f, c, i, j)] +=
                                    w * xr[c * s.pixels() + i * s.width + j];
                            }
                        }
                    }
                }
            }
            Task::Inpainting { mask } => {
                out.assign(&(&x * mask));
            }
        }
        out
    }

    /// `A†` (`scale = 1`) and `Aᵀ` (`scale = 1/n`) broadcast each entry back.
    fn scatter(&self, y: ArrayView2<f64>, scale_by_size: bool) -> Array2<f64> {
        let s = self.shape;
        let mut out = Array2::zeros((y.nrows(), s.len()));
        match &self.task {
            Task::Colorization => {
                let w = if scale_by_size { 1.0 / 3.0 } else { 1.0 };
                let p = s.pixels();
                for (yr, mut or) in y.outer_iter().zip(out.outer_iter_mut()) {
                    for i in 0..p {
                        for c in 0..3 {
                            or[c * p + i] = w * yr[i];
                        }
                    }
                }
            }
            Task::SuperResolution { factor } => {
                let f = *factor;
                let w = if scale_by_size {
                    1.0 / (f * f) as f64
                } else {
                    1.0
                };
                for (yr, mut or) in y.outer_iter().zip(out.outer_iter_mut()) {
                    for c in 0..s.channels {
                        for i in 0..s.height {
                            for j in 0..s.width {
                                or[c * s.pixels() + i * s.width + j] =
                                    w * yr[self.sr_index(f, c, i, j)];
                            }
                        }
                    }
                }
            }
            Task::Inpainting { mask } => {
                out.assign(&(&y * mask));
            }
        }
        out
    }

    /// `y = A x`.
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x, self.input_len(), "degradation input")?;
        Ok(self.gather(x, true))
    }

    /// `A† y`.
    pub fn apply_pinv(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&y, self.output_len(), "pseudo-inverse input")?;
        Ok(self.scatter(y, false))
    }

    /// `Aᵀ y`.
    pub fn apply_transpose(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&y, self.output_len(), "transpose input")?;
        Ok(self.scatter(y, true))
    }

    /// `A†ᵀ x`.
    pub fn apply_pinv_transpose(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x, self.input_len(), "pseudo-inverse transpose input")?;
        Ok(self.gather(x, false))
    }

    /// `A† A x`: projection onto the range of `A†`.
    pub fn project_range(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let y = self.apply(x)?;
        self.apply_pinv(y.view())
    }

    /// `x̂ = A†y + (I − A†A) x_r`, so `A x̂ = y` whenever `y` is in range of `A`.
    pub fn range_null_combine(
        &self,
        y: ArrayView2<f64>,
        x_r: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        if y.nrows() != x_r.nrows() {
            return Err(Error::shape(
                "range-null batch",
                &[y.nrows()],
                &[x_r.nrows()],
            ));
        }
        let range = self.apply_pinv(y)?;
        let proj = self.project_range(x_r)?;
        Ok(range + &(&x_r - &proj))
    }

    /// Input indices that each output entry averages over (colorization, SR).
    fn groups(&self) -> Vec<Vec<usize>> {
        let s = self.shape;
        let mut g = vec![Vec::new(); self.output_len()];
        match &self.task {
            Task::Colorization => {
                for (i, grp) in g.iter_mut().enumerate() {
                    grp.extend([i, s.pixels() + i, 2 * s.pixels() + i]);
                }
            }
            Task::SuperResolution { factor } => {
                for c in 0..s.channels {
                    for i in 0..s.height {
                        for j in 0..s.width {
                            g[self.sr_index(*factor, c, i, j)]
                                .push(c * s.pixels() + i * s.width + j);
                        }
                    }
                }
            }
            Task::Inpainting { .. } => {}
        }
        g
    }

    /// Euclidean projection of `x` onto `{A x = y} ∩ [lo, hi]^D`.
    ///
    /// For averaging operators the projection shifts each group by a common
    /// offset and clips, with the offset found by bisection; observed inpainting
    /// entries are copied from `y`. Where `y` itself lies outside `[lo, hi]`
    /// consistency is impossible and the group is clipped instead.
    pub fn consistent_clamp(
        &self,
        y: ArrayView2<f64>,
        x: ArrayView2<f64>,
        lo: f64,
        hi: f64,
    ) -> Result<Array2<f64>> {
        self.check(&y, self.output_len(), "clamp observation")?;
        self.check(&x, self.input_len(), "clamp input")?;
        if !(lo < hi) {
            return Err(Error::InvalidArgument(
                "clamp range must be increasing".into(),
            ));
        }
        let mut out = x.mapv(|v| v.clamp(lo, hi));
        if let Task::Inpainting { mask } = &self.task {
            for (mut row, yr) in out.outer_iter_mut().zip(y.outer_iter()) {
                for (k, &m) in mask.iter().enumerate() {
                    if m == 1.0 {
                        row[k] = yr[k].clamp(lo, hi);
                    }
                }
            }
            return Ok(out);
        }
        let groups = self.groups();
        for ((mut orow, xrow), yrow) in out.outer_iter_mut().zip(x.outer_iter()).zip(y.outer_iter())
        {
            for (gi, grp) in groups.iter().enumerate() {
                let target = yrow[gi].clamp(lo, hi);
                let vals: Vec<f64> = grp.iter().map(|&k| xrow[k]).collect();
                let mean_at = |t: f64| {
                    vals.iter().map(|v| (v + t).clamp(lo, hi)).sum::<f64>() / vals.len() as f64
                };
                let vmax = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let vmin = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let (mut a, mut b) = (lo - vmax, hi - vmin);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if m <= a || m >= b {
                        break;
                    }
                    if mean_at(m) < target {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                let t = if (mean_at(a) - target).abs() <= (mean_at(b) - target).abs() {
                    a
                } else {
                    b
                };
                for (&k, v) in grp.iter().zip(&vals) {
                    orow[k] = (v + t).clamp(lo, hi);
                }
            }
        }
        Ok(out)
    }

    /// Explicit `A` (rows = outputs), for tests on small shapes.
    pub fn dense_matrix(&self) -> Array2<f64> {
        let eye = Array2::eye(self.input_len());
        self.gather(eye.view(), true).reversed_axes()
    }

    /// Explicit `A†`.
    pub fn pinv_dense_matrix(&self) -> Array2<f64> {
        let eye = Array2::eye(self.output_len());
        self.scatter(eye.view(), false).reversed_axes()
    }
}

/// Restoration objective (to maximise) and its latent gradient:
/// `−‖A†y − A†A g(z)‖²/(2σ_r²) − E(g(z)) + log p(z)`.
pub fn restoration_objective<E: EnergyFunction + ?Sized>(
    z: ArrayView2<f64>,
    y: ArrayView2<f64>,
    op: &DegradationOperator,
    vae: &Vae,
    energy: Option<&E>,
    sigma_r: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let range = op.apply_pinv(y)?;
    restoration_objective_with_range(z, range.view(), op, vae, energy, sigma_r)
}

/// As [`restoration_objective`] with `A†y` precomputed.
pub fn restoration_objective_with_range<E: EnergyFunction + ?Sized>(
    z: ArrayView2<f64>,
    range: ArrayView2<f64>,
    op: &DegradationOperator,
    vae: &Vae,
    energy: Option<&E>,
    sigma_r: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if !(sigma_r > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma_r must be positive, got {sigma_r}"
        )));
    }
    if range.nrows() != z.nrows() {
        return Err(Error::shape(
            "restoration batch",
            &[z.nrows()],
            &[range.nrows()],
        ));
    }
    let (g, tape) = vae.decoder.forward_tape(z)?;
    let r = &range - &op.project_range(g.view())?;
    let inv = 1.0 / (sigma_r * sigma_r);
    let mut obj = r.map_axis(Axis(1), |row| -0.5 * inv * row.dot(&row));
    // ∂/∂g of −‖r‖²/(2σ²) with r = A†y − A†A g is (A†A)ᵀ r / σ² = Aᵀ A†ᵀ r / σ².
    let mut dg = op.apply_transpose(op.apply_pinv_transpose(r.view())?.view())? * inv;
    if let Some(e) = energy {
        let (ev, eg) = e.energy_and_grad(g.view())?;
        obj -= &ev;
        dg -= &eg;
    }
    let (log_p, dz_prior) = vae.prior.log_prob_input_grad(z)?;
    obj += &log_p;
    let dz = vae.decoder.backward(&tape, dg, None)? + dz_prior;
    Ok((obj, dz))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestorationConfig {
    pub langevin: LangevinConfig,
    pub sigma_r: f64,
    pub restarts: usize,
    /// Output range; enforced by a consistency-preserving projection.
    pub clamp: (f64, f64),
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            langevin: LangevinConfig {
                steps: 50,
                step_size: 1e-3,
                temperature: 1e-5,
                sigma: None,
            },
            sigma_r: 0.1,
            restarts: 1,
            clamp: (-1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Restoration {
    /// Final output `x̂`, clamped.
    pub restored: Array2<f64>,
    /// Generator estimate `g(z_K)` before recombination.
    pub generated: Array2<f64>,
    pub latent: Array2<f64>,
    pub objective: Array1<f64>,
}

/// Latent Langevin from prior draws, best-of-restarts per example,
/// range-null recombination and projection onto the data range.
pub fn restore<E: EnergyFunction + ?Sized>(
    y: ArrayView2<f64>,
    op: &DegradationOperator,
    vae: &Vae,
    energy: Option<&E>,
    cfg: &RestorationConfig,
    seed: u64,
) -> Result<Restoration> {
    if cfg.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be ≥ 1".into()));
    }
    if !(cfg.clamp.0 < cfg.clamp.1) {
        return Err(Error::InvalidArgument(
            "clamp range must be increasing".into(),
        ));
    }
    if op.input_len() != vae.data_dim() {
        return Err(Error::shape(
            "restoration model",
            &[op.input_len()],
            &[vae.data_dim()],
        ));
    }
    let n = y.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_z = Array2::zeros((n, vae.latent_dim()));
    let mut best_obj = Array1::from_elem(n, f64::NEG_INFINITY);
    for restart in 0..cfg.restarts {
        let z0 = vae.prior.sample(n, &mut rng)?;
        let chain_seed = seed
            .wrapping_add(1 + restart as u64)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let z = restore_latent(
            z0.view(),
            y,
            op,
            vae,
            energy,
            cfg.sigma_r,
            &cfg.langevin,
            chain_seed,
        )?;
        let (obj, _) = restoration_objective(z.view(), y, op, vae, energy, cfg.sigma_r)?;
        for i in 0..n {
            if obj[i] > best_obj[i] {
                best_obj[i] = obj[i];
                best_z.row_mut(i).assign(&z.row(i));
            }
        }
    }
    let generated = vae.decode(best_z.view())?;
    let combined = op.range_null_combine(y, generated.view())?;
    let restored = op.consistent_clamp(y, combined.view(), cfg.clamp.0, cfg.clamp.1)?;
    Ok(Restoration {
        restored,
        generated,
        latent: best_z,
        objective: best_obj,
    })
}
