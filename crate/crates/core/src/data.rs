//! Toy 25-Gaussians mixture with exact density, image folders, batching.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major image geometry; rows of a data batch hold `C·H·W` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Isotropic Gaussian mixture with explicit means and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub means: Array2<f64>,
    pub std: f64,
    pub weights: Array1<f64>,
}

impl MixtureSpec {
    /// `size × size` grid with spacing `scale`, centred on the origin, equal weights.
    pub fn grid(size: usize, scale: f64, std: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("grid size must be positive".into()));
        }
        let k = size * size;
        let off = (size as f64 - 1.0) / 2.0;
        let means = Array2::from_shape_fn((k, 2), |(m, c)| {
            let idx = if c == 0 { m / size } else { m % size };
            (idx as f64 - off) * scale
        });
        let spec = Self {
            means,
            std,
            weights: Array1::from_elem(k, 1.0 / k as f64),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 5×5 grid at spacing 2, σ = 0.05.
    pub fn default_grid() -> Self {
        Self::grid(5, 2.0, 0.05).expect("valid default")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.nrows();
        if k == 0 || self.weights.len() != k {
            return Err(Error::InvalidArgument(format!(
                "mixture needs one weight per mean ({} means, {} weights)",
                k,
                self.weights.len()
            )));
        }
        if !(self.std >= 0.0) || !self.std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "mixture std must be ≥ 0, got {}",
                self.std
            )));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) || (self.weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "mixture weights must be positive and sum to 1".into(),
            ));
        }
        for i in 0..k {
            for j in 0..i {
                if self.means.row(i) == self.means.row(j) {
                    return Err(Error::InvalidArgument(format!(
                        "mixture means {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// I.i.d. draws and their component ids.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let d = self.dim();
        let cdf: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, &w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let mut x = Array2::zeros((n, d));
        let mut ids = Vec::with_capacity(n);
        for mut row in x.outer_iter_mut() {
            let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
            let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                row[j] = self.means[[k, j]] + self.std * e;
            }
            ids.push(k);
        }
        (x, ids)
    }

    /// `log Σ_k w_k N(x; μ_k, σ² I)` per row, via log-sum-exp.
    pub fn log_density(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let d = self.dim();
        if x.ncols() != d {
            return Err(Error::shape("mixture input", &[d], &[x.ncols()]));
        }
        if !(self.std > 0.0) {
            return Err(Error::InvalidArgument(
                "log-density of a degenerate mixture (std = 0)".into(),
            ));
        }
        let var = self.std * self.std;
        let norm = -0.5 * d as f64 * (2.0 * PI * var).ln();
        let log_w = self.weights.mapv(f64::ln);
        let mut terms = vec![0.0; self.num_components()];
        Ok(x.map_axis(Axis(1), |row| {
            for (k, t) in terms.iter_mut().enumerate() {
                let mut sq = 0.0;
                for j in 0..d {
                    let r = row[j] - self.means[[k, j]];
                    sq += r * r;
                }
                *t = log_w[k] + norm - sq / (2.0 * var);
            }
            log_sum_exp(&terms)
        }))
    }

    /// Nearest mean index and distance for one point.
    pub fn nearest(&self, x: ArrayView1<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, m) in self.means.outer_iter().enumerate() {
            let d2: f64 = m.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        (best.0, best.1.sqrt())
    }

    /// Monte-Carlo mean log-density of `n` fresh samples, with its standard error.
    pub fn reference_loglik<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(f64, f64)> {
        let (x, _) = self.sample(n, rng);
        let lp = self.log_density(x.view())?;
        let mean = lp.mean().unwrap_or(f64::NAN);
        let se = if n > 1 {
            lp.std(1.0) / (n as f64).sqrt()
        } else {
            f64::NAN
        };
        Ok((mean, se))
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
}

/// Affine map between stored values and model coordinates:
/// `model = (raw − offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Self = Self {
        offset: 0.0,
        scale: 1.0,
    };
    /// 8-bit pixels to [−1, 1].
    pub const PIXELS: Self = Self {
        offset: 127.5,
        scale: 127.5,
    };

    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.scale
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

/// Where a training set came from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Mixture(MixtureSpec),
    ImageDir { path: PathBuf, names: Vec<String> },
}

/// Materialised dataset: one example per row, in model coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source: DataSource,
    pub data: Array2<f64>,
    pub normalization: Normalization,
    pub image_shape: Option<ImageShape>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn mixture(spec: MixtureSpec, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "dataset size must be positive".into(),
            ));
        }
        spec.validate()?;
        let (data, _) = spec.sample(n, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            source: DataSource::Mixture(spec),
            data,
            normalization: Normalization::IDENTITY,
            image_shape: None,
        })
    }

    /// Rows selected by index, in the given order.
    pub fn batch(&self, idx: &[usize]) -> Array2<f64> {
        self.data.select(Axis(0), idx)
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "PNG"];

/// Loads every PNG in `dir` (sorted by file name), centre-crops to a square,
/// resizes to `resolution²` and maps RGB to [−1, 1].
pub fn load_images(dir: &Path, resolution: usize) -> Result<Dataset> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let mut failures = Vec::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            return Err(Error::ImageLoad {
                path: dir.to_path_buf(),
                failures: vec![format!("cannot read directory: {e}")],
            })
        }
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let shape = ImageShape::new(3, resolution, resolution);
    let mut rows: Vec<f64> = Vec::new();
    let mut names = Vec::new();
    for p in &paths {
        let ext_ok = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e));
        if !ext_ok {
            failures.push(format!("{}: unsupported extension", p.display()));
            continue;
        }
        match image::open(p) {
            Ok(img) => {
                rows.extend(image_to_row(&img, resolution).iter());
                names.push(p.file_name().unwrap().to_string_lossy().into_owned());
            }
            Err(e) => failures.push(format!("{}: {e}", p.display())),
        }
    }
    if names.is_empty() {
        if failures.is_empty() {
            failures.push("no image files found".into());
        }
        return Err(Error::ImageLoad {
            path: dir.to_path_buf(),
            failures,
        });
    }
    let n = names.len();
    let data = Array2::from_shape_vec((n, shape.len()), rows).expect("row lengths agree");
    Ok(Dataset {
        source: DataSource::ImageDir {
            path: dir.to_path_buf(),
            names,
        },
        data,
        normalization: Normalization::PIXELS,
        image_shape: Some(shape),
    })
}

fn image_to_row(img: &image::DynamicImage, resolution: usize) -> Array1<f64> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let cropped =
        image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let r = resolution as u32;
    let resized = if side == r {
        cropped
    } else {
        image::imageops::resize(&cropped, r, r, image::imageops::FilterType::Triangle)
    };
    let shape = ImageShape::new(3, resolution, resolution);
    let mut row = Array1::zeros(shape.len());
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            row[c * shape.pixels() + y as usize * resolution + x as usize] =
                Normalization::PIXELS.normalize(px[c] as f64);
        }
    }
    row
}

/// Model-space value to an 8-bit pixel (clamped, rounded).
pub fn to_u8(v: f64) -> u8 {
    Normalization::PIXELS
        .denormalize(v)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// 8-bit quantisation round trip in model space.
pub fn quantize(x: ArrayView2<f64>) -> Array2<f64> {
    x.mapv(|v| Normalization::PIXELS.normalize(to_u8(v) as f64))
}

/// One example row to an RGB (or grey, replicated) raster.
pub fn row_to_image(row: ArrayView1<f64>, shape: ImageShape) -> Result<image::RgbImage> {
    if row.len() != shape.len() {
        return Err(Error::shape("image row", &[shape.len()], &[row.len()]));
    }
    if shape.channels != 1 && shape.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "cannot render {} channels",
            shape.channels
        )));
    }
    let p = shape.pixels();
    Ok(image::RgbImage::from_fn(
        shape.width as u32,
        shape.height as u32,
        |x, y| {
            let i = y as usize * shape.width + x as usize;
            let ch = |c: usize| to_u8(row[if shape.channels == 1 { i } else { c * p + i }]);
            image::Rgb([ch(0), ch(1), ch(2)])
        },
    ))
}

/// Tiles rows into a grid `cols` wide with a 1-pixel gap and writes a PNG.
pub fn save_grid(path: &Path, rows: ArrayView2<f64>, shape: ImageShape, cols: usize) -> Result<()> {
    let n = rows.nrows();
    let cols = cols.max(1).min(n.max(1));
    let grid_rows = n.div_ceil(cols).max(1);
    let (tw, th) = (shape.width as u32 + 1, shape.height as u32 + 1);
    let mut canvas = image::RgbImage::from_pixel(
        cols as u32 * tw + 1,
        grid_rows as u32 * th + 1,
        image::Rgb([255, 255, 255]),
    );
    for (k, row) in rows.outer_iter().enumerate() {
        let tile = row_to_image(row, shape)?;
        let (gx, gy) = ((k % cols) as u32 * tw + 1, (k / cols) as u32 * th + 1);
        image::imageops::replace(&mut canvas, &tile, gx as i64, gy as i64);
    }
    canvas.save(path)?;
    Ok(())
}

/// Shuffled epoch iterator over `0..n`; each epoch visits every index once.
#[derive(Clone, Debug)]
pub struct EpochBatcher {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl EpochBatcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batcher needs n > 0 and batch_size > 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            pos: 0,
            batch_size,
            epoch: 0,
            rng,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Next batch of indices; the final batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}
