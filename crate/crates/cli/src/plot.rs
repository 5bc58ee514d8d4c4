//! Figures. No text is drawn (the bitmap backend is built without fonts);
//! file names say what each figure shows.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Result};
use ndarray::ArrayView2;
use plotters::prelude::*;

use ecvae::checkpoint;
use ecvae::data::save_grid;
use ecvae::trainer::metrics::{read_metrics, MetricRow};
use ecvae::trainer::{FINAL_CHECKPOINT, METRICS_FILE};

use crate::table::read_samples;
use crate::PlotArgs;

const PANEL: u32 = 480;

fn err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("drawing failed: {e:?}")
}

fn bounds(sets: &[ArrayView2<f64>]) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for s in sets {
        for r in s.outer_iter() {
            if r[0].is_finite() && r[1].is_finite() {
                x0 = x0.min(r[0]);
                x1 = x1.max(r[0]);
                y0 = y0.min(r[1]);
                y1 = y1.max(r[1]);
            }
        }
    }
    if x0 > x1 {
        return ((-1.0, 1.0), (-1.0, 1.0));
    }
    let pad = |a: f64, b: f64| {
        let p = ((b - a) * 0.05).max(1e-3);
        (a - p, b + p)
    };
    (pad(x0, x1), pad(y0, y1))
}

/// Draws into an RGB buffer and writes it as PNG through the `image` crate.
fn render<F>(path: &Path, size: (u32, u32), draw: F) -> Result<()>
where
    F: FnOnce(&DrawingArea<BitMapBackend<'_>, plotters::coord::Shift>) -> Result<()>,
{
    let mut buf = vec![255u8; (size.0 * size.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, size).into_drawing_area();
        root.fill(&WHITE).map_err(err)?;
        draw(&root)?;
        root.present().map_err(err)?;
    }
    let img = image::RgbImage::from_raw(size.0, size.1, buf)
        .ok_or_else(|| anyhow!("bad figure buffer"))?;
    img.save(path)?;
    Ok(())
}

/// One scatter panel per set, side by side on shared axes.
pub fn scatter(path: &Path, sets: &[ArrayView2<f64>]) -> Result<()> {
    if sets.iter().any(|s| s.ncols() != 2) {
        bail!("scatter plots need 2-D samples");
    }
    let (xr, yr) = bounds(sets);
    render(path, (PANEL * sets.len().max(1) as u32, PANEL), |root| {
        let colors = [RGBColor(31, 119, 180), RGBColor(214, 39, 40)];
        for (k, (area, s)) in root
            .split_evenly((1, sets.len().max(1)))
            .iter()
            .zip(sets)
            .enumerate()
        {
            let mut chart = ChartBuilder::on(area)
                .margin(12)
                .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
                .map_err(err)?;
            chart
                .configure_mesh()
                .x_labels(0)
                .y_labels(0)
                .light_line_style(WHITE)
                .draw()
                .map_err(err)?;
            let c = colors[k % colors.len()];
            chart
                .draw_series(
                    s.outer_iter()
                        .map(|r| Circle::new((r[0], r[1]), 1, c.mix(0.5).filled())),
                )
                .map_err(err)?;
        }
        Ok(())
    })
}

/// Stacked panels: λ, L_con, ELBO against step.
pub fn curves(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let series: [fn(&MetricRow) -> f64; 3] = [|r| r.lambda, |r| r.l_con, |r| r.elbo];
    let s0 = rows.first().map_or(0.0, |r| r.step as f64);
    let s1 = rows.last().map_or(1.0, |r| r.step as f64).max(s0 + 1.0);
    render(path, (2 * PANEL, 3 * PANEL / 2), |root| {
        for (area, f) in root.split_evenly((3, 1)).iter().zip(series) {
            let v: Vec<(f64, f64)> = rows
                .iter()
                .map(|r| (r.step as f64, f(r)))
                .filter(|p| p.1.is_finite())
                .collect();
            let lo = v.iter().map(|p| p.1).fold(f64::MAX, f64::min);
            let hi = v.iter().map(|p| p.1).fold(f64::MIN, f64::max);
            let (lo, hi) = if lo > hi {
                (0.0, 1.0)
            } else {
                (lo, hi.max(lo + 1e-9))
            };
            let mut chart = ChartBuilder::on(area)
                .margin(10)
                .build_cartesian_2d(s0..s1, lo..hi)
                .map_err(err)?;
            chart
                .configure_mesh()
                .x_labels(0)
                .y_labels(0)
                .light_line_style(WHITE)
                .draw()
                .map_err(err)?;
            chart.draw_series(LineSeries::new(v, &BLUE)).map_err(err)?;
        }
        Ok(())
    })
}

pub fn run(a: &PlotArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    if a.input.is_dir() {
        return plot_run(&a.input, &a.out, a.seed);
    }
    let is_table = a.input.extension().is_some_and(|e| e == "tsv");
    if !is_table {
        bail!(
            "{}: unknown input kind (expected a run directory or a .tsv sample table)",
            a.input.display()
        );
    }
    let x = read_samples(&a.input)?;
    if x.ncols() != 2 {
        bail!(
            "{}: only 2-D sample tables can be plotted",
            a.input.display()
        );
    }
    let out = a.out.join("samples.png");
    scatter(&out, &[x.view()])?;
    println!("wrote {}", out.display());
    Ok(())
}

fn plot_run(dir: &Path, out: &Path, seed: u64) -> Result<()> {
    let metrics = dir.join(METRICS_FILE);
    let ckpt = dir.join(FINAL_CHECKPOINT);
    if !metrics.exists() && !ckpt.exists() {
        bail!(
            "{}: not a run directory (no {METRICS_FILE} or {FINAL_CHECKPOINT})",
            dir.display()
        );
    }
    if metrics.exists() {
        let rows = read_metrics(&metrics)?;
        if rows.is_empty() {
            println!("metrics table is empty; skipping curves");
        } else {
            curves(&out.join("curves.png"), &rows)?;
            println!("wrote {}", out.join("curves.png").display());
        }
    }
    if ckpt.exists() {
        let bundle = checkpoint::load(&ckpt)?;
        let (x, _) = bundle.generate(2000, seed, true, None)?;
        match bundle.image_shape {
            Some(shape) => {
                save_grid(
                    &out.join("samples.png"),
                    x.slice(ndarray::s![..64, ..]),
                    shape,
                    8,
                )?;
            }
            None if x.ncols() == 2 => {
                scatter(&out.join("samples.png"), &[x.view()])?;
                let (real, _) = bundle.config.mixture_spec()?.sample(
                    2000,
                    &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed),
                );
                scatter(&out.join("real_vs_model.png"), &[real.view(), x.view()])?;
                println!("wrote {}", out.join("real_vs_model.png").display());
            }
            None => {}
        }
        println!("wrote {}", out.join("samples.png").display());
    }
    Ok(())
}
