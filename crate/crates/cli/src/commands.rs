use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ecvae::checkpoint;
use ecvae::data::{load_images, save_grid, Dataset};
use ecvae::eval::{
    consistency, heldout_elbo, mean_true_loglik, mode_coverage, psnr_per_row, recon_mse,
    COVERAGE_THRESHOLD,
};
use ecvae::flow::flow_nll;
use ecvae::restoration::{restore as run_restore, DegradationOperator, RestorationConfig};
use ecvae::trainer::{
    derive_seed, stream, train_with, Generator, ModelBundle, TrainConfig, FINAL_CHECKPOINT,
};

use crate::table::{render, write_samples, write_table};
use crate::{plot, EvalArgs, RestoreArgs, SampleArgs, TrainArgs};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const SEED_RECORD: &str = "seed.txt";

pub fn train(a: &TrainArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = TrainConfig::from_toml_str(&text)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    // verbatim copy; an overriding --seed lives in the seed record
    fs::write(a.out.join(CONFIG_SNAPSHOT), &text)?;
    fs::write(a.out.join(SEED_RECORD), format!("{}\n", cfg.seed))?;

    let (data, _) = cfg.load_data()?;
    let every = (cfg.run.iterations as u64 / 20).max(1);
    let out = train_with(&cfg, &data, Some(&a.out), |r| {
        if r.step % every == 0 {
            eprintln!(
                "step {:>7}  elbo {:>10.4}  l_con {:>9.5}  lambda {:>8.4}  ebm {:>9.4}  {:>6.1}s",
                r.step, r.elbo, r.l_con, r.lambda, r.ebm_loss, r.seconds
            );
        }
    })?;
    println!(
        "trained {} for {} steps; checkpoint {}",
        cfg.variant.name(),
        out.bundle.step,
        a.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn load(path: &Path) -> Result<ModelBundle> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(checkpoint::load(path)?)
}

/// Data table plus a figure: scatter for 2-D, image grid otherwise.
fn emit(bundle: &ModelBundle, dir: &Path, stem: &str, x: ArrayView2<f64>) -> Result<()> {
    write_samples(&dir.join(format!("{stem}.tsv")), x)?;
    let fig = dir.join(format!("{stem}.png"));
    match bundle.image_shape {
        Some(shape) => save_grid(&fig, x.slice(s![..x.nrows().min(64), ..]), shape, 8)?,
        None if x.ncols() == 2 => plot::scatter(&fig, &[x])?,
        None => {}
    }
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let bundle = load(&a.checkpoint)?;
    fs::create_dir_all(&a.out)?;
    let (x, calibrated) = bundle.generate(a.n, a.seed, a.ema.use_ema(), a.mcmc_steps)?;
    emit(&bundle, &a.out, "samples", x.view())?;
    if let Some(xc) = calibrated {
        emit(&bundle, &a.out, "samples_mcmc", xc.view())?;
    }
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

/// `colorize`, `srN` / `sr×N`, `inpaint`.
fn parse_task(task: &str) -> Result<TaskKind> {
    let t = task.trim().to_ascii_lowercase();
    match t.as_str() {
        "colorize" | "colorization" => Ok(TaskKind::Colorize),
        "inpaint" | "inpainting" => Ok(TaskKind::Inpaint),
        _ => {
            let rest = t
                .strip_prefix("sr")
                .map(|r| r.trim_start_matches(['x', '×']))
                .ok_or_else(|| anyhow!("unknown task `{task}` (colorize, srN, inpaint)"))?;
            let f: usize = rest
                .parse()
                .map_err(|_| anyhow!("bad super-resolution factor in `{task}`"))?;
            if f < 2 {
                bail!("super-resolution factor must be ≥ 2, got {f}");
            }
            Ok(TaskKind::Sr(f))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum TaskKind {
    Colorize,
    Sr(usize),
    Inpaint,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    if v.is_empty() {
        bail!("no PNG files in {}", dir.display());
    }
    Ok(v)
}

pub fn restore(a: &RestoreArgs) -> Result<()> {
    let task = parse_task(&a.task)?;
    let bundle = load(&a.checkpoint)?;
    let shape = bundle
        .image_shape
        .ok_or_else(|| anyhow!("restoration needs an image checkpoint"))?;
    let vae = bundle
        .sampler(a.ema.use_ema())
        .as_vae()
        .ok_or_else(|| anyhow!("restoration needs a VAE generator"))?;

    let files = png_files(&a.input)?;
    for f in &files {
        let (w, h) =
            image::image_dimensions(f).with_context(|| format!("reading {}", f.display()))?;
        if let TaskKind::Sr(k) = task {
            if w as usize % k != 0 || h as usize % k != 0 {
                bail!(
                    "{}: {w}×{h} is not divisible by the super-resolution factor {k}",
                    f.display()
                );
            }
        }
        if (w as usize, h as usize) != (shape.width, shape.height) {
            bail!(
                "{}: {w}×{h} does not match the model resolution {}×{}",
                f.display(),
                shape.width,
                shape.height
            );
        }
    }
    let op = match task {
        TaskKind::Colorize => DegradationOperator::colorization(shape)?,
        TaskKind::Sr(k) => DegradationOperator::super_resolution(shape, k)?,
        TaskKind::Inpaint => {
            let mask = a
                .mask
                .as_ref()
                .ok_or_else(|| anyhow!("inpaint needs --mask"))?;
            DegradationOperator::inpainting_from_png(shape, mask)?
        }
    };
    let data = load_images(&a.input, shape.width)?;
    let names = match &data.source {
        ecvae::data::DataSource::ImageDir { names, .. } => names.clone(),
        _ => unreachable!(),
    };
    let x = &data.data;
    let y = op.apply(x.view())?;
    let mut cfg = RestorationConfig::default();
    cfg.langevin.steps = a.mcmc_steps;
    let r = run_restore(y.view(), &op, vae, bundle.ebm.as_ref(), &cfg, a.seed)?;
    let baseline = op.apply_pinv(y.view())?;

    // model range is [−1, 1]
    let peak = 2.0;
    let p = psnr_per_row(x.view(), r.restored.view(), peak)?;
    let pb = psnr_per_row(x.view(), baseline.view(), peak)?;
    fs::create_dir_all(a.out.join("restored"))?;
    fs::create_dir_all(a.out.join("baseline"))?;
    let mut rows = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let xi = x.slice(s![i..i + 1, ..]);
        let ri = r.restored.slice(s![i..i + 1, ..]);
        let c = consistency(xi, ri, &op)?;
        ecvae::data::row_to_image(r.restored.row(i), shape)?
            .save(a.out.join("restored").join(name))?;
        ecvae::data::row_to_image(baseline.row(i), shape)?
            .save(a.out.join("baseline").join(name))?;
        rows.push(vec![
            name.clone(),
            p[i].to_string(),
            pb[i].to_string(),
            c.to_string(),
        ]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    rows.push(vec![
        "mean".into(),
        mean(&p).to_string(),
        mean(&pb).to_string(),
        consistency(x.view(), r.restored.view(), &op)?.to_string(),
    ]);
    let header = ["image", "psnr", "baseline_psnr", "consistency"];
    write_table(&a.out.join("metrics.tsv"), &header, &rows)?;
    print!("{}", render(&header, &rows));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let bundle = load(&a.checkpoint)?;
    let (header, rows): (Vec<&str>, Vec<Vec<String>>) =
        if bundle.image_shape.is_none() && a.data.is_none() {
            eval_toy(&bundle, a)?
        } else {
            eval_images(&bundle, a)?
        };
    let text = render(&header, &rows);
    if let Some(p) = &a.out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

type Table = (Vec<&'static str>, Vec<Vec<String>>);

fn eval_toy(bundle: &ModelBundle, a: &EvalArgs) -> Result<Table> {
    let spec = bundle.config.mixture_spec()?;
    if spec.dim() != bundle.data_dim {
        bail!(
            "checkpoint is {}-dimensional but its mixture is {}-dimensional",
            bundle.data_dim,
            spec.dim()
        );
    }
    let n = a.n.unwrap_or(100_000);
    if n == 0 {
        bail!("--n must be positive");
    }
    let (x, calibrated) = bundle.generate(n, a.seed, a.ema.use_ema(), a.mcmc_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, stream::EVAL, 0));
    let (reference, _) = spec.reference_loglik(100_000, &mut rng)?;
    let mut rows = Vec::new();
    let mut row = |name: &str, s: &Array2<f64>| -> Result<()> {
        let cov = mode_coverage(s.view(), &spec, 3.0 * spec.std, COVERAGE_THRESHOLD)?;
        rows.push(vec![
            name.to_string(),
            s.nrows().to_string(),
            mean_true_loglik(s.view(), &spec)?.to_string(),
            reference.to_string(),
            cov.modes_covered.to_string(),
            cov.high_quality_fraction.to_string(),
        ]);
        Ok(())
    };
    row("direct", &x)?;
    if let Some(xc) = &calibrated {
        row("mcmc", xc)?;
    }
    Ok((
        vec![
            "sampler",
            "n",
            "loglik",
            "reference_loglik",
            "modes_covered",
            "high_quality_fraction",
        ],
        rows,
    ))
}

fn eval_images(bundle: &ModelBundle, a: &EvalArgs) -> Result<Table> {
    let data: Dataset = match &a.data {
        Some(dir) => {
            let res = bundle
                .image_shape
                .map_or(bundle.config.data.resolution, |s| s.width);
            load_images(dir, res)?
        }
        None => bundle
            .config
            .load_data()?
            .1
            .ok_or_else(|| anyhow!("config has no held-out split; pass --data"))?,
    };
    if data.dim() != bundle.data_dim {
        bail!(
            "dataset rows have {} values but the checkpoint expects {}",
            data.dim(),
            bundle.data_dim
        );
    }
    let mut x = data.data;
    if let Some(n) = a.n {
        if n == 0 || n > x.nrows() {
            bail!("--n must be in 1..={}", x.nrows());
        }
        x = x.slice(s![..n, ..]).to_owned();
    }
    let row = match bundle.sampler(a.ema.use_ema()) {
        Generator::Vae(v) => vec![
            x.nrows().to_string(),
            recon_mse(v, x.view())?.to_string(),
            heldout_elbo(v, x.view(), 1, derive_seed(a.seed, stream::EVAL, 0))?.to_string(),
        ],
        // exact log-likelihood in the bound's column; flows do not reconstruct
        Generator::Flow(f) => vec![
            x.nrows().to_string(),
            "nan".into(),
            (-flow_nll(f, x.view())?.mean().unwrap()).to_string(),
        ],
    };
    Ok((vec!["n", "mse", "elbo"], vec![row]))
}
