//! Tab-separated numeric tables: one header line, then one row per example.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{Array2, ArrayView2};

pub fn write_samples(path: &Path, x: ArrayView2<f64>) -> Result<()> {
    let mut s = (0..x.ncols())
        .map(|j| format!("x{j}"))
        .collect::<Vec<_>>()
        .join("\t");
    s.push('\n');
    for row in x.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join("\t"));
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_samples(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let cols = header.split('\t').count();
    if header.is_empty()
        || !header
            .split('\t')
            .enumerate()
            .all(|(j, h)| h == format!("x{j}"))
    {
        bail!(
            "{} is not a sample table (header `x0\\tx1…` expected)",
            path.display()
        );
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols {
            bail!(
                "{}: line {} has {} fields, expected {cols}",
                path.display(),
                i + 2,
                f.len()
            );
        }
        for v in f {
            values.push(
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("{}: bad value `{v}`", path.display()))?,
            );
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, cols), values)?)
}

/// Header plus rows of already formatted cells.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    fs::write(path, render(header, rows)).with_context(|| format!("writing {}", path.display()))
}

pub fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    s
}
