//! Append-only metrics table (tab-separated, one row per logged step).

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 10] = [
    "step", "elbo", "mse", "ebm_loss", "l_con", "lambda", "lambda2", "e_real", "e_neg", "seconds",
];

/// One training record. Columns that do not apply to a variant are 0
/// (e.g. every EBM column for plain-vae, `mse` for flows).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub elbo: f64,
    pub mse: f64,
    pub ebm_loss: f64,
    pub l_con: f64,
    pub lambda: f64,
    pub lambda2: f64,
    pub e_real: f64,
    pub e_neg: f64,
    /// Wall clock since the start of training; not reproducible by nature.
    pub seconds: f64,
}

impl MetricRow {
    fn values(&self) -> [f64; 9] {
        [
            self.elbo,
            self.mse,
            self.ebm_loss,
            self.l_con,
            self.lambda,
            self.lambda2,
            self.e_real,
            self.e_neg,
            self.seconds,
        ]
    }

    /// `{}` formatting is the shortest string that parses back to the same f64.
    pub fn to_line(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.values() {
            s.push('\t');
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != COLUMNS.len() {
            return Err(Error::InvalidArgument(format!(
                "metrics row has {} fields, expected {}",
                f.len(),
                COLUMNS.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad {} value `{}`", COLUMNS[i], f[i])))
        };
        Ok(Self {
            step: f[0]
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad step `{}`", f[0])))?,
            elbo: num(1)?,
            mse: num(2)?,
            ebm_loss: num(3)?,
            l_con: num(4)?,
            lambda: num(5)?,
            lambda2: num(6)?,
            e_real: num(7)?,
            e_neg: num(8)?,
            seconds: num(9)?,
        })
    }

    /// Bitwise equality on every column except `seconds`.
    pub fn same_values(&self, other: &Self) -> bool {
        self.step == other.step
            && self.values()[..8]
                .iter()
                .zip(&other.values()[..8])
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn header() -> String {
    COLUMNS.join("\t")
}

/// True when both streams have the same length and every row matches
/// bitwise outside the wall-clock column.
pub fn same_stream(a: &[MetricRow], b: &[MetricRow]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_values(y))
}

/// Writes the header on creation, then one flushed line per row.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{}", header())?;
        Ok(Self { file })
    }

    /// Reopens an existing table for appending.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_line())?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) => {
            let h = h?;
            if h.trim_end() != header() {
                return Err(Error::InvalidArgument(format!(
                    "unexpected metrics header `{h}`"
                )));
            }
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(MetricRow::parse(&line)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, secs: f64) -> MetricRow {
        MetricRow {
            step,
            elbo: -1.0 / 3.0,
            mse: 0.1 + 0.2,
            ebm_loss: -2.5e-17,
            l_con: 1e300,
            lambda: 0.52,
            lambda2: 0.0,
            e_real: f64::MIN_POSITIVE,
            e_neg: -7.0,
            seconds: secs,
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let r = row(3, 0.25);
        let back = MetricRow::parse(&r.to_line()).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn file_round_trip_and_comparison() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let mut w = MetricsWriter::create(&p).unwrap();
        w.write(&row(1, 0.1)).unwrap();
        drop(w);
        MetricsWriter::append(&p)
            .unwrap()
            .write(&row(2, 0.2))
            .unwrap();
        let a = read_metrics(&p).unwrap();
        assert_eq!(a.len(), 2);
        let b = vec![row(1, 9.0), row(2, 9.0)];
        assert!(same_stream(&a, &b));
        let mut c = b.clone();
        c[1].lambda = f64::from_bits(c[1].lambda.to_bits() + 1);
        assert!(!same_stream(&a, &c));
        assert!(!same_stream(&a, &b[..1]));
    }

    #[test]
    fn header_lists_documented_columns() {
        assert_eq!(
            header(),
            "step\telbo\tmse\tebm_loss\tl_con\tlambda\tlambda2\te_real\te_neg\tseconds"
        );
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(MetricRow::parse("1\t2").is_err());
        assert!(MetricRow::parse("x\t0\t0\t0\t0\t0\t0\t0\t0\t0").is_err());
    }
}
