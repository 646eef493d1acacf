//! Dataset ingestion and synthetic generators.

use std::f64::consts::PI;
use std::path::Path;

use arks_core::models::{RlsProblem, Sample, Target};
use arks_core::seed;
use arks_core::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Classification,
    Regression,
}

fn data_err(path: &Path, line: u64, msg: impl Into<String>) -> CliError {
    CliError::Data {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a headed CSV whose last column is the target.
pub fn load_csv(path: &Path, target: TargetKind) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let width = rdr
        .headers()
        .map_err(|e| data_err(path, 1, e.to_string()))?
        .len();
    if width < 2 {
        return Err(data_err(
            path,
            1,
            "need at least one feature column and a target",
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(data_err(
                path,
                line,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        let mut vals = Vec::with_capacity(width);
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                data_err(
                    path,
                    line,
                    format!("column {}: {cell:?} is not a number", j + 1),
                )
            })?;
            vals.push(v);
        }
        let y = vals.pop().unwrap_or_default();
        let y = match target {
            TargetKind::Regression => Target::Value(y),
            TargetKind::Classification => {
                if y < 0.0 || y.fract() != 0.0 {
                    return Err(data_err(
                        path,
                        line,
                        format!("class label {y} is not a nonnegative integer"),
                    ));
                }
                Target::Class(y as usize)
            }
        };
        out.push(Sample { x: vals, y });
    }
    if out.is_empty() {
        return Err(data_err(path, 1, "no data rows"));
    }
    Ok(out)
}

/// Writes samples in the format [`load_csv`] reads.
pub fn write_csv(path: &Path, data: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    let d = data.first().map_or(0, |s| s.x.len());
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    let io = |e: csv::Error| CliError::io(path, e.into());
    w.write_record(&header).map_err(io)?;
    for s in data {
        let mut row: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        row.push(match s.y {
            Target::Class(c) => c.to_string(),
            Target::Value(v) => v.to_string(),
        });
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Per-column affine map to mean 0 and variance 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on the training split only; constant columns keep unit scale.
    pub fn fit(train: &[Sample]) -> Self {
        let d = train.first().map_or(0, |s| s.x.len());
        let n = train.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for s in train {
            for (m, v) in mean.iter_mut().zip(&s.x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for s in train {
            for ((a, v), m) in var.iter_mut().zip(&s.x).zip(&mean) {
                *a += (v - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, data: &mut [Sample]) {
        for s in data {
            for ((v, m), sd) in s.x.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / sd;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    TwoMoons,
    LinearRegression,
}

fn default_dim() -> usize {
    2
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Feature dimension for linear regression.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Multiplies every generated feature.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(CliError::Config(
                "synthetic data needs n_train, n_test >= 1".into(),
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(CliError::Config("synthetic noise must be >= 0".into()));
        }
        if self.dim == 0 {
            return Err(CliError::Config("synthetic dim must be >= 1".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(CliError::Config("synthetic scale must be positive".into()));
        }
        Ok(())
    }

    pub fn target(&self) -> TargetKind {
        match self.kind {
            SyntheticKind::TwoMoons => TargetKind::Classification,
            SyntheticKind::LinearRegression => TargetKind::Regression,
        }
    }

    /// `(train, test)` drawn from one stream keyed by `self.seed` and `stream`.
    pub fn generate(&self, stream: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
        self.validate()?;
        let s = seed::derive(self.seed, &[stream]);
        let n = self.n_train + self.n_test;
        let mut all = match self.kind {
            SyntheticKind::TwoMoons => two_moons(n, self.noise, s),
            SyntheticKind::LinearRegression => linear_regression(n, self.dim, self.noise, s),
        };
        for s in &mut all {
            s.x.iter_mut().for_each(|v| *v *= self.scale);
        }
        let test = all.split_off(self.n_train);
        Ok((all, test))
    }
}

/// Two interleaved half circles with Gaussian noise, in their natural
/// coordinates (roughly `[-1, 2] x [-0.5, 1]`). Labels alternate so both
/// classes have `n / 2` points (up to one).
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Vec<Sample> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|i| {
            let c = i % 2;
            let t: f64 = rng.random_range(0.0..PI);
            let (mut a, mut b) = if c == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let za: f64 = StandardNormal.sample(&mut rng);
            let zb: f64 = StandardNormal.sample(&mut rng);
            a += noise * za;
            b += noise * zb;
            Sample::class(vec![a, b], c)
        })
        .collect()
}

/// `y = w.x + 0.5 + noise`, with `x ~ N(0, I)` and a fixed weight pattern.
pub fn linear_regression(n: usize, dim: usize, noise: f64, seed: u64) -> Vec<Sample> {
    let mut rng = seed::rng(seed);
    let w: Vec<f64> = (0..dim)
        .map(|j| if j % 2 == 0 { 1.0 } else { -0.5 } / (1.0 + j as f64))
        .collect();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z: f64 = StandardNormal.sample(&mut rng);
            let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5 + noise * z;
            Sample::regression(x, y)
        })
        .collect()
}

fn default_xi_spread() -> f64 {
    1.0
}

fn default_rls_test() -> usize {
    200
}

fn default_eps_pos() -> f64 {
    1e-3
}

/// A robust least-squares instance fixed by `seed`, with `xi` samples drawn per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlsSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_train: usize,
    #[serde(default = "default_rls_test")]
    pub n_test: usize,
    /// Training and test `xi` are uniform on `[-spread, spread]`.
    #[serde(default = "default_xi_spread")]
    pub xi_spread: f64,
    /// Added to the training loss only.
    #[serde(default = "default_eps_pos")]
    pub eps_pos: f64,
    #[serde(default)]
    pub seed: u64,
}

impl RlsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(CliError::Config(
                "rls needs rows, cols, n_train, n_test >= 1".into(),
            ));
        }
        if !(self.xi_spread > 0.0 && self.xi_spread <= 1.0) {
            return Err(CliError::Config("rls xi_spread must lie in (0, 1]".into()));
        }
        if !(self.eps_pos >= 0.0) {
            return Err(CliError::Config("rls eps_pos must be >= 0".into()));
        }
        Ok(())
    }

    /// `A0`, `A1` and `b` with `N(0, 1)` entries.
    pub fn problem(&self) -> Result<RlsProblem> {
        self.validate()?;
        let mut rng = seed::rng(seed::derive(self.seed, &[u64::MAX]));
        let mut normal =
            |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let a0 = Tensor::matrix(self.rows, self.cols, normal(self.rows * self.cols))?;
        let a1 = Tensor::matrix(self.rows, self.cols, normal(self.rows * self.cols))?;
        let b = normal(self.rows);
        Ok(RlsProblem::new(a0, a1, b)?)
    }

    /// Training and test `xi` for one run.
    pub fn sample(&self, stream: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        let mut rng = seed::rng(seed::derive(self.seed, &[stream]));
        let mut draw = |k: usize| -> Vec<f64> {
            (0..k)
                .map(|_| rng.random_range(-self.xi_spread..=self.xi_spread))
                .collect()
        };
        let train = draw(self.n_train);
        Ok((train, draw(self.n_test)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str, body: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("arks-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn single_row() {
        let p = tmp("one.csv", "a,b,y\n1,2,3\n");
        let d = load_csv(&p, TargetKind::Regression).unwrap();
        assert_eq!(d, vec![Sample::regression(vec![1.0, 2.0], 3.0)]);
    }

    #[test]
    fn header_only_is_empty_error() {
        let p = tmp("empty.csv", "a,b,y\n");
        assert!(matches!(
            load_csv(&p, TargetKind::Regression),
            Err(CliError::Data { .. })
        ));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let p = tmp("ragged.csv", "a,b,y\n1,2,3\n4,5\n");
        match load_csv(&p, TargetKind::Regression) {
            Err(CliError::Data { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let p = tmp("text.csv", "a,b,y\n1,2,3\n4,five,6\n");
        match load_csv(&p, TargetKind::Regression) {
            Err(CliError::Data { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("five"));
            }
            other => panic!("{other:?}"),
        }
        let p = tmp("label.csv", "a,y\n1,0.5\n");
        assert!(load_csv(&p, TargetKind::Classification).is_err());
    }

    #[test]
    fn standardizer_uses_train_statistics() {
        let mut train = vec![
            Sample::regression(vec![1.0, 5.0], 0.0),
            Sample::regression(vec![3.0, 5.0], 0.0),
        ];
        let s = Standardizer::fit(&train);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        s.apply(&mut train);
        assert_eq!(train[0].x, vec![-1.0, 0.0]);
    }

    #[test]
    fn generators_are_seeded() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::TwoMoons,
            n_train: 50,
            n_test: 20,
            noise: 0.1,
            seed: 4,
            dim: 2,
            scale: 1.0,
        };
        let (a, b) = spec.generate(0).unwrap();
        assert_eq!((a.len(), b.len()), (50, 20));
        assert_eq!(spec.generate(0).unwrap().0, a);
        assert_ne!(spec.generate(1).unwrap().0, a);
        assert!(a.iter().all(|s| s.x[0].abs() < 3.0 && s.x[1].abs() < 2.0));
        let r = RlsSpec {
            rows: 4,
            cols: 3,
            n_train: 10,
            n_test: 5,
            xi_spread: 0.5,
            eps_pos: 1e-3,
            seed: 1,
        };
        assert_eq!(r.problem().unwrap().dim(), 3);
        assert_eq!(r.problem().unwrap(), r.problem().unwrap());
        let (tr, te) = r.sample(0).unwrap();
        assert_eq!((tr.len(), te.len()), (10, 5));
        assert!(tr.iter().chain(&te).all(|x| x.abs() <= 0.5));
        assert_ne!(r.sample(1).unwrap().0, tr);
    }
}
