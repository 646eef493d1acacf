//! Transport costs, c-exponential kernels, kernel distances and MMD.
//!
//! Every kernel here has the form `k(u, x) = exp(-c(u, x) / sigma)`. The
//! Gaussian kernel uses the halved squared Euclidean cost, so
//! `k(u, x) = exp(-||u - x||^2 / (2 sigma))`: `sigma` is a squared length
//! scale, not a standard deviation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostSpec {
    /// `||u - x||_2^2 / 2`
    SqL2Half,
    /// `||u - x||_2^2`
    SqL2,
    /// `||u - x||_2`
    L2,
    /// `||u - x||_1`
    L1,
}

fn check_dims(u: &[f64], x: &[f64]) -> Result<()> {
    if u.len() != x.len() {
        return Err(Error::shape(
            "cost",
            format!("dimension {} vs {}", u.len(), x.len()),
        ));
    }
    Ok(())
}

impl CostSpec {
    pub fn cost(&self, u: &[f64], x: &[f64]) -> Result<f64> {
        check_dims(u, x)?;
        let diff = u.iter().zip(x).map(|(a, b)| a - b);
        Ok(match self {
            CostSpec::SqL2Half => 0.5 * diff.map(|d| d * d).sum::<f64>(),
            CostSpec::SqL2 => diff.map(|d| d * d).sum(),
            CostSpec::L2 => diff.map(|d| d * d).sum::<f64>().sqrt(),
            CostSpec::L1 => diff.map(f64::abs).sum(),
        })
    }

    /// Gradient in `u`. The non-smooth costs return 0 where they are not differentiable.
    pub fn grad_u(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_dims(u, x)?;
        let diff: Vec<f64> = u.iter().zip(x).map(|(a, b)| a - b).collect();
        Ok(match self {
            CostSpec::SqL2Half => diff,
            CostSpec::SqL2 => diff.iter().map(|d| 2.0 * d).collect(),
            CostSpec::L2 => {
                let n = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                if n == 0.0 {
                    vec![0.0; diff.len()]
                } else {
                    diff.iter().map(|d| d / n).collect()
                }
            }
            CostSpec::L1 => diff
                .iter()
                .map(|&d| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        })
    }
}

/// A c-exponential kernel `exp(-c(u, x) / sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub cost: CostSpec,
    pub sigma: f64,
}

impl KernelSpec {
    pub fn new(cost: CostSpec, sigma: f64) -> Result<Self> {
        let k = KernelSpec { cost, sigma };
        k.validate()?;
        Ok(k)
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(CostSpec::SqL2Half, sigma)
    }

    pub fn laplacian(sigma: f64) -> Result<Self> {
        Self::new(CostSpec::L2, sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || self.sigma.is_infinite() {
            return Err(Error::Domain(format!(
                "kernel bandwidth must be positive and finite, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn eval(&self, u: &[f64], x: &[f64]) -> Result<f64> {
        Ok((-self.cost.cost(u, x)? / self.sigma).exp())
    }

    /// `(k(u, x), grad_u k(u, x))`
    pub fn eval_grad(&self, u: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let k = self.eval(u, x)?;
        let gc = self.cost.grad_u(u, x)?;
        Ok((k, gc.into_iter().map(|g| -k * g / self.sigma).collect()))
    }
}

pub fn cost(spec: CostSpec, u: &[f64], x: &[f64]) -> Result<f64> {
    spec.cost(u, x)
}

pub fn kernel(spec: &KernelSpec, u: &[f64], x: &[f64]) -> Result<f64> {
    spec.eval(u, x)
}

/// Squared RKHS distance `||phi(u) - phi(x)||^2 = 2 - 2 k(u, x)` of a normalized kernel.
pub fn kernel_distance_sq(spec: &KernelSpec, u: &[f64], x: &[f64]) -> Result<f64> {
    Ok(2.0 - 2.0 * spec.eval(u, x)?)
}

pub fn gram(spec: &KernelSpec, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = spec.eval(&points[i], &points[j])?;
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    Ok(g)
}

fn mean_cross(spec: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let mut s = 0.0;
    for p in a {
        for q in b {
            s += spec.eval(p, q)?;
        }
    }
    Ok(s / (a.len() * b.len()) as f64)
}

/// Biased (V-statistic) MMD estimate between two samples.
pub fn mmd(xs: &[Vec<f64>], ys: &[Vec<f64>], spec: &KernelSpec) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Domain("mmd needs two non-empty samples".into()));
    }
    let sq =
        mean_cross(spec, xs, xs)? - 2.0 * mean_cross(spec, xs, ys)? + mean_cross(spec, ys, ys)?;
    Ok(sq.max(0.0).sqrt())
}
