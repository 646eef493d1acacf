use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ascent::{maximize, Plan};
use super::oracle::grid_1d;
use super::{Differentiable, GridSamples, InnerSolverConfig, SurrogateResult};
use crate::error::{Error, Result};
use crate::seed;

fn sorted_1d(grid: &GridSamples) -> Result<Vec<f64>> {
    let us: Vec<f64> = grid
        .points
        .iter()
        .map(|p| match p.as_slice() {
            [u] => Ok(*u),
            _ => Err(Error::shape("pasch_hausdorff", "grid must be 1-d")),
        })
        .collect::<Result<_>>()?;
    if us.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::shape(
            "pasch_hausdorff",
            "grid must be strictly increasing",
        ));
    }
    Ok(us)
}

fn check_lipschitz(y: f64) -> Result<()> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!(
            "Lipschitz constant y must be positive, got {y}"
        )));
    }
    Ok(())
}

fn rises(edge: f64, inner: f64) -> bool {
    edge > inner + 1e-9 * (1.0 + inner.abs())
}

// A loss leaving the grid with slope above `y` keeps beating the penalty
// beyond the sampled range.
fn check_edges(us: &[f64], l: &[f64], y: f64) -> Result<()> {
    let n = us.len();
    if n < 2 {
        return Ok(());
    }
    if rises(l[0] - y * (us[1] - us[0]), l[1]) {
        return Err(Error::PossiblyUnbounded { boundary: us[0] });
    }
    if rises(l[n - 1] - y * (us[n - 1] - us[n - 2]), l[n - 2]) {
        return Err(Error::PossiblyUnbounded {
            boundary: us[n - 1],
        });
    }
    Ok(())
}

/// Pasch-Hausdorff envelope `max_j { l(u_j) - y |u_j - x| }` on a 1-d grid.
///
/// Fails with [`Error::PossiblyUnbounded`] when the loss leaves either end of
/// the grid steeper than `y`.
pub fn pasch_hausdorff(grid: &GridSamples, x: f64, y: f64) -> Result<f64> {
    check_lipschitz(y)?;
    let us = sorted_1d(grid)?;
    let terms: Vec<f64> = us
        .iter()
        .zip(&grid.values)
        .map(|(u, l)| l - y * (u - x).abs())
        .collect();
    let n = terms.len();
    check_edges(&us, &grid.values, y)?;
    let j = (0..n).fold(0, |b, i| if terms[i] > terms[b] { i } else { b });
    Ok(terms[j])
}

/// The envelope at every grid point at once (two linear sweeps).
pub fn pasch_hausdorff_envelope(grid: &GridSamples, y: f64) -> Result<Vec<f64>> {
    check_lipschitz(y)?;
    let us = sorted_1d(grid)?;
    let l = &grid.values;
    let n = us.len();
    check_edges(&us, l, y)?;
    let mut env = l.clone();
    for i in 1..n {
        env[i] = env[i].max(env[i - 1] - y * (us[i] - us[i - 1]));
    }
    for i in (0..n.saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1] - y * (us[i + 1] - us[i]));
    }
    Ok(env)
}

/// Where the worst case is searched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// Per-coordinate `[lo, hi]`.
    Box(Vec<[f64; 2]>),
    /// An explicit finite set of points.
    Points(Vec<Vec<f64>>),
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Box(b) => b.len(),
            Domain::Points(p) => p.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Domain::Box(b) => {
                if b.is_empty() {
                    return Err(Error::Config("empty box domain".into()));
                }
                if b.iter().any(|[lo, hi]| !lo.is_finite() || !hi.is_finite()) {
                    return Err(Error::Config("worst-case domain must be bounded".into()));
                }
                if b.iter().any(|[lo, hi]| lo > hi) {
                    return Err(Error::Config(format!(
                        "box bounds need lo <= hi, got {b:?}"
                    )));
                }
                Ok(())
            }
            Domain::Points(p) if p.is_empty() => Err(Error::Config("empty point domain".into())),
            Domain::Points(p) => {
                if p.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Config("worst-case domain must be bounded".into()));
                }
                Ok(())
            }
        }
    }
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 || lo == hi {
        return vec![lo, hi];
    }
    let mut g = grid_1d(0.0, (n - 1) as f64, 1.0);
    for v in &mut g {
        *v = lo + (hi - lo) * *v / (n - 1) as f64;
    }
    g
}

/// `sup_{u in domain} l(u)`: dense grid for dimension <= 2, projected ascent
/// with random restarts otherwise.
pub fn worst_case_sup<L: Differentiable>(
    loss: &L,
    domain: &Domain,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    domain.validate()?;
    let points: Vec<Vec<f64>> = match domain {
        Domain::Points(p) => p.clone(),
        Domain::Box(b) if b.len() <= 2 => {
            let axes: Vec<Vec<f64>> = b
                .iter()
                .map(|[lo, hi]| axis(*lo, *hi, cfg.grid_points))
                .collect();
            if axes.len() == 1 {
                axes[0].iter().map(|&u| vec![u]).collect()
            } else {
                super::grid_2d(&axes[0], &axes[1])
            }
        }
        Domain::Box(b) => {
            cfg.validate()?;
            let center: Vec<f64> = b.iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect();
            let mut rng = seed::rng(cfg.seed);
            let mut starts = vec![center.clone()];
            for _ in 0..cfg.restarts {
                use rand::Rng;
                starts.push(
                    b.iter()
                        .map(|[lo, hi]| rng.random_range(*lo..=*hi))
                        .collect(),
                );
            }
            let plan = Plan::from_config(cfg, Some(b.as_slice()));
            let out = maximize(|u: &[f64]| loss.value_grad(u), &[], &starts, &plan)?;
            return Ok(SurrogateResult {
                value: out.value,
                maximizer: out.u,
                trace: out.trace,
                converged: out.converged,
            });
        }
    };
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut trace = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let v = loss.value(p)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss is {v} at {p:?}")));
        }
        trace.push(v);
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(SurrogateResult {
        value: best.0,
        maximizer: points[best.1].clone(),
        trace,
        converged: true,
    })
}

/// Bandwidth below which every stationary point of `u -> l(u) k(u, x)` is a
/// maximum (Gaussian kernel, scalar `u`), given `delta = u* - x`, `l(u*)` and `l''(u*)`.
pub fn sigma_star(delta: f64, l_at_ustar: f64, ddl_at_ustar: f64) -> Result<f64> {
    if delta == 0.0 || !delta.is_finite() {
        return Err(Error::Domain(
            "sigma* is undefined at u* = x (the objective is locally concave there for any small sigma)".into(),
        ));
    }
    if !(l_at_ustar > 0.0) {
        return Err(Error::Domain(format!(
            "loss at u* must be positive, got {l_at_ustar}"
        )));
    }
    if !(ddl_at_ustar > 0.0) {
        return Err(Error::Domain(format!(
            "l''(u*) = {ddl_at_ustar} <= 0: the loss is locally concave, so no bandwidth threshold applies"
        )));
    }
    let d2 = delta * delta;
    Ok(2.0 * d2 / ((1.0 + 4.0 * d2 * ddl_at_ustar / l_at_ustar).sqrt() - 1.0))
}

/// Kernel-interpolant regularizer `sqrt(l^T (K + ridge I)^{-1} l)` via a Cholesky solve.
pub fn idro_regularizer(loss_values: &[f64], gram: &[Vec<f64>], ridge: f64) -> Result<f64> {
    let n = loss_values.len();
    if gram.len() != n || gram.iter().any(|r| r.len() != n) {
        return Err(Error::shape(
            "idro_regularizer",
            format!("gram must be {n} x {n}"),
        ));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Domain(format!("ridge must be >= 0, got {ridge}")));
    }
    if loss_values.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let k = DMatrix::from_fn(n, n, |i, j| gram[i][j] + if i == j { ridge } else { 0.0 });
    let chol = k.cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "gram + {ridge} I is not positive definite; increase the ridge"
        ))
    })?;
    let l = DVector::from_column_slice(loss_values);
    let alpha = chol.solve(&l);
    let q = l.dot(&alpha);
    if q < 0.0 {
        return Err(Error::Numerical(format!(
            "negative quadratic form {q}; increase the ridge"
        )));
    }
    Ok(q.sqrt())
}
