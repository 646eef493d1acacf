//! Brute-force grid evaluation, used as an independent check on the ascent solvers.

use super::Differentiable;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

/// Evenly spaced points `lo, lo + step, ...` up to and including `hi`.
pub fn grid_1d(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0 && hi >= lo, "grid needs step > 0 and hi >= lo");
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Cartesian product of two 1-d grids.
pub fn grid_2d(a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &p in a {
        for &q in b {
            out.push(vec![p, q]);
        }
    }
    out
}

/// Loss values sampled on a fixed set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSamples {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl GridSamples {
    pub fn new(points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() || points.is_empty() {
            return Err(Error::shape(
                "grid",
                format!("{} points vs {} values", points.len(), values.len()),
            ));
        }
        Ok(GridSamples { points, values })
    }

    pub fn sample<L: Differentiable>(loss: &L, points: Vec<Vec<f64>>) -> Result<Self> {
        let values = points
            .iter()
            .map(|p| loss.value(p))
            .collect::<Result<Vec<_>>>()?;
        GridSamples::new(points, values)
    }

    pub fn sample_1d<L: Differentiable>(loss: &L, grid: &[f64]) -> Result<Self> {
        Self::sample(loss, grid.iter().map(|&u| vec![u]).collect())
    }
}

/// `max_j l(u_j) k(u_j, x)` over the sampled points.
pub fn brute_force_k_transform(grid: &GridSamples, x: &[f64], kspec: &KernelSpec) -> Result<f64> {
    kspec.validate()?;
    let mut best = f64::NEG_INFINITY;
    for (p, &l) in grid.points.iter().zip(&grid.values) {
        best = best.max(l * kspec.eval(p, x)?);
    }
    Ok(best)
}

/// Grid maximization of a 1-d function followed by golden-section refinement
/// inside the two cells around the best grid point. Returns `(argmax, max)`.
pub fn grid_maximize_1d(
    f: impl Fn(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    step: f64,
) -> Result<(f64, f64)> {
    let grid = grid_1d(lo, hi, step);
    let mut vals = Vec::with_capacity(grid.len());
    for &u in &grid {
        let v = f(u)?;
        if v.is_nan() {
            return Err(Error::NonFinite(format!(
                "oracle objective is NaN at u = {u}"
            )));
        }
        vals.push(v);
    }
    let j = vals
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > vals[b] { i } else { b });
    let (mut best_u, mut best_v) = (grid[j], vals[j]);

    let mut a = grid[j.saturating_sub(1)];
    let mut b = grid[(j + 1).min(grid.len() - 1)];
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..100 {
        if (b - a).abs() < 1e-15 * (1.0 + best_u.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    for (u, v) in [(c, fc), (d, fd)] {
        if v > best_v {
            best_u = u;
            best_v = v;
        }
    }
    Ok((best_u, best_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogates::FnLoss;

    #[test]
    fn grid_endpoints_included() {
        let g = grid_1d(-5.0, 5.0, 1e-4);
        assert_eq!(g.len(), 100_001);
        assert_eq!(g[0], -5.0);
        assert!((g[g.len() - 1] - 5.0).abs() < 1e-12);
        assert_eq!(grid_2d(&[0.0, 1.0], &[2.0, 3.0, 4.0]).len(), 6);
    }

    #[test]
    fn brute_force_constant_and_wide_kernel() {
        let pts = grid_1d(-2.0, 2.0, 0.01);
        let c = GridSamples::sample_1d(&FnLoss(|_u: &[f64]| (3.0, vec![0.0])), &pts).unwrap();
        let k = KernelSpec::gaussian(0.5).unwrap();
        assert!((brute_force_k_transform(&c, &[0.3], &k).unwrap() - 3.0).abs() < 1e-15);
        let sq =
            GridSamples::sample_1d(&FnLoss(|u: &[f64]| (u[0] * u[0], vec![0.0])), &pts).unwrap();
        let wide = KernelSpec::gaussian(1e8).unwrap();
        assert!((brute_force_k_transform(&sq, &[0.0], &wide).unwrap() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn refinement_finds_interior_max() {
        let (u, v) = grid_maximize_1d(|u| Ok(-(u - 0.123_456_7).powi(2)), -1.0, 1.0, 0.1).unwrap();
        assert!((u - 0.123_456_7).abs() < 1e-7);
        assert!(v > -1e-14);
    }
}
