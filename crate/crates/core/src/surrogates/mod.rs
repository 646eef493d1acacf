//! Majorant surrogates of a loss `l(u)` and the inner solvers that evaluate them.
//!
//! The main construction is the k-transform `l^k(x) = sup_u l(u) k(u, x)`,
//! computed by gradient ascent on `u` started from the data point. Alongside
//! it live the c-transform (Moreau envelope), the kernel-distance envelope,
//! the Pasch-Hausdorff envelope, the worst-case supremum over a domain, the
//! averaged smoothed supremum, and brute-force grid oracles for checking all
//! of them.
//!
//! Every ascent-based surrogate keeps `u = x` in its candidate set, so the
//! returned value is never below `l(x)` no matter how the ascent behaves.

mod ascent;
mod envelopes;
mod oracle;
mod transforms;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use envelopes::{
    idro_regularizer, pasch_hausdorff, pasch_hausdorff_envelope, sigma_star, worst_case_sup, Domain,
};
pub use oracle::{brute_force_k_transform, grid_1d, grid_2d, grid_maximize_1d, GridSamples};
pub use transforms::{
    c_transform, empirical_smoothed_sup, k_transform, k_transform_log, k_transform_product,
    kernel_distance_envelope, log_objective,
};

/// A scalar function of `u` with its gradient.
pub trait Differentiable {
    fn value_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, u: &[f64]) -> Result<f64> {
        Ok(self.value_grad(u)?.0)
    }
}

impl<T: Differentiable + ?Sized> Differentiable for &T {
    fn value_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        (**self).value_grad(u)
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        (**self).value(u)
    }
}

/// Adapts an infallible closure returning `(value, gradient)`.
#[derive(Clone, Copy)]
pub struct FnLoss<F>(pub F);

impl<F> Differentiable for FnLoss<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn value_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.0)(u))
    }
}

fn default_steps() -> usize {
    15
}

fn default_true() -> bool {
    true
}

fn default_ceiling() -> f64 {
    1e12
}

fn default_grid_points() -> usize {
    201
}

/// Settings for the inner maximization over `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSolverConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub restarts: usize,
    #[serde(default)]
    pub restart_radius: f64,
    /// Per-coordinate `[lo, hi]`; a single entry applies to every coordinate.
    #[serde(default)]
    pub bounds: Option<Vec<[f64; 2]>>,
    #[serde(default = "default_true")]
    pub log_scale: bool,
    #[serde(default)]
    pub seed: u64,
    /// Objective values above this are reported as divergence.
    #[serde(default = "default_ceiling")]
    pub ceiling: f64,
    /// Points per axis for grid-based searches.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl InnerSolverConfig {
    pub fn new(step_size: f64) -> Self {
        InnerSolverConfig {
            steps: default_steps(),
            step_size,
            restarts: 0,
            restart_radius: 0.0,
            bounds: None,
            log_scale: true,
            seed: 0,
            ceiling: default_ceiling(),
            grid_points: default_grid_points(),
        }
    }

    pub fn steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn restarts(mut self, restarts: usize, radius: f64) -> Self {
        self.restarts = restarts;
        self.restart_radius = radius;
        self
    }

    pub fn bounds(mut self, bounds: Vec<[f64; 2]>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn log_scale(mut self, on: bool) -> Self {
        self.log_scale = on;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Child config whose restart stream is keyed by `streams` (e.g. epoch and sample index).
    pub fn for_stream(&self, streams: &[u64]) -> Self {
        let mut c = self.clone();
        c.seed = seed::derive(self.seed, streams);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("inner solver needs at least one step".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!(
                "inner step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.restart_radius < 0.0 {
            return Err(Error::Config("restart radius must be >= 0".into()));
        }
        if let Some(b) = &self.bounds {
            if b.iter().any(|[lo, hi]| !(lo <= hi)) {
                return Err(Error::Config(format!(
                    "box bounds need lo <= hi, got {b:?}"
                )));
            }
        }
        Ok(())
    }

    /// Box expanded to `dim` coordinates, if any.
    pub fn box_for(&self, dim: usize) -> Result<Option<Vec<[f64; 2]>>> {
        match &self.bounds {
            None => Ok(None),
            Some(b) if b.len() == dim => Ok(Some(b.clone())),
            Some(b) if b.len() == 1 => Ok(Some(vec![b[0]; dim])),
            Some(b) => Err(Error::Config(format!(
                "box has {} coordinates, point has {dim}",
                b.len()
            ))),
        }
    }
}

/// Outcome of one surrogate evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateResult {
    pub value: f64,
    pub maximizer: Vec<f64>,
    /// Objective after each step of the best ascent run (starting value first).
    pub trace: Vec<f64>,
    /// Last step changed the objective by less than `1e-9`.
    pub converged: bool,
}

pub(crate) fn clip(u: &mut [f64], bounds: Option<&[[f64; 2]]>) {
    if let Some(b) = bounds {
        for (v, [lo, hi]) in u.iter_mut().zip(b) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(InnerSolverConfig::new(0.1).validate().is_ok());
        assert!(InnerSolverConfig::new(0.0).validate().is_err());
        assert!(InnerSolverConfig::new(0.1).steps(0).validate().is_err());
        assert!(InnerSolverConfig::new(0.1)
            .bounds(vec![[1.0, 0.0]])
            .validate()
            .is_err());
    }

    #[test]
    fn box_broadcast() {
        let c = InnerSolverConfig::new(0.1).bounds(vec![[-1.0, 1.0]]);
        assert_eq!(c.box_for(3).unwrap().unwrap().len(), 3);
        let c = InnerSolverConfig::new(0.1).bounds(vec![[-1.0, 1.0], [0.0, 1.0]]);
        assert!(c.box_for(3).is_err());
    }
}
