//! Fixed-step projected gradient ascent with restarts.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{clip, InnerSolverConfig};
use crate::error::{Error, Result};
use crate::tensor::norm2;

pub(crate) struct Plan<'a> {
    pub steps: usize,
    pub step_size: f64,
    pub bounds: Option<&'a [[f64; 2]]>,
    pub ceiling: Option<f64>,
    /// After the ascent, push along the final gradient with doubling steps to
    /// expose objectives that grow without bound.
    pub probe_unbounded: bool,
}

impl<'a> Plan<'a> {
    pub fn from_config(cfg: &InnerSolverConfig, bounds: Option<&'a [[f64; 2]]>) -> Self {
        Plan {
            steps: cfg.steps,
            step_size: cfg.step_size,
            bounds,
            ceiling: None,
            probe_unbounded: false,
        }
    }

    pub fn with_ceiling(mut self, ceiling: f64) -> Self {
        self.ceiling = Some(ceiling);
        self.probe_unbounded = true;
        self
    }
}

pub(crate) struct Outcome {
    pub value: f64,
    pub u: Vec<f64>,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// `x` followed by `restarts` Gaussian jitters of radius `restart_radius` around it.
pub(crate) fn jittered_starts(
    x: &[f64],
    cfg: &InnerSolverConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(cfg.restarts + 1);
    out.push(x.to_vec());
    for _ in 0..cfg.restarts {
        out.push(
            x.iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + cfg.restart_radius * z
                })
                .collect(),
        );
    }
    out
}

fn checked(v: f64, step: usize, ceiling: Option<f64>) -> Result<f64> {
    if v.is_nan() || v == f64::INFINITY {
        if v == f64::INFINITY && ceiling.is_some() {
            return Err(Error::Divergence {
                step,
                ceiling: ceiling.unwrap_or(f64::INFINITY),
            });
        }
        return Err(Error::NonFinite(format!(
            "objective is {v} at ascent step {step}"
        )));
    }
    if let Some(c) = ceiling {
        if v > c {
            return Err(Error::Divergence { step, ceiling: c });
        }
    }
    Ok(v)
}

/// Maximizes `obj`. `anchors` are evaluated as-is and always belong to the
/// candidate set; each of `starts` seeds one ascent run.
pub(crate) fn maximize<F>(
    mut obj: F,
    anchors: &[Vec<f64>],
    starts: &[Vec<f64>],
    plan: &Plan<'_>,
) -> Result<Outcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut best: Option<Outcome> = None;
    let consider = |cand: Outcome, best: &mut Option<Outcome>| {
        if best.as_ref().is_none_or(|b| cand.value > b.value) {
            *best = Some(cand);
        }
    };

    for a in anchors {
        let (v, _) = obj(a)?;
        let v = checked(v, 0, plan.ceiling)?;
        consider(
            Outcome {
                value: v,
                u: a.clone(),
                trace: vec![v],
                converged: true,
            },
            &mut best,
        );
    }

    let mut best_grad: Option<(Vec<f64>, Vec<f64>)> = None;
    for s in starts {
        let mut u = s.clone();
        clip(&mut u, plan.bounds);
        let (v0, mut g) = obj(&u)?;
        let mut v = checked(v0, 0, plan.ceiling)?;
        let mut trace = Vec::with_capacity(plan.steps + 1);
        trace.push(v);
        let (mut run_best, mut run_u, mut run_g) = (v, u.clone(), g.clone());
        let mut last_change = f64::INFINITY;
        for step in 1..=plan.steps {
            for (ui, gi) in u.iter_mut().zip(&g) {
                *ui += plan.step_size * gi;
            }
            clip(&mut u, plan.bounds);
            let (nv, ng) = obj(&u)?;
            let nv = checked(nv, step, plan.ceiling)?;
            last_change = (nv - v).abs();
            v = nv;
            g = ng;
            trace.push(v);
            if v > run_best {
                run_best = v;
                run_u = u.clone();
                run_g = g.clone();
            }
        }
        let improves = best.as_ref().is_none_or(|b| run_best > b.value);
        if improves {
            best_grad = Some((run_u.clone(), run_g));
        }
        consider(
            Outcome {
                value: run_best,
                u: run_u,
                trace,
                converged: last_change < 1e-9,
            },
            &mut best,
        );
    }

    let mut best = best.ok_or_else(|| Error::Config("no candidate points for ascent".into()))?;

    if plan.probe_unbounded {
        if let Some((u0, g0)) = best_grad.filter(|(u, _)| *u == best.u) {
            probe(&mut obj, &mut best, &u0, &g0, plan)?;
        }
    }
    Ok(best)
}

fn probe<F>(obj: &mut F, best: &mut Outcome, u0: &[f64], g0: &[f64], plan: &Plan<'_>) -> Result<()>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let gn = norm2(g0);
    if !(gn > 1e-9 * (1.0 + best.value.abs())) {
        return Ok(());
    }
    let mut t = plan.step_size;
    let mut prev = best.value;
    let mut prev_u = u0.to_vec();
    for j in 0..128 {
        let mut u: Vec<f64> = u0.iter().zip(g0).map(|(a, g)| a + t * g).collect();
        clip(&mut u, plan.bounds);
        if u == prev_u {
            break;
        }
        let (v, _) = obj(&u)?;
        let v = checked(v, plan.steps + 1 + j, plan.ceiling)?;
        if v <= prev {
            break;
        }
        if v > best.value {
            best.value = v;
            best.u = u.clone();
        }
        prev = v;
        prev_u = u;
        t *= 2.0;
    }
    Ok(())
}
