//! Outer training loops: ERM, ARKS, WRM, PGD adversarial training and
//! worst-case RO, all driven by minibatch SGD.
//!
//! Every robust method follows the same pattern. For each sample in the batch
//! an inner maximizer `u*` is found with the parameters held fixed, then the
//! outer step uses `grad_theta l(theta, u*)` (Danskin). For ARKS the kernel
//! factor `k(u*, xi)` does not depend on `theta` and is left out unless
//! `scale_grad_by_kernel` is set.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{CostSpec, KernelSpec};
use crate::models::{Model, RlsProblem, Sample};
use crate::robusteval::pgd;
use crate::seed;
use crate::surrogates::{
    c_transform, k_transform, worst_case_sup, Differentiable, Domain, InnerSolverConfig,
};

/// A training set seen through the variable the adversary moves.
pub trait Task {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The clean point `xi_i`.
    fn anchor(&self, i: usize) -> Vec<f64>;

    /// `l(theta, u)` for sample `i` with its perturbable part replaced by `u`,
    /// plus gradients in `theta` and in `u`.
    fn eval(&self, params: &[f64], i: usize, u: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>;
}

/// Supervised data where only the features are perturbed.
pub struct Supervised<'a> {
    pub model: &'a Model,
    pub data: &'a [Sample],
}

impl Task for Supervised<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn anchor(&self, i: usize) -> Vec<f64> {
        self.data[i].x.clone()
    }

    fn eval(&self, params: &[f64], i: usize, u: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let e = self.model.loss_grads(params, u, &self.data[i].y)?;
        Ok((e.value, e.grad_params, e.grad_input))
    }
}

/// Robust least squares with the scalar `xi` as the uncertain variable.
pub struct RlsTask<'a> {
    pub problem: &'a RlsProblem,
    pub xis: &'a [f64],
    pub eps_pos: f64,
}

impl Task for RlsTask<'_> {
    fn len(&self) -> usize {
        self.xis.len()
    }

    fn anchor(&self, i: usize) -> Vec<f64> {
        vec![self.xis[i]]
    }

    fn eval(&self, params: &[f64], _i: usize, u: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (v, g, dxi) = self.problem.loss_grads(params, u[0])?;
        Ok((v + self.eps_pos, g, vec![dxi]))
    }
}

struct AtParams<'a, T: Task> {
    task: &'a T,
    params: &'a [f64],
    i: usize,
}

impl<T: Task> Differentiable for AtParams<'_, T> {
    fn value_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, _, gu) = self.task.eval(self.params, self.i, u)?;
        Ok((v, gu))
    }
}

fn default_pgd_steps() -> usize {
    15
}

fn default_pgd_step() -> f64 {
    0.03
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Method {
    Erm,
    Arks {
        kernel: KernelSpec,
    },
    Wrm {
        y: f64,
        cost: CostSpec,
    },
    PgdAt {
        delta: f64,
        #[serde(default)]
        clip: Option<[f64; 2]>,
        #[serde(default = "default_pgd_steps")]
        steps: usize,
        #[serde(default = "default_pgd_step")]
        step_size: f64,
    },
    Ro {
        domain: Domain,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Arks { .. } => "arks",
            Method::Wrm { .. } => "wrm",
            Method::PgdAt { .. } => "pgd-at",
            Method::Ro { .. } => "ro",
        }
    }
}

/// Multiply the step size by `factor` at each listed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Swa {
    pub start_epoch: usize,
}

fn default_batch() -> usize {
    1
}

fn default_inner() -> InnerSolverConfig {
    InnerSolverConfig::new(0.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    pub method: Method,
    #[serde(default = "default_inner")]
    pub inner: InnerSolverConfig,
    #[serde(default)]
    pub swa: Option<Swa>,
    #[serde(default)]
    pub scale_grad_by_kernel: bool,
}

impl TrainConfig {
    pub fn new(method: Method, epochs: usize, lr: f64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 1,
            lr,
            lr_decay: None,
            weight_decay: 0.0,
            seed: 0,
            method,
            inner: default_inner(),
            swa: None,
            scale_grad_by_kernel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if let Some(d) = &self.lr_decay {
            if !(d.factor > 0.0) {
                return Err(Error::Config("lr decay factor must be positive".into()));
            }
        }
        match &self.method {
            Method::Erm => {}
            Method::Arks { kernel } => {
                kernel
                    .validate()
                    .map_err(|e| Error::Config(e.to_string()))?;
                self.inner.validate()?;
            }
            Method::Wrm { y, .. } => {
                if !(*y > 0.0) {
                    return Err(Error::Config(format!("wrm needs y > 0, got {y}")));
                }
                self.inner.validate()?;
            }
            Method::PgdAt {
                delta,
                steps,
                step_size,
                ..
            } => {
                if !(*delta >= 0.0) || *steps == 0 || !(*step_size > 0.0) {
                    return Err(Error::Config(
                        "pgd-at needs delta >= 0, steps >= 1 and step_size > 0".into(),
                    ));
                }
            }
            Method::Ro { domain } => domain.validate()?,
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.lr_decay {
            None => self.lr,
            Some(d) => {
                let n = d.epochs.iter().filter(|&&e| e <= epoch).count();
                self.lr * d.factor.powi(n as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub params: Vec<f64>,
    /// Mean surrogate value over the samples visited in each epoch.
    pub objectives: Vec<f64>,
    /// Seconds per epoch.
    pub epoch_times: Vec<f64>,
    pub swa_params: Option<Vec<f64>>,
    pub seed: u64,
    pub config: TrainConfig,
}

/// Coordinatewise mean of parameter snapshots.
pub fn swa_average(snapshots: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::Domain("no snapshots to average".into()))?;
    let mut acc = vec![0.0; first.len()];
    for s in snapshots {
        if s.len() != acc.len() {
            return Err(Error::shape(
                "swa_average",
                format!("snapshot of length {} vs {}", s.len(), acc.len()),
            ));
        }
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    let n = snapshots.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Surrogate value at sample `i` and the parameter gradient to descend.
pub fn sample_step<T: Task>(
    task: &T,
    params: &[f64],
    i: usize,
    cfg: &TrainConfig,
    inner: &InnerSolverConfig,
) -> Result<(f64, Vec<f64>)> {
    let x = task.anchor(i);
    let at = AtParams { task, params, i };
    let (value, u) = match &cfg.method {
        Method::Erm => {
            let (v, g, _) = task.eval(params, i, &x)?;
            return Ok((v, g));
        }
        Method::Arks { kernel } => {
            let r = k_transform(&at, &x, kernel, inner)?;
            let (_, mut g, _) = task.eval(params, i, &r.maximizer)?;
            if cfg.scale_grad_by_kernel {
                let k = kernel.eval(&r.maximizer, &x)?;
                g.iter_mut().for_each(|v| *v *= k);
            }
            return Ok((r.value, g));
        }
        Method::Wrm { y, cost } => {
            let r = c_transform(&at, &x, *y, *cost, inner)?;
            (r.value, r.maximizer)
        }
        Method::PgdAt {
            delta,
            clip,
            steps,
            step_size,
        } => {
            let u = pgd(
                |u: &[f64]| Ok(task.eval(params, i, u)?.2),
                &x,
                *delta,
                *steps,
                *step_size,
                *clip,
                None,
            )?;
            let (v, g, _) = task.eval(params, i, &u)?;
            return Ok((v, g));
        }
        Method::Ro { domain } => {
            let r = worst_case_sup(&at, domain, inner)?;
            (r.value, r.maximizer)
        }
    };
    let (_, g, _) = task.eval(params, i, &u)?;
    Ok((value, g))
}

/// Minibatch SGD on the configured surrogate, starting from `init`.
pub fn train_task<T: Task>(task: &T, init: Vec<f64>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if task.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let n = task.len();
    let mut params = init;
    let mut objectives = Vec::with_capacity(cfg.epochs);
    let mut epoch_times = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(
            cfg.seed,
            &[0x5u64, epoch as u64],
        )));
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = vec![0.0; params.len()];
            for &i in idx {
                let inner = cfg.inner.for_stream(&[cfg.seed, epoch as u64, i as u64]);
                let (v, g) = sample_step(task, &params, i, cfg, &inner).map_err(|e| match e {
                    Error::NonFinite(reason) => Error::TrainingAborted {
                        epoch,
                        batch,
                        reason: format!("sample {i}: {reason}"),
                        last_params: params.clone(),
                    },
                    e => Error::InSample {
                        epoch,
                        batch,
                        sample: i,
                        source: Box::new(e),
                    },
                })?;
                if g.len() != grad.len() {
                    return Err(Error::shape(
                        "train",
                        format!("gradient length {} vs {} params", g.len(), grad.len()),
                    ));
                }
                total += v;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / idx.len() as f64;
            let next: Vec<f64> = params
                .iter()
                .zip(&grad)
                .map(|(p, g)| p - lr * (g * scale + cfg.weight_decay * p))
                .collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingAborted {
                    epoch,
                    batch,
                    reason: "non-finite parameter update".into(),
                    last_params: params,
                });
            }
            params = next;
        }
        objectives.push(total / n as f64);
        if cfg.swa.as_ref().is_some_and(|s| epoch >= s.start_epoch) {
            snapshots.push(params.clone());
        }
        epoch_times.push(t0.elapsed().as_secs_f64());
    }

    let swa_params = match &cfg.swa {
        Some(_) if !snapshots.is_empty() => Some(swa_average(&snapshots)?),
        _ => None,
    };
    Ok(TrainReport {
        params,
        objectives,
        epoch_times,
        swa_params,
        seed: cfg.seed,
        config: cfg.clone(),
    })
}

/// Trains `model` on `data`, starting from `model.init_params(cfg.seed)`.
pub fn train(model: &Model, data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_task(
        &Supervised { model, data },
        model.init_params(cfg.seed),
        cfg,
    )
}

/// Trains `theta` for the robust least-squares problem from `theta = 0`,
/// treating the sampled `xis` as the training data.
pub fn train_rls(
    problem: &RlsProblem,
    xis: &[f64],
    eps_pos: f64,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let task = RlsTask {
        problem,
        xis,
        eps_pos,
    };
    train_task(&task, vec![0.0; problem.dim()], cfg)
}

/// Mean surrogate value over the whole set at fixed `params`.
pub fn objective<T: Task>(task: &T, params: &[f64], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..task.len() {
        let inner = cfg.inner.for_stream(&[cfg.seed, u64::MAX, i as u64]);
        total += sample_step(task, params, i, cfg, &inner)?.0;
    }
    Ok(total / task.len() as f64)
}
