//! Attacks, robustness sweeps, distribution-shift protocols and the
//! log-loss robustness certificate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::models::Sample;
use crate::models::{Model, Target};
use crate::seed;
use crate::surrogates::{grid_maximize_1d, k_transform, Differentiable, InnerSolverConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Pgd,
    Fgsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    /// Perturbations are crafted against a fixed surrogate model.
    BlackBox,
    /// Perturbations are crafted against the model being evaluated.
    WhiteBox,
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::BlackBox => "black-box",
            AttackMode::WhiteBox => "white-box",
        }
    }
}

fn default_steps() -> usize {
    15
}

fn default_step_size() -> f64 {
    0.03
}

fn default_mode() -> AttackMode {
    AttackMode::BlackBox
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity budget.
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub clip: Option<[f64; 2]>,
    #[serde(default = "default_mode")]
    pub mode: AttackMode,
    #[serde(default)]
    pub seed: u64,
    /// Start PGD from a uniform point of the budget box instead of the clean input.
    #[serde(default)]
    pub random_start: bool,
}

impl AttackConfig {
    pub fn pgd(delta: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            delta,
            steps: default_steps(),
            step_size: default_step_size(),
            clip: None,
            mode: default_mode(),
            seed: 0,
            random_start: false,
        }
    }

    pub fn fgsm(delta: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            ..Self::pgd(delta)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!(
                "attack budget must be >= 0, got {}",
                self.delta
            )));
        }
        if self.kind == AttackKind::Pgd && (self.steps == 0 || !(self.step_size > 0.0)) {
            return Err(Error::Config(
                "pgd needs steps >= 1 and step_size > 0".into(),
            ));
        }
        if let Some([lo, hi]) = self.clip {
            if !(lo <= hi) {
                return Err(Error::Config(format!(
                    "clip box needs lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `[v - delta, v + delta]`, pulled in by an ulp where rounding would let
/// `|u - v|` exceed `delta` when computed in floating point.
fn ball(v: f64, delta: f64) -> [f64; 2] {
    let mut lo = v - delta;
    while v - lo > delta {
        lo = lo.next_up();
    }
    let mut hi = v + delta;
    while hi - v > delta {
        hi = hi.next_down();
    }
    [lo, hi]
}

fn budget_box(x: &[f64], delta: f64, clip: Option<[f64; 2]>) -> Result<Vec<[f64; 2]>> {
    x.iter()
        .map(|&v| {
            let [a, b] = ball(v, delta);
            match clip {
                Some([lo, hi]) if v < lo || v > hi => Err(Error::Domain(format!(
                    "clean input {v} lies outside the clip box [{lo}, {hi}]"
                ))),
                Some([lo, hi]) => Ok([a.max(lo), b.min(hi)]),
                None => Ok([a, b]),
            }
        })
        .collect()
}

fn finite_grad(g: Vec<f64>, step: usize) -> Result<Vec<f64>> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "input gradient at attack step {step}"
        )));
    }
    Ok(g)
}

/// Sign-gradient ascent inside `{u : ||u - x||_inf <= delta}` intersected with the clip box.
pub fn pgd<F>(
    mut grad: F,
    x: &[f64],
    delta: f64,
    steps: usize,
    step_size: f64,
    clip: Option<[f64; 2]>,
    start: Option<Vec<f64>>,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let bx = budget_box(x, delta, clip)?;
    let mut u = start.unwrap_or_else(|| x.to_vec());
    for step in 0..steps {
        let g = finite_grad(grad(&u)?, step)?;
        for ((ui, gi), [lo, hi]) in u.iter_mut().zip(&g).zip(&bx) {
            *ui = (*ui + step_size * sign(*gi)).clamp(*lo, *hi);
        }
    }
    Ok(u)
}

/// One signed step of size `delta`, then clipping.
pub fn fgsm<F>(mut grad: F, x: &[f64], delta: f64, clip: Option<[f64; 2]>) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let bx = budget_box(x, delta, clip)?;
    let g = finite_grad(grad(x)?, 0)?;
    Ok(x.iter()
        .zip(&g)
        .zip(&bx)
        .map(|((v, gi), [lo, hi])| (v + delta * sign(*gi)).clamp(*lo, *hi))
        .collect())
}

/// Whether `u` respects the budget around `x` and the clip box.
pub fn within_budget(x: &[f64], u: &[f64], delta: f64, clip: Option<[f64; 2]>) -> bool {
    x.len() == u.len()
        && x.iter().zip(u).all(|(a, b)| {
            (a - b).abs() <= delta && clip.is_none_or(|[lo, hi]| *b >= lo && *b <= hi)
        })
}

/// Perturbs one sample against `(model, params)`; `stream` keys the random start.
pub fn attack_with_stream(
    model: &Model,
    params: &[f64],
    sample: &Sample,
    cfg: &AttackConfig,
    stream: u64,
) -> Result<Sample> {
    cfg.validate()?;
    let grad = |u: &[f64]| Ok(model.loss_grads(params, u, &sample.y)?.grad_input);
    let x = &sample.x;
    let u = match cfg.kind {
        _ if cfg.delta == 0.0 => x.clone(),
        AttackKind::Fgsm => fgsm(grad, x, cfg.delta, cfg.clip)?,
        AttackKind::Pgd => {
            let start = if cfg.random_start {
                let mut rng = seed::rng(seed::derive(cfg.seed, &[stream]));
                let bx = budget_box(x, cfg.delta, cfg.clip)?;
                Some(
                    bx.iter()
                        .map(|[lo, hi]| rng.random_range(*lo..=*hi))
                        .collect(),
                )
            } else {
                None
            };
            pgd(
                grad,
                x,
                cfg.delta,
                cfg.steps,
                cfg.step_size,
                cfg.clip,
                start,
            )?
        }
    };
    if !within_budget(x, &u, cfg.delta, cfg.clip) {
        return Err(Error::Numerical(format!(
            "attack output {u:?} violates the budget around {x:?}"
        )));
    }
    Ok(Sample { x: u, y: sample.y })
}

pub fn attack(
    model: &Model,
    params: &[f64],
    sample: &Sample,
    cfg: &AttackConfig,
) -> Result<Sample> {
    attack_with_stream(model, params, sample, cfg, 0)
}

/// Attacks every sample against `(model, params)`. The result depends only on
/// that model and the seed, so it can be shared between victims.
pub fn perturb_set(
    model: &Model,
    params: &[f64],
    data: &[Sample],
    cfg: &AttackConfig,
) -> Result<Vec<Sample>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            attack_with_stream(model, params, s, cfg, i as u64).map_err(|e| Error::AtSample {
                sample: i,
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// 0/1 error for classification, mean squared error for regression.
    pub error: f64,
    pub mean_loss: f64,
}

pub fn evaluate(model: &Model, params: &[f64], data: &[Sample]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty set".into()));
    }
    let (mut err, mut loss) = (0.0, 0.0);
    for s in data {
        loss += model.loss(params, s)?;
        err += match s.y {
            Target::Class(c) => (model.classify(params, &s.x)? != c) as u8 as f64,
            Target::Value(v) => (model.predict(params, &s.x)?[0] - v).powi(2),
        };
    }
    let n = data.len() as f64;
    Ok(Metrics {
        error: err / n,
        mean_loss: loss / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub seed: u64,
    pub mode: AttackMode,
    pub error: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Error of `(model, params)` on `test` attacked at each budget. Black-box
/// sweeps craft the perturbations on `surrogate`.
pub fn sweep(
    model: &Model,
    params: &[f64],
    test: &[Sample],
    deltas: &[f64],
    cfg: &AttackConfig,
    surrogate: Option<(&Model, &[f64])>,
) -> Result<SweepResult> {
    if test.is_empty() || deltas.is_empty() {
        return Err(Error::Domain(
            "sweep needs test data and at least one budget".into(),
        ));
    }
    let (am, ap) = match cfg.mode {
        AttackMode::WhiteBox => (model, params),
        AttackMode::BlackBox => surrogate
            .ok_or_else(|| Error::Config("black-box sweep needs a surrogate model".into()))?,
    };
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let c = AttackConfig {
            delta,
            ..cfg.clone()
        };
        let adv = perturb_set(am, ap, test, &c)?;
        let m = evaluate(model, params, &adv)?;
        rows.push(SweepRow {
            delta,
            seed: cfg.seed,
            mode: cfg.mode,
            error: m.error,
            mean_loss: m.mean_loss,
        });
    }
    Ok(SweepResult { rows })
}

/// Every entry multiplied by `1 + delta`.
pub fn shift_scale(x: &Tensor, delta: f64) -> Tensor {
    x.map(|v| v * (1.0 + delta))
}

/// Adds i.i.d. `d * Uniform(-1, 1)` noise to every entry.
pub fn shift_uniform(x: &Tensor, d: f64, seed: u64) -> Result<Tensor> {
    if !(d >= 0.0) {
        return Err(Error::Domain(format!("noise scale must be >= 0, got {d}")));
    }
    let mut rng = seed::rng(seed);
    let mut out = x.clone();
    for v in out.data_mut() {
        let z: f64 = rng.random_range(-1.0..=1.0);
        *v += d * z;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub objective: f64,
    pub rho: f64,
    pub sigma: f64,
    /// `ln(objective) + rho / sigma`.
    pub bound: f64,
    /// Positivity offset added to the loss, so bounds from different runs can be compared.
    pub eps_pos: Option<f64>,
}

/// Bound on the worst-case expected log-loss over a transport ball of radius `rho`.
pub fn certificate(objective: f64, rho: f64, sigma: f64) -> Result<CertificateReport> {
    if !(objective > 0.0) {
        return Err(Error::Domain(format!(
            "objective must be positive, got {objective}"
        )));
    }
    if !(rho >= 0.0) {
        return Err(Error::Domain(format!(
            "shift budget must be >= 0, got {rho}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "bandwidth must be positive, got {sigma}"
        )));
    }
    Ok(CertificateReport {
        objective,
        rho,
        sigma,
        bound: objective.ln() + rho / sigma,
        eps_pos: None,
    })
}

impl CertificateReport {
    pub fn with_eps_pos(mut self, eps: f64) -> Self {
        self.eps_pos = Some(eps);
        self
    }
}

/// How the suprema inside the objective are computed.
#[derive(Debug, Clone, PartialEq)]
pub enum SupMethod {
    /// 1-d grid on `[lo, hi]` plus golden-section refinement.
    Grid {
        lo: f64,
        hi: f64,
        step: f64,
    },
    Ascent(InnerSolverConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateCheck {
    /// Mean log-loss over the shifted points.
    pub lhs: f64,
    /// `ln(objective) + rho / sigma`.
    pub rhs: f64,
    pub objective: f64,
    /// Mean cost of moving each point to its shifted copy.
    pub rho: f64,
    pub pass: bool,
}

/// Checks `mean ln l(xi_i + d_i) <= ln(mean l^k(xi_i)) + rho / sigma`, with
/// `rho` the cost of the identity coupling between clean and shifted points.
/// `losses` holds one loss per point, or a single loss shared by all.
pub fn certificate_check<L: Differentiable>(
    losses: &[L],
    data: &[Vec<f64>],
    shifts: &[Vec<f64>],
    kspec: &KernelSpec,
    method: &SupMethod,
) -> Result<CertificateCheck> {
    kspec.validate()?;
    let n = data.len();
    if n == 0 || shifts.len() != n || !(losses.len() == n || losses.len() == 1) {
        return Err(Error::shape(
            "certificate_check",
            format!(
                "{} points, {} shifts, {} losses",
                n,
                shifts.len(),
                losses.len()
            ),
        ));
    }
    let loss = |i: usize| &losses[if losses.len() == 1 { 0 } else { i }];
    let (mut lhs, mut rho, mut obj) = (0.0, 0.0, 0.0);
    for (i, (x, d)) in data.iter().zip(shifts).enumerate() {
        if d.len() != x.len() {
            return Err(Error::shape(
                "certificate_check",
                "shift dimension differs from point",
            ));
        }
        let moved: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + b).collect();
        let lm = loss(i).value(&moved)?;
        if !(lm > 0.0) {
            return Err(Error::Domain(format!("loss must be positive, got {lm}")));
        }
        lhs += lm.ln();
        rho += kspec.cost.cost(x, &moved)?;
        obj += match method {
            SupMethod::Grid { lo, hi, step } => {
                if x.len() != 1 {
                    return Err(Error::Config("grid suprema are 1-d only".into()));
                }
                if moved[0] < *lo || moved[0] > *hi {
                    return Err(Error::Config(format!(
                        "shifted point {} lies outside the grid [{lo}, {hi}]",
                        moved[0]
                    )));
                }
                let f = |u: f64| {
                    let l = loss(i).value(&[u])?;
                    if !(l > 0.0) {
                        return Err(Error::Domain(format!("loss must be positive, got {l}")));
                    }
                    Ok(l.ln() - kspec.cost.cost(&[u], x)? / kspec.sigma)
                };
                grid_maximize_1d(f, *lo, *hi, *step)?.1.exp()
            }
            SupMethod::Ascent(cfg) => {
                k_transform(loss(i), x, kspec, &cfg.for_stream(&[i as u64]))?.value
            }
        };
    }
    let nf = n as f64;
    let (lhs, rho, obj) = (lhs / nf, rho / nf, obj / nf);
    let rhs = certificate(obj, rho, kspec.sigma)?.bound;
    Ok(CertificateCheck {
        lhs,
        rhs,
        objective: obj,
        rho,
        pass: lhs <= rhs + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LossKind, ModelSpec};
    use crate::surrogates::FnLoss;

    fn linear() -> (Model, Vec<f64>) {
        let m = Model::new(ModelSpec::linear(3), LossKind::least_squares(1e-3)).unwrap();
        (m, vec![0.5, -2.0, 0.0, 0.1])
    }

    #[test]
    fn zero_budget_is_identity() {
        let (m, p) = linear();
        let s = Sample::regression(vec![0.2, 0.4, 0.6], 3.0);
        for cfg in [AttackConfig::pgd(0.0), AttackConfig::fgsm(0.0)] {
            assert_eq!(attack(&m, &p, &s, &cfg).unwrap(), s);
        }
    }

    #[test]
    fn fgsm_on_linear_model_follows_weight_signs() {
        let m = Model::new(ModelSpec::linear(3), LossKind::least_squares(1e-3)).unwrap();
        let p = vec![0.5, -2.0, 0.25, 0.0];
        // target far below the prediction: grad_x is a positive multiple of w
        let s = Sample::regression(vec![0.2, 0.4, 0.6], -10.0);
        let out = attack(&m, &p, &s, &AttackConfig::fgsm(0.1)).unwrap();
        let expected: Vec<f64> =
            s.x.iter()
                .zip(&p)
                .map(|(x, w)| x + 0.1 * w.signum())
                .collect();
        for (a, b) in out.x.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pgd_respects_budget_and_clip() {
        let m = Model::new(ModelSpec::logistic(2, 2), LossKind::cross_entropy(1e-3)).unwrap();
        let p = m.init_params(3);
        let mut cfg = AttackConfig::pgd(0.2);
        cfg.clip = Some([0.0, 1.0]);
        cfg.step_size = 0.07;
        for i in 0..50 {
            let x = vec![(i as f64 * 0.13) % 1.0, (i as f64 * 0.29) % 1.0];
            let s = Sample::class(x.clone(), i % 2);
            let out = attack(&m, &p, &s, &cfg).unwrap();
            assert!(within_budget(&x, &out.x, 0.2, Some([0.0, 1.0])));
        }
        let outside = Sample::class(vec![1.5, 0.5], 0);
        assert!(attack(&m, &p, &outside, &cfg).is_err());
    }

    #[test]
    fn shifts() {
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(shift_scale(&x, 0.0), x);
        assert_eq!(shift_scale(&x, 1.0).data(), &[2.0, -4.0, 6.0, 1.0]);
        assert!(shift_scale(&x, -1.0).data().iter().all(|v| *v == 0.0));
        assert_eq!(shift_uniform(&x, 0.0, 1).unwrap(), x);
        let a = shift_uniform(&x, 0.3, 9).unwrap();
        assert_eq!(a, shift_uniform(&x, 0.3, 9).unwrap());
        assert!(a
            .data()
            .iter()
            .zip(x.data())
            .all(|(p, q)| (p - q).abs() <= 0.3));
        assert!(shift_uniform(&x, -0.1, 0).is_err());
    }

    #[test]
    fn certificate_examples() {
        let r = certificate(2.0_f64.exp(), 0.5, 0.25).unwrap();
        assert!((r.bound - 4.0).abs() < 1e-15);
        assert_eq!(certificate(3.0, 0.0, 1.0).unwrap().bound, 3.0_f64.ln());
        assert!(
            certificate(3.0, 0.2, 1.0).unwrap().bound > certificate(3.0, 0.1, 1.0).unwrap().bound
        );
        assert!(
            certificate(3.0, 0.2, 0.5).unwrap().bound > certificate(3.0, 0.2, 1.0).unwrap().bound
        );
        assert!(certificate(0.0, 0.2, 1.0).is_err());
        assert!(certificate(-1.0, 0.2, 1.0).is_err());
    }

    #[test]
    fn certificate_check_examples() {
        let l = [FnLoss(|u: &[f64]| (1.0 + u[0] * u[0], vec![2.0 * u[0]]))];
        let data = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let k = KernelSpec::gaussian(1.0).unwrap();
        let grid = SupMethod::Grid {
            lo: -6.0,
            hi: 6.0,
            step: 0.01,
        };
        let zero = vec![vec![0.0]; 3];
        let c = certificate_check(&l, &data, &zero, &k, &grid).unwrap();
        assert_eq!(c.rho, 0.0);
        assert!(c.pass);
        let shift = vec![vec![0.1]; 3];
        let c = certificate_check(&l, &data, &shift, &k, &grid).unwrap();
        assert!(c.pass, "{c:?}");
        assert!((c.rho - 0.005).abs() < 1e-15);
    }
}
