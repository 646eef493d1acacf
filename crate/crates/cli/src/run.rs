//! Executes an experiment config and writes its result files.

use std::path::Path;

use arks_core::kernels::KernelSpec;
use arks_core::models::{Model, Sample, Target};
use arks_core::robusteval::{
    certificate, certificate_check, evaluate, perturb_set, shift_scale, shift_uniform, sweep,
    AttackConfig, AttackKind, AttackMode, CertificateCheck, CertificateReport, SupMethod,
};
use arks_core::seed;
use arks_core::surrogates::Differentiable;
use arks_core::tensor::Tensor;
use arks_core::trainers::{train, train_rls, Method, TrainConfig, TrainReport};
use serde::Serialize;

use crate::config::{method_label, ExperimentConfig, Kind, ShiftConfig, ShiftKind, TuneConfig};
use crate::data::{load_csv, Standardizer};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub seed: u64,
    pub method: String,
    pub epoch: usize,
    pub objective: f64,
}

/// One evaluation of one trained model. `protocol` is `clean`, an attack
/// such as `black-box-pgd`, or a shift such as `shift-scale`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub seed: u64,
    pub method: String,
    pub protocol: String,
    pub level: f64,
    pub error: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneRecord {
    pub sigma: f64,
    /// Mean validation error over the evaluation levels.
    pub score: f64,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamsRecord {
    pub seed: u64,
    pub method: String,
    pub params: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swa_params: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertRecord {
    pub seed: u64,
    pub method: String,
    pub report: CertificateReport,
    pub check: CertificateCheck,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub train: Vec<TrainRow>,
    pub sweep: Vec<SweepRecord>,
    pub tuning: Vec<TuneRecord>,
    pub params: Vec<ParamsRecord>,
    pub certificates: Vec<CertRecord>,
}

impl RunSummary {
    /// Rows of `sweep` for one method and level, across seeds.
    pub fn rows<'a>(
        &'a self,
        method: &'a str,
        level: f64,
    ) -> impl Iterator<Item = &'a SweepRecord> + 'a {
        self.sweep
            .iter()
            .filter(move |r| r.method == method && r.level == level)
    }
}

/// Runs `cfg` and writes `config-echo.toml` plus the result files into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path, progress: bool) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.kind == Kind::Selftest {
        return Err(CliError::Config(
            "selftest configs are run by the selftest command".into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(&out.join("config-echo.toml"), &cfg.to_toml()?)?;
    let mut summary = RunSummary::default();
    // results gathered before a failure are still written
    let outcome = match cfg.kind {
        Kind::Rls => run_rls(cfg, &mut summary, progress),
        _ => run_supervised(cfg, &mut summary, progress),
    };
    write_rows(&out.join("train.csv"), &summary.train)?;
    write_rows(&out.join("sweep.csv"), &summary.sweep)?;
    if !summary.tuning.is_empty() {
        write_rows(&out.join("tuning.csv"), &summary.tuning)?;
    }
    write(&out.join("params.json"), &json(&summary.params)?)?;
    if !summary.certificates.is_empty() {
        write(&out.join("certificate.json"), &json(&summary.certificates)?)?;
    }
    outcome.map(|()| summary)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

fn say(progress: bool, msg: impl FnOnce() -> String) {
    if progress {
        eprintln!("{}", msg());
    }
}

/// Train and test sets for one run seed.
fn load_data(cfg: &ExperimentConfig, run_seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [data]".into()))?;
    let (mut train, mut test) = match (&d.synthetic, &d.csv) {
        (Some(s), _) => s.generate(run_seed)?,
        (None, Some(p)) => {
            let target = d
                .target
                .ok_or_else(|| CliError::Config("csv data needs `target`".into()))?;
            let mut all = load_csv(p, target)?;
            match &d.test_csv {
                Some(t) => (all, load_csv(t, target)?),
                None => {
                    let n_test = ((all.len() as f64) * d.test_fraction).round() as usize;
                    if n_test == 0 || n_test >= all.len() {
                        return Err(CliError::Config(format!(
                            "test_fraction {} leaves an empty split of {} rows",
                            d.test_fraction,
                            all.len()
                        )));
                    }
                    let test = all.split_off(all.len() - n_test);
                    (all, test)
                }
            }
        }
        (None, None) => return Err(CliError::Config("no data source".into())),
    };
    if d.standardize {
        let s = Standardizer::fit(&train);
        s.apply(&mut train);
        s.apply(&mut test);
    }
    Ok((train, test))
}

fn model(cfg: &ExperimentConfig) -> Result<Model> {
    match (&cfg.model, cfg.loss) {
        (Some(m), Some(l)) => Ok(Model::new(m.clone(), l)?),
        _ => Err(CliError::Config("missing [model] or [loss]".into())),
    }
}

/// Parameters used for evaluation: the SWA average when one was kept.
fn eval_params(r: &TrainReport) -> &[f64] {
    r.swa_params.as_deref().unwrap_or(&r.params)
}

fn record_training(summary: &mut RunSummary, seed: u64, label: &str, r: &TrainReport) {
    for (epoch, &objective) in r.objectives.iter().enumerate() {
        summary.train.push(TrainRow {
            seed,
            method: label.to_string(),
            epoch,
            objective,
        });
    }
    summary.params.push(ParamsRecord {
        seed,
        method: label.to_string(),
        params: r.params.clone(),
        swa_params: r.swa_params.clone(),
    });
}

fn attack_protocol(a: &AttackConfig) -> String {
    let kind = match a.kind {
        AttackKind::Pgd => "pgd",
        AttackKind::Fgsm => "fgsm",
    };
    format!("{}-{kind}", a.mode.name())
}

fn shift_protocol(s: &ShiftConfig) -> &'static str {
    match s.kind {
        ShiftKind::Scale => "shift-scale",
        ShiftKind::Uniform => "shift-uniform",
    }
}

/// Moves every feature vector of `data` by the shift at `level`.
fn shifted(data: &[Sample], s: &ShiftConfig, level: f64, stream: u64) -> Result<Vec<Sample>> {
    let rows: Vec<Vec<f64>> = data.iter().map(|d| d.x.clone()).collect();
    let x = Tensor::from_rows(&rows)?;
    let moved = match s.kind {
        ShiftKind::Scale => shift_scale(&x, level),
        ShiftKind::Uniform => shift_uniform(&x, level, stream)?,
    };
    Ok(moved
        .rows()
        .into_iter()
        .zip(data)
        .map(|(x, d)| Sample { x, y: d.y })
        .collect())
}

/// Error of each trained model at each evaluation level, as `(protocol, level, metrics)` rows.
struct Evaluator<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a Model,
    /// Attack stream, so each run seed gets its own random starts.
    stream: u64,
}

impl Evaluator<'_> {
    /// `out[m][k]` holds the metrics of `trained[m]` at level `k`.
    fn evaluate(
        &self,
        trained: &[(String, Vec<f64>)],
        test: &[Sample],
    ) -> Result<Vec<Vec<(String, f64, f64, f64)>>> {
        let mut out = vec![Vec::new(); trained.len()];
        match self.cfg.kind {
            Kind::AttackSweep => {
                let a = self
                    .cfg
                    .attack
                    .as_ref()
                    .ok_or_else(|| CliError::Config("missing [attack]".into()))?;
                let acfg = AttackConfig {
                    seed: seed::derive(a.seed, &[self.stream]),
                    ..a.clone()
                };
                let proto = attack_protocol(&acfg);
                match acfg.mode {
                    AttackMode::BlackBox => {
                        let source = trained.iter().find(|(l, _)| l == "erm").ok_or_else(|| {
                            CliError::Config("black-box sweeps need an erm method".into())
                        })?;
                        for &delta in &self.cfg.deltas {
                            let adv = perturb_set(
                                self.model,
                                &source.1,
                                test,
                                &AttackConfig {
                                    delta,
                                    ..acfg.clone()
                                },
                            )?;
                            for (m, (_, p)) in trained.iter().enumerate() {
                                let r = evaluate(self.model, p, &adv)?;
                                out[m].push((proto.clone(), delta, r.error, r.mean_loss));
                            }
                        }
                    }
                    AttackMode::WhiteBox => {
                        for (m, (_, p)) in trained.iter().enumerate() {
                            let r = sweep(self.model, p, test, &self.cfg.deltas, &acfg, None)?;
                            for row in r.rows {
                                out[m].push((proto.clone(), row.delta, row.error, row.mean_loss));
                            }
                        }
                    }
                }
            }
            Kind::ShiftSweep => {
                let s = self
                    .cfg
                    .shift
                    .as_ref()
                    .ok_or_else(|| CliError::Config("missing [shift]".into()))?;
                for (k, &level) in s.levels.iter().enumerate() {
                    let moved = shifted(test, s, level, seed::derive(self.stream, &[k as u64]))?;
                    for (m, (_, p)) in trained.iter().enumerate() {
                        let r = evaluate(self.model, p, &moved)?;
                        out[m].push((shift_protocol(s).to_string(), level, r.error, r.mean_loss));
                    }
                }
            }
            _ => {
                for (m, (_, p)) in trained.iter().enumerate() {
                    let r = evaluate(self.model, p, test)?;
                    out[m].push(("clean".to_string(), 0.0, r.error, r.mean_loss));
                }
            }
        }
        Ok(out)
    }
}

fn with_sigma(m: &TrainConfig, sigma: f64) -> Result<TrainConfig> {
    let mut c = m.clone();
    if let Method::Arks { kernel } = &c.method {
        c.method = Method::Arks {
            kernel: KernelSpec::new(kernel.cost, sigma)?,
        };
    }
    Ok(c)
}

/// Picks the ARKS bandwidth on a dedicated data stream, scoring each
/// candidate by its mean validation error over the evaluation levels.
/// Returns the methods with the chosen bandwidth filled in.
fn tune(
    cfg: &ExperimentConfig,
    t: &TuneConfig,
    progress: bool,
) -> Result<(Vec<TrainConfig>, Vec<TuneRecord>)> {
    let model = model(cfg)?;
    let (mut fit, _) = load_data(cfg, t.seed)?;
    let n_val = ((fit.len() as f64) * t.validation_fraction).round() as usize;
    if n_val == 0 || n_val >= fit.len() {
        return Err(CliError::Config(
            "tune.validation_fraction leaves an empty split".into(),
        ));
    }
    let val = fit.split_off(fit.len() - n_val);
    let ev = Evaluator {
        cfg,
        model: &model,
        stream: t.seed,
    };
    let mut trained = Vec::new();
    for m in cfg.methods.iter().filter(|m| m.method == Method::Erm) {
        let c = TrainConfig {
            seed: t.seed,
            ..m.clone()
        };
        trained.push((
            "erm".to_string(),
            eval_params(&train(&model, &fit, &c)?).to_vec(),
        ));
    }
    let arks = cfg
        .methods
        .iter()
        .find(|m| matches!(m.method, Method::Arks { .. }))
        .ok_or_else(|| CliError::Config("tuning needs an arks method".into()))?;
    for &sigma in &t.sigmas {
        let c = TrainConfig {
            seed: t.seed,
            ..with_sigma(arks, sigma)?
        };
        say(progress, || format!("tune: sigma {sigma}"));
        trained.push((
            method_label(&c),
            eval_params(&train(&model, &fit, &c)?).to_vec(),
        ));
    }
    let metrics = ev.evaluate(&trained, &val)?;
    let first = trained.len() - t.sigmas.len();
    let scores: Vec<f64> = metrics[first..]
        .iter()
        .map(|rows| rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64)
        .collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    let records = t
        .sigmas
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(i, (&sigma, &score))| TuneRecord {
            sigma,
            score,
            chosen: i == best,
        })
        .collect();
    let methods = cfg
        .methods
        .iter()
        .map(|m| with_sigma(m, t.sigmas[best]))
        .collect::<Result<_>>()?;
    Ok((methods, records))
}

fn run_supervised(cfg: &ExperimentConfig, summary: &mut RunSummary, progress: bool) -> Result<()> {
    let model = model(cfg)?;
    let methods = match &cfg.tune {
        Some(t) => {
            let (m, records) = tune(cfg, t, progress)?;
            summary.tuning = records;
            m
        }
        None => cfg.methods.clone(),
    };
    for &run_seed in &cfg.seeds {
        let (train_set, test) = load_data(cfg, run_seed)?;
        let mut trained = Vec::with_capacity(methods.len());
        for m in &methods {
            let c = TrainConfig {
                seed: run_seed,
                ..m.clone()
            };
            let label = method_label(&c);
            say(progress, || format!("seed {run_seed}: training {label}"));
            let r = train(&model, &train_set, &c)?;
            record_training(summary, run_seed, &label, &r);
            trained.push((label, eval_params(&r).to_vec()));
        }
        let ev = Evaluator {
            cfg,
            model: &model,
            stream: run_seed,
        };
        for ((label, _), rows) in trained.iter().zip(ev.evaluate(&trained, &test)?) {
            for (protocol, level, error, mean_loss) in rows {
                summary.sweep.push(SweepRecord {
                    seed: run_seed,
                    method: label.clone(),
                    protocol,
                    level,
                    error,
                    mean_loss,
                });
            }
        }
        if cfg.kind == Kind::Certify {
            for ((label, p), m) in trained.iter().zip(&methods) {
                if let Method::Arks { kernel } = &m.method {
                    summary.certificates.push(certify(
                        cfg, &model, p, &train_set, kernel, run_seed, label,
                    )?);
                }
            }
        }
    }
    Ok(())
}

/// Loss of a fixed model on one labelled sample, as a function of its features.
struct SampleLoss<'a> {
    model: &'a Model,
    params: &'a [f64],
    y: Target,
}

impl Differentiable for SampleLoss<'_> {
    fn value_grad(&self, u: &[f64]) -> arks_core::Result<(f64, Vec<f64>)> {
        let e = self.model.loss_grads(self.params, u, &self.y)?;
        Ok((e.value, e.grad_input))
    }
}

fn certify(
    cfg: &ExperimentConfig,
    model: &Model,
    params: &[f64],
    data: &[Sample],
    kernel: &KernelSpec,
    run_seed: u64,
    label: &str,
) -> Result<CertRecord> {
    let c = cfg
        .certify
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [certify]".into()))?;
    let losses: Vec<SampleLoss> = data
        .iter()
        .map(|s| SampleLoss {
            model,
            params,
            y: s.y,
        })
        .collect();
    let points: Vec<Vec<f64>> = data.iter().map(|s| s.x.clone()).collect();
    let zeros = Tensor::zeros(vec![points.len(), points[0].len()]);
    let shifts = shift_uniform(&zeros, c.shift, seed::derive(run_seed, &[0xce47]))?.rows();
    let inner = c.inner.for_stream(&[run_seed]);
    let check = certificate_check(&losses, &points, &shifts, kernel, &SupMethod::Ascent(inner))?;
    let eps = cfg.loss.map_or(0.0, |l| l.eps_pos);
    let report =
        certificate(check.objective, c.rho.unwrap_or(check.rho), kernel.sigma)?.with_eps_pos(eps);
    Ok(CertRecord {
        seed: run_seed,
        method: label.to_string(),
        report,
        check,
    })
}

/// Robust least squares: trains on sampled `xi` and reports the mean loss on
/// test `xi` moved by each shift level.
fn run_rls(cfg: &ExperimentConfig, summary: &mut RunSummary, progress: bool) -> Result<()> {
    let spec = cfg
        .rls
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [rls]".into()))?;
    let shift = cfg
        .shift
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [shift]".into()))?;
    let problem = spec.problem()?;
    for &run_seed in &cfg.seeds {
        let (train_xi, test_xi) = spec.sample(run_seed)?;
        for m in &cfg.methods {
            let c = TrainConfig {
                seed: run_seed,
                ..m.clone()
            };
            let label = method_label(&c);
            say(progress, || format!("seed {run_seed}: training {label}"));
            let r = train_rls(&problem, &train_xi, spec.eps_pos, &c)?;
            record_training(summary, run_seed, &label, &r);
            let p = eval_params(&r);
            let test = Tensor::vector(test_xi.clone());
            for (k, &level) in shift.levels.iter().enumerate() {
                let moved = match shift.kind {
                    ShiftKind::Scale => shift_scale(&test, level),
                    ShiftKind::Uniform => {
                        shift_uniform(&test, level, seed::derive(run_seed, &[k as u64]))?
                    }
                };
                let mut total = 0.0;
                for &xi in moved.data() {
                    total += problem.loss(p, xi)?;
                }
                let mean = total / moved.len() as f64;
                summary.sweep.push(SweepRecord {
                    seed: run_seed,
                    method: label.clone(),
                    protocol: shift_protocol(shift).to_string(),
                    level,
                    error: mean,
                    mean_loss: mean,
                });
            }
        }
    }
    Ok(())
}
