//! Built-in invariant checks, runnable on any install with `arks selftest`.

use arks_core::kernels::{CostSpec, KernelSpec};
use arks_core::models::{Activation, LossKind, Model, ModelSpec, Sample, Target};
use arks_core::robusteval::{attack, certificate_check, within_budget, AttackConfig, SupMethod};
use arks_core::seed;
use arks_core::surrogates::{
    c_transform, grid_1d, grid_maximize_1d, k_transform, k_transform_log, k_transform_product,
    sigma_star, worst_case_sup, Domain, FnLoss, InnerSolverConfig,
};
use arks_core::tape::finite_diff_grad;
use arks_core::trainers::{train, Method, TrainConfig};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// First failure, if any.
    pub detail: Option<String>,
}

impl CheckResult {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

struct Tally {
    name: &'static str,
    passed: usize,
    total: usize,
    detail: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            passed: 0,
            total: 0,
            detail: None,
        }
    }

    fn check(&mut self, ok: bool, why: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else if self.detail.is_none() {
            self.detail = Some(why());
        }
    }

    fn result<E: std::fmt::Display>(mut self, r: std::result::Result<(), E>) -> CheckResult {
        if let Err(e) = r {
            self.total += 1;
            self.detail.get_or_insert_with(|| e.to_string());
        }
        CheckResult {
            name: self.name,
            passed: self.passed,
            total: self.total,
            detail: self.detail,
        }
    }
}

type R = arks_core::Result<()>;

/// `a + b u + c u^2`, positive when `4ac > b^2`.
fn quad(a: f64, b: f64, c: f64) -> FnLoss<impl Fn(&[f64]) -> (f64, Vec<f64>) + Copy> {
    FnLoss(move |u: &[f64]| (a + b * u[0] + c * u[0] * u[0], vec![b + 2.0 * c * u[0]]))
}

fn majorants(t: &mut Tally) -> R {
    let mut rng = seed::rng(1);
    for _ in 0..50 {
        let (c, b): (f64, f64) = (rng.random_range(0.1..1.0), rng.random_range(-1.0..1.0));
        let a = b * b / (4.0 * c) + rng.random_range(0.1..1.0);
        let x: f64 = rng.random_range(-1.0..1.0);
        let sigma = rng.random_range(0.05..3.0);
        let l = quad(a, b, c);
        let lx = a + b * x + c * x * x;
        let cfg = InnerSolverConfig::new(0.05).bounds(vec![[-3.0, 3.0]]);
        let k = k_transform(&l, &[x], &KernelSpec::gaussian(sigma)?, &cfg)?.value;
        let m = c_transform(&l, &[x], c + 1.0, CostSpec::SqL2, &cfg)?.value;
        t.check(k >= lx - 1e-12 && m >= lx - 1e-12, || {
            format!("l({x}) = {lx}, k {k}, c {m}")
        });
    }
    Ok(())
}

fn log_path(t: &mut Tally) -> R {
    let mut rng = seed::rng(2);
    for _ in 0..20 {
        let (c, b): (f64, f64) = (rng.random_range(0.1..1.0), rng.random_range(-1.0..1.0));
        let a = b * b / (4.0 * c) + rng.random_range(0.5..2.0);
        let x: f64 = rng.random_range(-1.0..1.0);
        let k = KernelSpec::gaussian(rng.random_range(0.05..0.5))?;
        let cfg = InnerSolverConfig::new(0.01).steps(4000);
        let p = k_transform_product(&quad(a, b, c), &[x], &k, &cfg)?.value;
        let q = k_transform_log(&quad(a, b, c), &[x], &k, &cfg)?.value;
        t.check((p - q).abs() <= 1e-6 * q, || {
            format!("product {p} vs log {q}")
        });
    }
    Ok(())
}

fn closed_forms(t: &mut Tally) -> R {
    let sq = FnLoss(|u: &[f64]| (u[0] * u[0], vec![2.0 * u[0]]));
    let r = c_transform(
        &sq,
        &[1.0],
        2.0,
        CostSpec::SqL2,
        &InnerSolverConfig::new(0.05).steps(2000),
    )?;
    t.check(
        (r.value - 2.0).abs() < 1e-6 && (r.maximizer[0] - 2.0).abs() < 1e-4,
        || format!("moreau value {} at {}", r.value, r.maximizer[0]),
    );
    let y1 = c_transform(
        &sq,
        &[1.0],
        1.0,
        CostSpec::SqL2,
        &InnerSolverConfig::new(0.05),
    );
    t.check(y1.is_err(), || "y = 1 did not report divergence".into());
    let s = sigma_star(1.0, 1.0, 2.0)?;
    t.check(s == 1.0, || format!("sigma* = {s}, expected 1"));
    Ok(())
}

fn sandwich(t: &mut Tally) -> R {
    let l = quad(1e-3, 0.0, 1.0);
    let data = [-1.0, 0.0, 1.0];
    let erm = data.iter().map(|x| x * x + 1e-3).sum::<f64>() / 3.0;
    let ro = worst_case_sup(
        &l,
        &Domain::Box(vec![[-2.0, 2.0]]),
        &InnerSolverConfig::new(0.1),
    )?
    .value;
    let kspec = KernelSpec::gaussian(1.0)?;
    let mut arks = 0.0;
    for &x in &data {
        let f = |u: f64| Ok((u * u + 1e-3f64).ln() - kspec.cost.cost(&[u], &[x])? / kspec.sigma);
        arks += grid_maximize_1d(f, -2.0, 2.0, 0.01)?.1.exp() / 3.0;
    }
    t.check(erm + 0.05 < arks && arks + 0.05 < ro, || {
        format!("erm {erm}, arks {arks}, ro {ro}")
    });
    Ok(())
}

fn gradients(t: &mut Tally) -> R {
    let m = Model::new(
        ModelSpec::mlp(&[3, 6, 4, 3], Activation::Elu),
        LossKind::cross_entropy(1e-3),
    )?;
    let mut rng = seed::rng(3);
    for s in 0..10 {
        let p = m.init_params(s);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = Target::Class(rng.random_range(0..3));
        let e = m.loss_grads(&p, &x, &y)?;
        let fd = finite_diff_grad(|q| m.loss_at(q, &x, &y).unwrap_or(f64::NAN), &p, 1e-6)?;
        let worst = e
            .grad_params
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max);
        t.check(worst < 1e-5, || format!("relative gradient error {worst}"));
    }
    Ok(())
}

fn certificates(t: &mut Tally) -> R {
    let mut rng = seed::rng(4);
    for _ in 0..10 {
        let n = rng.random_range(2..6);
        let c: f64 = rng.random_range(0.2..1.0);
        let l = quad(0.5, 0.0, c);
        let data: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let shifts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-0.5..0.5)]).collect();
        let k = KernelSpec::gaussian(rng.random_range(0.1..1.0))?;
        let chk = certificate_check(
            &[l],
            &data,
            &shifts,
            &k,
            &SupMethod::Grid {
                lo: -4.0,
                hi: 4.0,
                step: 0.01,
            },
        )?;
        t.check(chk.pass, || format!("lhs {} > rhs {}", chk.lhs, chk.rhs));
    }
    Ok(())
}

fn attacks(t: &mut Tally) -> R {
    let m = Model::new(
        ModelSpec::mlp(&[2, 8, 2], Activation::Elu),
        LossKind::cross_entropy(1e-3),
    )?;
    let p = m.init_params(5);
    let mut rng = seed::rng(5);
    for i in 0..200 {
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = Sample::class(x, i % 2);
        let mut cfg = if i % 3 == 0 {
            AttackConfig::fgsm(0.2)
        } else {
            AttackConfig::pgd(0.2)
        };
        cfg.clip = Some([0.0, 1.0]);
        cfg.random_start = i % 2 == 0;
        cfg.seed = i as u64;
        let adv = attack(&m, &p, &s, &cfg)?;
        t.check(within_budget(&s.x, &adv.x, 0.2, cfg.clip), || {
            format!("{:?} -> {:?}", s.x, adv.x)
        });
    }
    Ok(())
}

fn determinism(t: &mut Tally) -> R {
    let m = Model::new(
        ModelSpec::mlp(&[2, 4, 2], Activation::Elu),
        LossKind::cross_entropy(1e-3),
    )?;
    let data: Vec<Sample> = grid_1d(-1.0, 1.0, 0.25)
        .into_iter()
        .map(|v| Sample::class(vec![v, -v], usize::from(v > 0.0)))
        .collect();
    let mut cfg = TrainConfig::new(
        Method::Arks {
            kernel: KernelSpec::gaussian(0.2)?,
        },
        3,
        0.1,
    );
    cfg.inner = InnerSolverConfig::new(0.05).restarts(1, 0.1);
    let a = train(&m, &data, &cfg)?;
    let b = train(&m, &data, &cfg)?;
    t.check(a.objectives == b.objectives && a.params == b.params, || {
        "two identical runs differ".into()
    });
    Ok(())
}

/// Runs every check.
pub fn run_all() -> Vec<CheckResult> {
    let suites: [(&'static str, fn(&mut Tally) -> R); 8] = [
        ("surrogates majorize the loss", majorants),
        ("log and product paths agree", log_path),
        ("closed-form envelopes", closed_forms),
        ("erm < arks < ro sandwich", sandwich),
        ("autodiff matches finite differences", gradients),
        ("certificate holds on grid suprema", certificates),
        ("attacks respect budget and clip box", attacks),
        ("training is deterministic", determinism),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let mut t = Tally::new(name);
            let r = f(&mut t);
            t.result(r)
        })
        .collect()
}
