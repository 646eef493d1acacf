use super::ascent::{jittered_starts, maximize, Plan};
use super::{Differentiable, InnerSolverConfig, SurrogateResult};
use crate::error::{Error, Result};
use crate::kernels::{CostSpec, KernelSpec};
use crate::seed;

fn nonneg(l: f64) -> Result<f64> {
    if l < 0.0 {
        return Err(Error::Domain(format!("loss must be nonnegative, got {l}")));
    }
    Ok(l)
}

fn positive(l: f64) -> Result<f64> {
    if !(l > 0.0) {
        return Err(Error::Domain(format!(
            "log-scale solving needs a strictly positive loss, got {l}"
        )));
    }
    Ok(l)
}

fn check_y(y: f64) -> Result<()> {
    if !(y > 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!(
            "dual variable y must be positive, got {y}"
        )));
    }
    Ok(())
}

/// k-transform `sup_u l(u) k(u, x)`, solved in log scale when `cfg.log_scale` is set.
pub fn k_transform<L: Differentiable>(
    loss: &L,
    x: &[f64],
    kspec: &KernelSpec,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    if cfg.log_scale {
        k_transform_log(loss, x, kspec, cfg)
    } else {
        k_transform_product(loss, x, kspec, cfg)
    }
}

/// k-transform by ascent on the product `l(u) k(u, x)` directly.
pub fn k_transform_product<L: Differentiable>(
    loss: &L,
    x: &[f64],
    kspec: &KernelSpec,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    kspec.validate()?;
    cfg.validate()?;
    let bounds = cfg.box_for(x.len())?;
    let mut rng = seed::rng(cfg.seed);
    let starts = jittered_starts(x, cfg, &mut rng);
    let obj = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, gl) = loss.value_grad(u)?;
        let l = nonneg(l)?;
        let (k, gk) = kspec.eval_grad(u, x)?;
        let g = gl.iter().zip(&gk).map(|(a, b)| a * k + l * b).collect();
        Ok((l * k, g))
    };
    let plan = Plan::from_config(cfg, bounds.as_deref());
    let out = maximize(obj, &[x.to_vec()], &starts, &plan)?;
    Ok(SurrogateResult {
        value: out.value,
        maximizer: out.u,
        trace: out.trace,
        converged: out.converged,
    })
}

/// `ln l(u) - c(u, x) / sigma`, the log of the k-transform objective.
pub fn log_objective<L: Differentiable>(
    loss: &L,
    u: &[f64],
    x: &[f64],
    kspec: &KernelSpec,
) -> Result<f64> {
    let l = positive(loss.value(u)?)?;
    Ok(l.ln() - kspec.cost.cost(u, x)? / kspec.sigma)
}

/// k-transform computed as `exp sup_u { ln l(u) - c(u, x) / sigma }`.
pub fn k_transform_log<L: Differentiable>(
    loss: &L,
    x: &[f64],
    kspec: &KernelSpec,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    kspec.validate()?;
    cfg.validate()?;
    let bounds = cfg.box_for(x.len())?;
    let mut rng = seed::rng(cfg.seed);
    let starts = jittered_starts(x, cfg, &mut rng);
    let inv_sigma = 1.0 / kspec.sigma;
    let obj = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, gl) = loss.value_grad(u)?;
        let l = positive(l)?;
        let c = kspec.cost.cost(u, x)?;
        let gc = kspec.cost.grad_u(u, x)?;
        let g = gl
            .iter()
            .zip(&gc)
            .map(|(a, b)| a / l - b * inv_sigma)
            .collect();
        Ok((l.ln() - c * inv_sigma, g))
    };
    let plan = Plan::from_config(cfg, bounds.as_deref());
    let out = maximize(obj, &[x.to_vec()], &starts, &plan)?;
    Ok(SurrogateResult {
        value: out.value.exp(),
        maximizer: out.u,
        trace: out.trace.into_iter().map(f64::exp).collect(),
        converged: out.converged,
    })
}

/// c-transform (Moreau envelope) `sup_u { l(u) - y c(u, x) }`.
pub fn c_transform<L: Differentiable>(
    loss: &L,
    x: &[f64],
    y: f64,
    cost: CostSpec,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    check_y(y)?;
    cfg.validate()?;
    let bounds = cfg.box_for(x.len())?;
    let mut rng = seed::rng(cfg.seed);
    let starts = jittered_starts(x, cfg, &mut rng);
    let obj = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, gl) = loss.value_grad(u)?;
        let c = cost.cost(u, x)?;
        let gc = cost.grad_u(u, x)?;
        let g = gl.iter().zip(&gc).map(|(a, b)| a - y * b).collect();
        Ok((l - y * c, g))
    };
    let plan = Plan::from_config(cfg, bounds.as_deref()).with_ceiling(cfg.ceiling);
    let out = maximize(obj, &[x.to_vec()], &starts, &plan)?;
    Ok(SurrogateResult {
        value: out.value,
        maximizer: out.u,
        trace: out.trace,
        converged: out.converged,
    })
}

/// Kernel-distance envelope `sup_u { l(u) - (y/2) ||phi(u) - phi(x)||^2 }`,
/// with the RKHS distance written as `2 - 2 k(u, x)`.
pub fn kernel_distance_envelope<L: Differentiable>(
    loss: &L,
    x: &[f64],
    y: f64,
    kspec: &KernelSpec,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    check_y(y)?;
    kspec.validate()?;
    cfg.validate()?;
    let bounds = cfg.box_for(x.len())?;
    let mut rng = seed::rng(cfg.seed);
    let starts = jittered_starts(x, cfg, &mut rng);
    let obj = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, gl) = loss.value_grad(u)?;
        let (k, gk) = kspec.eval_grad(u, x)?;
        let penalty = 0.5 * y * (2.0 - 2.0 * k);
        let g = gl.iter().zip(&gk).map(|(a, b)| a + y * b).collect();
        Ok((l - penalty, g))
    };
    let plan = Plan::from_config(cfg, bounds.as_deref()).with_ceiling(cfg.ceiling);
    let out = maximize(obj, &[x.to_vec()], &starts, &plan)?;
    Ok(SurrogateResult {
        value: out.value,
        maximizer: out.u,
        trace: out.trace,
        converged: out.converged,
    })
}

/// `sup_u (1/N) sum_i k(xi_i, u) l(u)`, with one ascent started at every data point.
pub fn empirical_smoothed_sup<L: Differentiable>(
    loss: &L,
    data: &[Vec<f64>],
    kspec: &KernelSpec,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    if data.is_empty() {
        return Err(Error::Domain("empirical smoothed sup needs data".into()));
    }
    kspec.validate()?;
    cfg.validate()?;
    let dim = data[0].len();
    let bounds = cfg.box_for(dim)?;
    let mut rng = seed::rng(cfg.seed);
    let mut starts = Vec::new();
    for xi in data {
        starts.extend(jittered_starts(xi, cfg, &mut rng));
    }
    let n = data.len() as f64;
    let obj = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, gl) = loss.value_grad(u)?;
        let l = nonneg(l)?;
        let mut kbar = 0.0;
        let mut gk = vec![0.0; u.len()];
        for xi in data {
            let (k, g) = kspec.eval_grad(u, xi)?;
            kbar += k;
            for (a, b) in gk.iter_mut().zip(&g) {
                *a += b;
            }
        }
        kbar /= n;
        for a in &mut gk {
            *a /= n;
        }
        let g = gl.iter().zip(&gk).map(|(a, b)| a * kbar + l * b).collect();
        Ok((l * kbar, g))
    };
    let plan = Plan::from_config(cfg, bounds.as_deref());
    let out = maximize(obj, data, &starts, &plan)?;
    Ok(SurrogateResult {
        value: out.value,
        maximizer: out.u,
        trace: out.trace,
        converged: out.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogates::{brute_force_k_transform, grid_1d, FnLoss, GridSamples};

    fn one_plus_sq() -> FnLoss<impl Fn(&[f64]) -> (f64, Vec<f64>)> {
        FnLoss(|u: &[f64]| (1.0 + u[0] * u[0], vec![2.0 * u[0]]))
    }

    fn constant(c: f64) -> FnLoss<impl Fn(&[f64]) -> (f64, Vec<f64>)> {
        FnLoss(move |u: &[f64]| (c, vec![0.0; u.len()]))
    }

    #[test]
    fn constant_loss_k_transform() {
        let k = KernelSpec::gaussian(0.3).unwrap();
        for log in [true, false] {
            let cfg = InnerSolverConfig::new(0.1).log_scale(log).restarts(3, 0.5);
            let r = k_transform(&constant(3.0), &[0.4, -1.0], &k, &cfg).unwrap();
            assert!((r.value - 3.0).abs() < 1e-15);
            assert_eq!(r.maximizer, vec![0.4, -1.0]);
        }
    }

    #[test]
    fn one_plus_square_matches_grid_oracle() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let grid = GridSamples::sample_1d(&one_plus_sq(), &grid_1d(-5.0, 5.0, 1e-4)).unwrap();
        let oracle = brute_force_k_transform(&grid, &[0.0], &k).unwrap();
        assert!((oracle - 2.0 * (-0.5_f64).exp()).abs() < 1e-8);
        // x = 0 is a stationary point of the objective; a restart is needed to leave it
        let cfg = InnerSolverConfig::new(0.2)
            .steps(300)
            .restarts(2, 0.3)
            .seed(5);
        for log in [true, false] {
            let r = k_transform(&one_plus_sq(), &[0.0], &k, &cfg.clone().log_scale(log)).unwrap();
            assert!(
                (r.value - oracle).abs() < 1e-6,
                "log={log}: {} vs {oracle}",
                r.value
            );
            assert!((r.maximizer[0].abs() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn tiny_bandwidth_recovers_loss() {
        let k = KernelSpec::gaussian(1e-6).unwrap();
        let cfg = InnerSolverConfig::new(1e-7).steps(50);
        let r = k_transform(&one_plus_sq(), &[0.0], &k, &cfg).unwrap();
        assert!((r.value - 1.0).abs() < 1e-3);
        let grid = GridSamples::sample_1d(&one_plus_sq(), &grid_1d(-5.0, 5.0, 1e-4)).unwrap();
        assert!((brute_force_k_transform(&grid, &[0.0], &k).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn log_path_requires_positive_loss() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let zero = constant(0.0);
        let cfg = InnerSolverConfig::new(0.1);
        assert!(matches!(
            k_transform_log(&zero, &[0.0], &k, &cfg),
            Err(Error::Domain(_))
        ));
        assert_eq!(
            k_transform_product(&zero, &[0.0], &k, &cfg).unwrap().value,
            0.0
        );
    }

    #[test]
    fn non_finite_objective_reports_step() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let blowup = FnLoss(|u: &[f64]| {
            if u[0] > 0.5 {
                (f64::NAN, vec![1.0])
            } else {
                (1.0 + u[0], vec![1.0])
            }
        });
        let cfg = InnerSolverConfig::new(0.2).log_scale(false);
        match k_transform(&blowup, &[0.0], &k, &cfg).unwrap_err() {
            Error::NonFinite(msg) => assert!(msg.contains("step")),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn moreau_closed_form() {
        let sq = FnLoss(|u: &[f64]| (u[0] * u[0], vec![2.0 * u[0]]));
        let cfg = InnerSolverConfig::new(0.25).steps(40);
        let r = c_transform(&sq, &[1.0], 2.0, CostSpec::SqL2, &cfg).unwrap();
        // sup_u u^2 - y (u - x)^2 = x^2 y / (y - 1) at u = x y / (y - 1)
        assert!((r.value - 2.0).abs() < 1e-6);
        assert!((r.maximizer[0] - 2.0).abs() < 1e-4);
        let err = c_transform(&sq, &[1.0], 1.0, CostSpec::SqL2, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
        assert!(c_transform(&sq, &[1.0], 0.0, CostSpec::SqL2, &cfg).is_err());
    }

    #[test]
    fn heavy_penalty_pins_moreau_to_loss() {
        let f = FnLoss(|u: &[f64]| (u[0].sin() + 2.0, vec![u[0].cos()]));
        let y = 1e6;
        let cfg = InnerSolverConfig::new(0.1 / y).steps(50);
        let r = c_transform(&f, &[0.7], y, CostSpec::SqL2Half, &cfg).unwrap();
        assert!((r.value - (0.7_f64.sin() + 2.0)).abs() < 1e-6);
    }

    #[test]
    fn kernel_envelope_against_grid() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let y = 10.0;
        let f = one_plus_sq();
        let cfg = InnerSolverConfig::new(0.02)
            .steps(2000)
            .bounds(vec![[-2.0, 2.0]]);
        let r = kernel_distance_envelope(&f, &[0.5], y, &k, &cfg).unwrap();
        let grid = grid_1d(-2.0, 2.0, 1e-4);
        let oracle = grid
            .iter()
            .map(|&u| 1.0 + u * u - y * (1.0 - k.eval(&[u], &[0.5]).unwrap()))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((r.value - oracle).abs() < 1e-4, "{} vs {oracle}", r.value);
        assert!(r.value >= 1.25);
    }

    #[test]
    fn kernel_envelope_small_y_approaches_box_sup() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let cfg = InnerSolverConfig::new(0.5)
            .steps(30)
            .bounds(vec![[-2.0, 2.0]]);
        let r = kernel_distance_envelope(&one_plus_sq(), &[0.5], 1e-9, &k, &cfg).unwrap();
        assert!((r.value - 5.0).abs() < 1e-6);
    }

    #[test]
    fn smoothed_sup_single_point_equals_k_transform() {
        let k = KernelSpec::gaussian(0.8).unwrap();
        let cfg = InnerSolverConfig::new(0.1)
            .steps(100)
            .restarts(2, 0.4)
            .log_scale(false)
            .seed(11);
        let x = vec![0.3];
        let a = empirical_smoothed_sup(&one_plus_sq(), std::slice::from_ref(&x), &k, &cfg).unwrap();
        let b = k_transform(&one_plus_sq(), &x, &k, &cfg).unwrap();
        assert_eq!(a.value, b.value);
        let c = empirical_smoothed_sup(&constant(2.5), &[vec![1.0], vec![1.0]], &k, &cfg).unwrap();
        assert!((c.value - 2.5).abs() < 1e-15);
        assert!(empirical_smoothed_sup(&constant(1.0), &[], &k, &cfg).is_err());
    }
}
