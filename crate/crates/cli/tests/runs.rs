use std::path::{Path, PathBuf};
use std::process::Command;

use arks_cli::config::ExperimentConfig;
use arks_cli::data::{load_csv, write_csv, TargetKind};
use arks_cli::run::run;
use arks_core::models::{LossKind, Model, ModelSpec, Sample};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn regression() -> ExperimentConfig {
    ExperimentConfig::load(&configs().join("regression-train.toml")).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn arks(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_arks"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    let data = vec![
        Sample::regression(vec![0.1, -2.5e-7], 3.25),
        Sample::regression(vec![1e10, 0.3], -1.0),
    ];
    write_csv(&p, &data).unwrap();
    assert_eq!(load_csv(&p, TargetKind::Regression).unwrap(), data);
    let classes = vec![Sample::class(vec![0.5], 0), Sample::class(vec![-0.5], 2)];
    write_csv(&p, &classes).unwrap();
    assert_eq!(load_csv(&p, TargetKind::Classification).unwrap(), classes);
}

#[test]
fn zero_epochs_emit_initial_params() {
    let mut cfg = regression();
    for m in &mut cfg.methods {
        m.epochs = 0;
    }
    let dir = tempfile::tempdir().unwrap();
    let s = run(&cfg, dir.path(), false).unwrap();
    let model = Model::new(ModelSpec::linear(3), LossKind::least_squares(1e-3)).unwrap();
    assert_eq!(s.params.len(), 6);
    for p in &s.params {
        assert_eq!(p.params, model.init_params(p.seed));
    }
    assert!(s.train.is_empty());
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = regression();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&cfg, a.path(), false).unwrap();
    run(&cfg, b.path(), false).unwrap();
    for f in ["config-echo.toml", "train.csv", "sweep.csv", "params.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let cfg = regression();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&cfg, a.path(), false).unwrap();
    let echo = ExperimentConfig::load(&a.path().join("config-echo.toml")).unwrap();
    assert_eq!(echo, cfg);
    run(&echo, b.path(), false).unwrap();
    for f in ["config-echo.toml", "train.csv", "sweep.csv", "params.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn sweep_rows_cover_every_level() {
    let cfg = ExperimentConfig::load(&configs().join("moons-shift.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = run(&cfg, dir.path(), false).unwrap();
    assert_eq!(s.sweep.len(), 3 * 3 * 4);
    assert!(s
        .sweep
        .iter()
        .all(|r| r.protocol == "shift-uniform" && (0.0..=1.0).contains(&r.error)));
    let text = String::from_utf8(read(&dir.path().join("sweep.csv"))).unwrap();
    assert!(text.starts_with("seed,method,protocol,level,error,mean_loss\n"));
}

#[test]
fn certify_writes_a_passing_check() {
    let cfg = ExperimentConfig::load(&configs().join("moons-certify.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = run(&cfg, dir.path(), false).unwrap();
    assert_eq!(s.certificates.len(), 1);
    let c = &s.certificates[0];
    assert!(c.check.pass, "{:?}", c.check);
    assert_eq!(
        c.report.bound,
        c.report.objective.ln() + c.report.rho / c.report.sigma
    );
    assert!(dir.path().join("certificate.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let good = configs().join("regression-train.toml");
    let r = arks(&["train", "--config", good.to_str().unwrap(), "--out", out]);
    assert_eq!(
        r.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    assert!(Path::new(out).join("train.csv").exists());

    // wrong subcommand for the config kind
    let r = arks(&["rls", "--config", good.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "kind = \"train\"\nseeds = [0]\ntypo = 1\n").unwrap();
    let r = arks(&["train", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(1));

    let r = arks(&[
        "train",
        "--config",
        dir.path().join("missing.toml").to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(r.status.code(), Some(3));

    let text = std::fs::read_to_string(&good).unwrap();
    let csv_cfg = dir.path().join("csv.toml");
    let csv_text = text.replace(
        "synthetic = { kind = \"linear-regression\", n_train = 60, n_test = 40, noise = 0.1, dim = 3 }",
        "csv = \"data.csv\"\ntarget = \"regression\"",
    );
    std::fs::write(&csv_cfg, &csv_text).unwrap();
    std::fs::write(dir.path().join("data.csv"), "a,b,c,y\n1,2,3,4\n1,2,x,4\n").unwrap();
    let r = arks(&["train", "--config", csv_cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 3"));

    let diverge = dir.path().join("diverge.toml");
    std::fs::write(&diverge, text.replace("lr = 0.05", "lr = 1e6")).unwrap();
    let r = arks(&["train", "--config", diverge.to_str().unwrap(), "--out", out]);
    assert_eq!(
        r.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
}

#[test]
fn shipped_configs_validate() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
