//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use arks_core::models::{LossKind, ModelSpec};
use arks_core::robusteval::AttackConfig;
use arks_core::surrogates::InnerSolverConfig;
use arks_core::trainers::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::data::{RlsSpec, SyntheticSpec, TargetKind};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Train,
    AttackSweep,
    ShiftSweep,
    Certify,
    Rls,
    Selftest,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Separate test file; without it the last `test_fraction` of `csv` is held out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Standardize features with statistics of the training split.
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    /// `x -> (1 + level) x`
    Scale,
    /// `x -> x + level * Uniform(-1, 1)`
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub kind: ShiftKind,
    pub levels: Vec<f64>,
}

/// Picks the ARKS bandwidth once, on a dedicated data stream, before the seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub sigmas: Vec<f64>,
    /// Data stream used only for tuning.
    pub seed: u64,
    /// Share of the tuning training set held out for validation.
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    /// Shift budget reported in the certificate; defaults to the cost of the check displacement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Uniform displacement scale used for the empirical check.
    pub shift: f64,
    pub inner: InnerSolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deltas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tune: Option<TuneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certify: Option<CertifyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rls: Option<RlsSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<TrainConfig>,
}

/// Short run label, e.g. `erm` or `arks-s0.5`.
pub fn method_label(cfg: &TrainConfig) -> String {
    match &cfg.method {
        Method::Arks { kernel } => format!("arks-s{}", kernel.sigma),
        Method::Wrm { y, .. } => format!("wrm-y{y}"),
        Method::PgdAt { delta, .. } => format!("pgd-at-d{delta}"),
        m => m.name().to_string(),
    }
}

fn need<'a, T>(v: &'a Option<T>, what: &str, kind: Kind) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::Config(format!("{kind:?} experiments need a [{what}] section")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Parses and validates; relative data paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(d), Some(dir)) = (cfg.data.as_mut(), path.parent()) {
            for p in [&mut d.csv, &mut d.test_csv].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list must not be empty".into()));
        }
        if self.kind == Kind::Selftest {
            return Ok(());
        }
        if self.methods.is_empty() {
            return Err(CliError::Config(
                "at least one [[methods]] entry is required".into(),
            ));
        }
        for m in &self.methods {
            m.validate()?;
        }
        let mut labels: Vec<String> = self.methods.iter().map(method_label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config(format!(
                "duplicate method labels in {labels:?}"
            )));
        }
        if self.kind == Kind::Rls {
            need(&self.rls, "rls", self.kind)?.validate()?;
            need(&self.shift, "shift", self.kind)?;
            return Ok(());
        }
        let data = need(&self.data, "data", self.kind)?;
        match (&data.csv, &data.synthetic) {
            (Some(p), None) => {
                if data.target.is_none() {
                    return Err(CliError::Config("csv data needs `target`".into()));
                }
                for p in std::iter::once(p).chain(&data.test_csv) {
                    if !p.exists() {
                        return Err(CliError::Config(format!(
                            "data file {} does not exist",
                            p.display()
                        )));
                    }
                }
                if data.test_csv.is_none()
                    && !(data.test_fraction > 0.0 && data.test_fraction < 1.0)
                {
                    return Err(CliError::Config("test_fraction must lie in (0, 1)".into()));
                }
            }
            (None, Some(s)) => s.validate()?,
            _ => {
                return Err(CliError::Config(
                    "exactly one of data.csv and data.synthetic must be set".into(),
                ))
            }
        }
        let model = need(&self.model, "model", self.kind)?;
        model.validate()?;
        need(&self.loss, "loss", self.kind)?;
        match self.kind {
            Kind::AttackSweep => {
                let a = need(&self.attack, "attack", self.kind)?;
                a.validate()?;
                if self.deltas.is_empty() {
                    return Err(CliError::Config(
                        "attack sweeps need a non-empty `deltas` list".into(),
                    ));
                }
                if a.mode == arks_core::robusteval::AttackMode::BlackBox
                    && !self.methods.iter().any(|m| m.method == Method::Erm)
                {
                    return Err(CliError::Config(
                        "black-box sweeps attack the erm model; add an erm method".into(),
                    ));
                }
            }
            Kind::ShiftSweep => {
                need(&self.shift, "shift", self.kind)?;
            }
            Kind::Certify => {
                let c = need(&self.certify, "certify", self.kind)?;
                c.inner.validate()?;
                if !self
                    .methods
                    .iter()
                    .any(|m| matches!(m.method, Method::Arks { .. }))
                {
                    return Err(CliError::Config("certify needs an arks method".into()));
                }
            }
            _ => {}
        }
        if let Some(t) = &self.tune {
            if t.sigmas.is_empty() || t.sigmas.iter().any(|s| !(*s > 0.0)) {
                return Err(CliError::Config(
                    "tune.sigmas must be positive and non-empty".into(),
                ));
            }
            if !(t.validation_fraction > 0.0 && t.validation_fraction < 1.0) {
                return Err(CliError::Config(
                    "tune.validation_fraction must lie in (0, 1)".into(),
                ));
            }
            if data.synthetic.is_none() {
                return Err(CliError::Config("tuning needs synthetic data".into()));
            }
            if self.seeds.contains(&t.seed) {
                return Err(CliError::Config(
                    "tune.seed must differ from the run seeds".into(),
                ));
            }
            let arks = self
                .methods
                .iter()
                .filter(|m| matches!(m.method, Method::Arks { .. }))
                .count();
            if arks != 1 {
                return Err(CliError::Config(format!(
                    "tuning needs exactly one arks method, found {arks}"
                )));
            }
        }
        Ok(())
    }
}
