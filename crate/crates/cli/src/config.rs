//! Experiment configuration: a versioned JSON document describing one toy
//! task, the methods to compare and the protocol scale.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uqbench::nn::{Activation, DropoutSpec, MlpArchitecture};
use uqbench::models::ModelFamily;
use uqbench::optim::OptimizerKind;
use uqbench::samplers::{extraction_schedule, HmcConfig, InferenceMethod, SgMcmcConfig, TrainConfig};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ToyRegression,
    ToyClassification,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ToyRegression => "toy-regression",
            TaskKind::ToyClassification => "toy-classification",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveOutput {
    None,
    /// Curves of the first repeat of each (method, M).
    #[default]
    First,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_m_values")]
    pub m_values: Vec<usize>,
    /// Divides the SG-MCMC step count.
    #[serde(default = "default_scale_factor")]
    pub scale_factor: usize,
    /// Points per grid axis; 1000 (regression) or 200 (classification).
    #[serde(default)]
    pub grid_resolution: Option<usize>,
    /// Training points; per class for classification. 1000 or 520.
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub reference: ReferenceConfig,
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub curves: CurveOutput,
}

fn default_m_values() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

fn default_scale_factor() -> usize {
    64
}

fn default_hidden() -> Vec<usize> {
    vec![10, 10]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default)]
    pub hmc: HmcConfig,
    /// Training of the MAP estimate the chain starts from.
    #[serde(default = "ensemble_train")]
    pub map_init: TrainConfig,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            hmc: HmcConfig::default(),
            map_init: ensemble_train(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum MethodConfig {
    Ensembling(EnsemblingMethod),
    McDropout(McDropoutMethod),
    Sgld(SgMcmcMethod),
    Sghmc(SgMcmcMethod),
}

impl MethodConfig {
    pub fn kind(&self) -> InferenceMethod {
        match self {
            MethodConfig::Ensembling(_) => InferenceMethod::Ensembling,
            MethodConfig::McDropout(_) => InferenceMethod::McDropout,
            MethodConfig::Sgld(_) => InferenceMethod::Sgld,
            MethodConfig::Sghmc(_) => InferenceMethod::Sghmc,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().as_str()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsemblingMethod {
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default = "ensemble_train")]
    pub train: TrainConfig,
}

fn default_pool() -> usize {
    64
}

fn ensemble_train() -> TrainConfig {
    TrainConfig {
        epochs: 150,
        batch_size: 32,
        optimizer: OptimizerKind::adam(),
        lr: 1e-3,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McDropoutMethod {
    #[serde(default = "default_mc_repeats")]
    pub repeats: usize,
    /// 0.2 (regression) or 0.1 (classification).
    #[serde(default)]
    pub dropout_p: Option<f64>,
    #[serde(default = "mc_dropout_train")]
    pub train: TrainConfig,
}

fn default_mc_repeats() -> usize {
    5
}

fn mc_dropout_train() -> TrainConfig {
    TrainConfig {
        epochs: 300,
        ..ensemble_train()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgMcmcMethod {
    #[serde(default = "default_sg_repeats")]
    pub repeats: usize,
    /// Per-data-point initial step size. SGLD: 0.01 / 0.05, SGHMC: 0.001 /
    /// 0.01 (regression / classification).
    #[serde(default)]
    pub alpha0: Option<f64>,
    /// Trajectory length in epochs before division by `scale_factor`.
    #[serde(default = "default_sg_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_sg_repeats() -> usize {
    6
}

fn default_sg_epochs() -> usize {
    256 * 150
}

fn default_batch() -> usize {
    32
}

fn default_eta() -> f64 {
    0.1
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Validation(format!("config field `{}`: {}", field.into(), reason.into()))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Full-scale protocol: 1024-model ensemble pool, 10 MC-dropout repeats,
    /// full-length SG-MCMC runs and M up to 256.
    pub fn paper_scale(mut self) -> Self {
        self.scale_factor = 1;
        self.m_values = vec![8, 16, 32, 64, 128, 256];
        for m in &mut self.methods {
            match m {
                MethodConfig::Ensembling(e) => e.pool_size = 1024,
                MethodConfig::McDropout(d) => d.repeats = 10,
                MethodConfig::Sgld(_) | MethodConfig::Sghmc(_) => {}
            }
        }
        self
    }

    pub fn grid_resolution(&self) -> usize {
        self.grid_resolution.unwrap_or(match self.task {
            TaskKind::ToyRegression => 1000,
            TaskKind::ToyClassification => 200,
        })
    }

    pub fn train_size(&self) -> usize {
        self.train_size.unwrap_or(match self.task {
            TaskKind::ToyRegression => 1000,
            TaskKind::ToyClassification => 520,
        })
    }

    /// Number of training points.
    pub fn dataset_len(&self) -> usize {
        match self.task {
            TaskKind::ToyRegression => self.train_size(),
            TaskKind::ToyClassification => 2 * self.train_size(),
        }
    }

    pub fn dropout_p(&self, m: &McDropoutMethod) -> f64 {
        m.dropout_p.unwrap_or(match self.task {
            TaskKind::ToyRegression => 0.2,
            TaskKind::ToyClassification => 0.1,
        })
    }

    pub fn alpha0(&self, kind: InferenceMethod, m: &SgMcmcMethod) -> f64 {
        m.alpha0.unwrap_or(match (kind, self.task) {
            (InferenceMethod::Sghmc, TaskKind::ToyRegression) => 0.001,
            (InferenceMethod::Sghmc, TaskKind::ToyClassification) => 0.01,
            (_, TaskKind::ToyRegression) => 0.01,
            (_, TaskKind::ToyClassification) => 0.05,
        })
    }

    /// `T = epochs * ceil(N / batch) / scale_factor`.
    pub fn total_steps(&self, m: &SgMcmcMethod) -> usize {
        m.epochs * self.dataset_len().div_ceil(m.batch_size) / self.scale_factor
    }

    pub fn sg_mcmc_config(&self, kind: InferenceMethod, m: &SgMcmcMethod, num_samples: usize) -> SgMcmcConfig {
        SgMcmcConfig {
            alpha0: self.alpha0(kind, m),
            total_steps: self.total_steps(m),
            batch_size: m.batch_size,
            num_samples,
            eta: m.eta,
            ..SgMcmcConfig::default()
        }
    }

    fn layers(&self) -> Vec<usize> {
        let (input, output) = match self.task {
            TaskKind::ToyRegression => (1, 1),
            TaskKind::ToyClassification => (2, 2),
        };
        let mut layers = vec![input];
        layers.extend(&self.hidden);
        layers.push(output);
        layers
    }

    /// Model family, with a dropout layer after the first hidden layer of
    /// every network when `dropout_p` is given.
    pub fn family(&self, dropout_p: Option<f64>) -> Result<ModelFamily, CliError> {
        let dropout = dropout_p.map(|p| DropoutSpec { hidden_layer: 0, p });
        let arch = MlpArchitecture::new(self.layers(), self.activation, dropout)
            .map_err(|e| invalid("hidden", e.to_string()))?;
        let family = match self.task {
            TaskKind::ToyRegression => ModelFamily::gaussian(arch.clone(), arch),
            TaskKind::ToyClassification => ModelFamily::categorical(arch),
        };
        family.map_err(|e| invalid("hidden", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.m_values.is_empty() {
            return Err(invalid("m_values", "must not be empty"));
        }
        if self.m_values[0] == 0 {
            return Err(invalid("m_values", "every M must be at least 1"));
        }
        if self.m_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("m_values", "must be sorted strictly ascending"));
        }
        if self.scale_factor == 0 {
            return Err(invalid("scale_factor", "must be at least 1"));
        }
        if self.grid_resolution() < 2 {
            return Err(invalid("grid_resolution", "must be at least 2"));
        }
        if self.train_size() == 0 {
            return Err(invalid("train_size", "must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("hidden", "need at least one hidden layer, all of positive width"));
        }
        self.reference
            .hmc
            .validate()
            .map_err(|e| invalid("reference.hmc", e.to_string()))?;
        validate_train(&self.reference.map_init, "reference.map_init")?;
        if self.methods.is_empty() {
            return Err(invalid("methods", "must list at least one method"));
        }
        let mut seen = BTreeSet::new();
        let max_m = *self.m_values.last().unwrap();
        for (i, method) in self.methods.iter().enumerate() {
            let at = |f: &str| format!("methods[{i}].{f}");
            if !seen.insert(method.name()) {
                return Err(invalid(at("method"), format!("`{}` listed twice", method.name())));
            }
            match method {
                MethodConfig::Ensembling(e) => {
                    if e.pool_size < max_m {
                        return Err(invalid(
                            at("pool_size"),
                            format!("pool of {} models cannot supply M = {max_m}; need pool_size >= max(m_values)", e.pool_size),
                        ));
                    }
                    validate_train(&e.train, &at("train"))?;
                }
                MethodConfig::McDropout(d) => {
                    if d.repeats == 0 {
                        return Err(invalid(at("repeats"), "must be at least 1"));
                    }
                    let p = self.dropout_p(d);
                    if !(p > 0.0 && p < 1.0) {
                        return Err(invalid(at("dropout_p"), "must lie in (0, 1)"));
                    }
                    validate_train(&d.train, &at("train"))?;
                }
                MethodConfig::Sgld(s) | MethodConfig::Sghmc(s) => {
                    if s.repeats == 0 {
                        return Err(invalid(at("repeats"), "must be at least 1"));
                    }
                    if s.batch_size == 0 {
                        return Err(invalid(at("batch_size"), "must be at least 1"));
                    }
                    let alpha0 = self.alpha0(method.kind(), s);
                    if !(alpha0 > 0.0) || !alpha0.is_finite() {
                        return Err(invalid(at("alpha0"), "must be positive"));
                    }
                    if !(s.eta > 0.0 && s.eta <= 1.0) {
                        return Err(invalid(at("eta"), "must lie in (0, 1]"));
                    }
                    let t = self.total_steps(s);
                    for &m in &self.m_values {
                        extraction_schedule(t, m).map_err(|_| {
                            invalid(
                                at("epochs"),
                                format!(
                                    "{t} steps (after scale_factor) cannot hold {m} distinct samples in the last quarter of the trajectory"
                                ),
                            )
                        })?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn validate_train(t: &TrainConfig, at: &str) -> Result<(), CliError> {
    if t.epochs == 0 {
        return Err(invalid(format!("{at}.epochs"), "must be at least 1"));
    }
    if t.batch_size == 0 {
        return Err(invalid(format!("{at}.batch_size"), "must be at least 1"));
    }
    if !(t.lr > 0.0) || !t.lr.is_finite() {
        return Err(invalid(format!("{at}.lr"), "must be positive"));
    }
    Ok(())
}
