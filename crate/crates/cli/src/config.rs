//! The JSON run-configuration schema. Unknown keys are rejected everywhere
//! so a typo'd field fails loudly instead of silently using a default.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use frappe_core::data::{CsvSchema, SplitSpec, SynthSpec};
use frappe_core::divergence::{DivergenceSpec, GlmFamily};
use frappe_core::metrics::MetricKey;
use frappe_core::model::ModuleKind;
use frappe_core::penalty::RegularizerSpec;
use frappe_core::train::{
    BatchSpec, EarlyStopping, ObjectiveSpec, Optimizer, PredictionLoss, TrainConfig, TrainMode,
};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub base: Option<BaseConfig>,
    #[serde(default)]
    pub posthoc: Option<PosthocConfig>,
    #[serde(default)]
    pub objective: Option<ObjectiveConfig>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub analyze: Option<AnalyzeConfig>,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
    pub output: OutputConfig,
}

/// Exactly one of `synth` or `path` (the latter with `schema`) selects the
/// dataset; `split` and `sensitive_fraction` post-process it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<CsvSchema>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    /// Keep only this fraction of the training split's sensitive
    /// annotations (the partial-group-labels regime).
    #[serde(default)]
    pub sensitive_fraction: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    #[serde(default)]
    pub kind: Option<ModuleKind>,
    #[serde(default)]
    pub width: Option<usize>,
    /// Frozen base scorer saved by `train-base`.
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    /// Use the dataset's precomputed base-score column instead of a model.
    #[serde(default)]
    pub score_column: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosthocConfig {
    pub kind: ModuleKind,
    #[serde(default)]
    pub width: Option<usize>,
}

impl PosthocConfig {
    pub fn width(&self) -> usize {
        self.width.unwrap_or_else(|| self.kind.default_width())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub mode: TrainMode,
    pub regularizer: RegularizerSpec,
    #[serde(default)]
    pub divergence: Option<DivergenceSpec>,
    #[serde(default)]
    pub prediction_loss: Option<PredictionLoss>,
    /// `train` requires exactly one value; `sweep` uses the whole grid
    /// (default: 8 log-spaced values from 0.1 to 30).
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
}

impl ObjectiveConfig {
    pub fn objective_spec(&self, lambda: f64) -> ObjectiveSpec {
        ObjectiveSpec {
            mode: self.mode,
            lambda,
            regularizer: self.regularizer.clone(),
            divergence: self.divergence.clone(),
            prediction_loss: self.prediction_loss,
        }
    }
}

fn default_epochs() -> usize {
    100
}

fn default_optimizer() -> Optimizer {
    Optimizer::Adam { lr: None }
}

fn default_batch() -> BatchSpec {
    BatchSpec::Full
}

fn default_repeats() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub early_stopping: Option<EarlyStopping>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_batch")]
    pub batch: BatchSpec,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            optimizer: default_optimizer(),
            early_stopping: None,
            seed: 0,
            repeats: default_repeats(),
            batch: default_batch(),
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, master_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            optimizer: self.optimizer,
            batch: self.batch,
            early_stopping: self.early_stopping,
            seed: master_seed,
        }
    }
}

fn default_n_probe() -> usize {
    100
}

fn default_radius() -> f64 {
    2.0
}

fn default_verify_lambda() -> f64 {
    1.0
}

fn default_tolerance() -> f64 {
    1e-8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub family: GlmFamily,
    #[serde(default = "default_verify_lambda")]
    pub lambda: f64,
    #[serde(default = "default_n_probe")]
    pub n_probe: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Falls back to objective.regularizer when absent.
    #[serde(default)]
    pub regularizer: Option<RegularizerSpec>,
    /// Pass/fail threshold on the constant's spread and on
    /// |C_empirical - C_closed_form|.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub model_file: PathBuf,
    pub metrics: Vec<String>,
    /// Add the dataset's base-score column to the model's outputs (for
    /// evaluating a post-hoc module saved by a frappe `train` run).
    #[serde(default)]
    pub with_base_column: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub model_file: PathBuf,
}

fn default_favorable() -> f64 {
    0.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub p_grid: Vec<f64>,
    /// The label emitted when the coin flip overrides the base prediction
    /// (default 0, matching the y=0-favorable convention of the FPR gap).
    #[serde(default = "default_favorable")]
    pub favorable_label: f64,
}

fn default_pareto_metric() -> MetricKey {
    MetricKey::FprGap
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Emit a static SVG scatter of the frontier on `sweep`.
    #[serde(default)]
    pub plot: bool,
    /// Fairness axis for the pareto-filtered CSV and the plot.
    #[serde(default = "default_pareto_metric")]
    pub pareto_metric: MetricKey,
}

pub fn load_config(path: &std::path::Path) -> Result<(RunConfig, serde_json::Value), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_value(value.clone())
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
    Ok((config, value))
}
