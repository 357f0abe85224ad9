//! Shared data and base-scorer assembly for the commands.

use std::path::Path;

use frappe_core::data::{load_csv, split, subsample_sensitive, synth_two_group, DatasetTable};
use frappe_core::model::{BaseScorer, ModuleKind, ScoreModule};
use frappe_core::util::splitmix64;

use crate::config::{BaseConfig, DataConfig};
use crate::CliError;

pub struct DataBundle {
    pub full: DatasetTable,
    pub train: DatasetTable,
    pub validation: DatasetTable,
    pub test: DatasetTable,
}

impl DataBundle {
    /// Evaluation tables: the test split when a split is configured,
    /// otherwise the whole dataset.
    pub fn eval_table(&self) -> &DatasetTable {
        &self.test
    }
}

/// Assemble the dataset: generate or load, optionally split, and
/// optionally thin the training split's sensitive annotations. The
/// subsample draw is seeded from the data section itself (split seed,
/// else synth seed, else 0) so the dataset is identified by the config
/// alone, independent of the training seed.
pub fn load_data(cfg: &DataConfig) -> Result<DataBundle, CliError> {
    let full = match (&cfg.synth, &cfg.path) {
        (Some(spec), None) => synth_two_group(spec)?,
        (None, Some(path)) => {
            let schema = cfg.schema.as_ref().ok_or_else(|| {
                CliError::Config("data.schema is required with data.path".to_string())
            })?;
            load_csv(path, schema)?
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "data.synth and data.path are mutually exclusive".to_string(),
            ))
        }
        (None, None) => {
            return Err(CliError::Config(
                "one of data.synth or data.path is required".to_string(),
            ))
        }
    };
    let (train, validation, test) = match &cfg.split {
        Some(spec) => {
            let out = split(&full, spec)?;
            (out.train, out.validation, out.test)
        }
        None => (full.clone(), full.clone(), full.clone()),
    };
    let train = match cfg.sensitive_fraction {
        Some(fraction) => {
            let data_seed = cfg
                .split
                .as_ref()
                .map(|s| s.seed)
                .or_else(|| cfg.synth.as_ref().map(|s| s.seed))
                .unwrap_or(0);
            subsample_sensitive(&train, fraction, splitmix64(data_seed ^ 0x5EED))?
        }
        None => train,
    };
    Ok(DataBundle {
        full,
        train,
        validation,
        test,
    })
}

pub fn load_module(path: &Path) -> Result<ScoreModule, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read model {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("model {}: {e}", path.display())))
}

/// Frozen base scorer for frappe-mode commands: a saved module file or the
/// dataset's score column.
pub fn resolve_base(cfg: &Option<BaseConfig>) -> Result<BaseScorer, CliError> {
    match cfg {
        Some(base) if base.score_column => {
            if base.model_file.is_some() {
                return Err(CliError::Config(
                    "base.model_file and base.score_column are mutually exclusive".to_string(),
                ));
            }
            Ok(BaseScorer::ScoreColumn)
        }
        Some(base) => match &base.model_file {
            Some(path) => Ok(BaseScorer::Frozen(load_module(path)?)),
            None => Err(CliError::Config(
                "frappe mode requires base.model_file or base.score_column".to_string(),
            )),
        },
        None => Err(CliError::Config(
            "frappe mode requires a base section".to_string(),
        )),
    }
}

/// The model kind/width a command trains: the base section for
/// in-processing runs, the posthoc section for frappe runs.
pub fn base_kind_width(cfg: &Option<BaseConfig>) -> Result<(ModuleKind, usize), CliError> {
    let base = cfg
        .as_ref()
        .ok_or_else(|| CliError::Config("a base section with base.kind is required".to_string()))?;
    let kind = base
        .kind
        .ok_or_else(|| CliError::Config("base.kind is required".to_string()))?;
    Ok((kind, base.width.unwrap_or_else(|| kind.default_width())))
}
