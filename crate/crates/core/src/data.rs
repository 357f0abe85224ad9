//! Tabular datasets with optional per-row sensitive annotations.
//!
//! One table serves all three roles a run needs: prediction rows (features +
//! label), the annotated subset used by fairness penalties (rows whose
//! `sensitive` entry is present), and the rows a post-hoc module is fitted on.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::util::{mean, population_sd, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryClassification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitiveKind {
    Categorical,
    Continuous,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("column {column:?} not found in header")]
    SchemaError { column: String },
    #[error("data row {row}, column {column:?}: cannot interpret {value:?}")]
    ParseError {
        row: usize,
        column: String,
        value: String,
    },
    #[error("{field} has length {got}, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {field} at row {row}")]
    NonFinite { field: &'static str, row: usize },
    #[error("binary label at row {row} must be 0 or 1, got {value}")]
    InvalidLabel { row: usize, value: f64 },
    #[error("categorical sensitive value at row {row} must be a non-negative integer, got {value}")]
    InvalidSensitive { row: usize, value: f64 },
    #[error("split produced an empty {part} part")]
    SplitTooSmall { part: &'static str },
    #[error("fraction must lie in (0, 1], got {value}")]
    InvalidFraction { value: f64 },
    #[error("invalid specification: {reason}")]
    InvalidSpec { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Dense row-major matrix of feature values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if data.len() != rows * cols {
            return Err(DataError::LengthMismatch {
                field: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DataError::LengthMismatch {
                    field: "matrix row",
                    expected: cols,
                    got: r.len(),
                });
            }
            let _ = i;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// A dataset: features, labels, optional sensitive annotations, and
/// optionally a precomputed base-score column.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetTable {
    features: Matrix,
    labels: Vec<f64>,
    sensitive: Vec<Option<f64>>,
    base_scores: Option<Vec<f64>>,
    task: TaskKind,
    sensitive_kind: SensitiveKind,
    feature_names: Vec<String>,
    label_name: String,
    sensitive_name: String,
    base_score_name: String,
}

impl DatasetTable {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        features: Matrix,
        labels: Vec<f64>,
        sensitive: Vec<Option<f64>>,
        base_scores: Option<Vec<f64>>,
        task: TaskKind,
        sensitive_kind: SensitiveKind,
        feature_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let n = features.rows();
        if n == 0 {
            return Err(DataError::EmptyDataset);
        }
        if labels.len() != n {
            return Err(DataError::LengthMismatch {
                field: "labels",
                expected: n,
                got: labels.len(),
            });
        }
        if sensitive.len() != n {
            return Err(DataError::LengthMismatch {
                field: "sensitive",
                expected: n,
                got: sensitive.len(),
            });
        }
        if let Some(b) = &base_scores {
            if b.len() != n {
                return Err(DataError::LengthMismatch {
                    field: "base_scores",
                    expected: n,
                    got: b.len(),
                });
            }
            if let Some(row) = b.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    field: "base_scores",
                    row,
                });
            }
        }
        if feature_names.len() != features.cols() {
            return Err(DataError::LengthMismatch {
                field: "feature_names",
                expected: features.cols(),
                got: feature_names.len(),
            });
        }
        if let Some(pos) = features.data().iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                field: "features",
                row: pos / features.cols().max(1),
            });
        }
        for (row, y) in labels.iter().enumerate() {
            if !y.is_finite() {
                return Err(DataError::NonFinite {
                    field: "labels",
                    row,
                });
            }
            if task == TaskKind::BinaryClassification && *y != 0.0 && *y != 1.0 {
                return Err(DataError::InvalidLabel { row, value: *y });
            }
        }
        for (row, s) in sensitive.iter().enumerate() {
            if let Some(v) = s {
                if !v.is_finite() {
                    return Err(DataError::NonFinite {
                        field: "sensitive",
                        row,
                    });
                }
                if sensitive_kind == SensitiveKind::Categorical
                    && (*v < 0.0 || v.fract() != 0.0)
                {
                    return Err(DataError::InvalidSensitive { row, value: *v });
                }
            }
        }
        Ok(Self {
            features,
            labels,
            sensitive,
            base_scores,
            task,
            sensitive_kind,
            feature_names,
            label_name: "label".to_string(),
            sensitive_name: "sensitive".to_string(),
            base_score_name: "base_score".to_string(),
        })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn sensitive(&self) -> &[Option<f64>] {
        &self.sensitive
    }

    pub fn base_scores(&self) -> Option<&[f64]> {
        self.base_scores.as_deref()
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn sensitive_kind(&self) -> SensitiveKind {
        self.sensitive_kind
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn set_base_scores(&mut self, scores: Vec<f64>) -> Result<(), DataError> {
        if scores.len() != self.n() {
            return Err(DataError::LengthMismatch {
                field: "base_scores",
                expected: self.n(),
                got: scores.len(),
            });
        }
        self.base_scores = Some(scores);
        Ok(())
    }

    pub fn annotated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.sensitive[i].is_some()).collect()
    }

    pub fn n_annotated(&self) -> usize {
        self.sensitive.iter().filter(|s| s.is_some()).count()
    }

    /// New table containing the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<DatasetTable, DataError> {
        if rows.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut data = Vec::with_capacity(rows.len() * self.dim());
        for &i in rows {
            data.extend_from_slice(self.features.row(i));
        }
        let features = Matrix::from_flat(rows.len(), self.dim(), data)?;
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        let sensitive = rows.iter().map(|&i| self.sensitive[i]).collect();
        let base_scores = self
            .base_scores
            .as_ref()
            .map(|b| rows.iter().map(|&i| b[i]).collect());
        let mut out = DatasetTable::new(
            features,
            labels,
            sensitive,
            base_scores,
            self.task,
            self.sensitive_kind,
            self.feature_names.clone(),
        )?;
        out.label_name = self.label_name.clone();
        out.sensitive_name = self.sensitive_name.clone();
        out.base_score_name = self.base_score_name.clone();
        Ok(out)
    }

    /// Column-role schema that round-trips this table through CSV.
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            feature_columns: self.feature_names.clone(),
            label_column: self.label_name.clone(),
            sensitive_column: Some(self.sensitive_name.clone()),
            base_score_column: self.base_scores.as_ref().map(|_| self.base_score_name.clone()),
            task: self.task,
            sensitive_kind: self.sensitive_kind,
        }
    }
}

/// Column-role map for CSV loading.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
    #[serde(default)]
    pub sensitive_column: Option<String>,
    #[serde(default)]
    pub base_score_column: Option<String>,
    pub task: TaskKind,
    #[serde(default = "default_sensitive_kind")]
    pub sensitive_kind: SensitiveKind,
}

fn default_sensitive_kind() -> SensitiveKind {
    SensitiveKind::Categorical
}

/// Load a UTF-8, comma-separated, header-row CSV file. An empty cell in the
/// sensitive column means the row carries no annotation; every other mapped
/// cell must parse as a float.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<DatasetTable, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::SchemaError {
                column: name.to_string(),
            })
    };
    let feat_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_, _>>()?;
    let label_idx = col_index(&schema.label_column)?;
    let sens_idx = schema
        .sensitive_column
        .as_deref()
        .map(col_index)
        .transpose()?;
    let base_idx = schema
        .base_score_column
        .as_deref()
        .map(col_index)
        .transpose()?;

    let parse_cell = |row: usize, column: &str, raw: &str| -> Result<f64, DataError> {
        raw.trim().parse::<f64>().map_err(|_| DataError::ParseError {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut sensitive = Vec::new();
    let mut base_scores = Vec::new();
    for (rec_no, record) in reader.records().enumerate() {
        let record = record?;
        let row = rec_no + 1; // 1-based data row, header excluded
        let feats = feat_idx
            .iter()
            .zip(&schema.feature_columns)
            .map(|(&idx, name)| parse_cell(row, name, record.get(idx).unwrap_or("")))
            .collect::<Result<Vec<f64>, _>>()?;
        let raw_label = record.get(label_idx).unwrap_or("");
        let label = parse_cell(row, &schema.label_column, raw_label)?;
        if schema.task == TaskKind::BinaryClassification && label != 0.0 && label != 1.0 {
            return Err(DataError::ParseError {
                row,
                column: schema.label_column.clone(),
                value: raw_label.to_string(),
            });
        }
        let sens = match sens_idx {
            Some(idx) => {
                let raw = record.get(idx).unwrap_or("");
                if raw.trim().is_empty() {
                    None
                } else {
                    Some(parse_cell(
                        row,
                        schema.sensitive_column.as_deref().unwrap(),
                        raw,
                    )?)
                }
            }
            None => None,
        };
        if let Some(idx) = base_idx {
            base_scores.push(parse_cell(
                row,
                schema.base_score_column.as_deref().unwrap(),
                record.get(idx).unwrap_or(""),
            )?);
        }
        rows.push(feats);
        labels.push(label);
        sensitive.push(sens);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let features = Matrix::from_rows(&rows)?;
    let mut table = DatasetTable::new(
        features,
        labels,
        sensitive,
        base_idx.map(|_| base_scores),
        schema.task,
        schema.sensitive_kind,
        schema.feature_columns.clone(),
    )?;
    table.label_name = schema.label_column.clone();
    if let Some(name) = &schema.sensitive_column {
        table.sensitive_name = name.clone();
    }
    if let Some(name) = &schema.base_score_column {
        table.base_score_name = name.clone();
    }
    Ok(table)
}

/// Write a table as a header-row CSV. Floats are printed in Rust's shortest
/// round-trip form, so `load_csv(write_csv(t))` reproduces `t` exactly; a
/// missing sensitive annotation becomes an empty cell.
pub fn write_csv(table: &DatasetTable, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = table.feature_names.to_vec();
    header.push(table.label_name.clone());
    header.push(table.sensitive_name.clone());
    if table.base_scores.is_some() {
        header.push(table.base_score_name.clone());
    }
    writer.write_record(&header)?;
    for i in 0..table.n() {
        let mut record: Vec<String> = table
            .features
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        record.push(table.labels[i].to_string());
        record.push(match table.sensitive[i] {
            Some(v) => v.to_string(),
            None => String::new(),
        });
        if let Some(b) = &table.base_scores {
            record.push(b[i].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Two-group generative model: a ~ Bernoulli(group_prob); x ~ N(a * shift,
/// noise_scale^2 I); y ~ Bernoulli(sigmoid(w'x + bias + group_label_shift * a)).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    #[serde(default = "default_group_prob")]
    pub group_prob: f64,
    pub group_mean_shift: Vec<f64>,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    pub label_weights: Vec<f64>,
    #[serde(default)]
    pub label_bias: f64,
    #[serde(default)]
    pub group_label_shift: f64,
    pub seed: u64,
}

fn default_group_prob() -> f64 {
    0.5
}

fn default_noise_scale() -> f64 {
    1.0
}

impl SynthSpec {
    fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: &str| {
            Err(DataError::InvalidSpec {
                reason: reason.to_string(),
            })
        };
        if self.n == 0 {
            return fail("n must be positive");
        }
        if !(self.group_prob > 0.0 && self.group_prob < 1.0) {
            return fail("group_prob must lie in (0, 1)");
        }
        if self.noise_scale <= 0.0 || !self.noise_scale.is_finite() {
            return fail("noise_scale must be positive");
        }
        if self.label_weights.len() != self.group_mean_shift.len() {
            return fail("label_weights and group_mean_shift must have equal length");
        }
        if self.label_weights.is_empty() {
            return fail("at least one feature is required");
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.label_weights)
            || !finite(&self.group_mean_shift)
            || !self.label_bias.is_finite()
            || !self.group_label_shift.is_finite()
        {
            return fail("parameters must be finite");
        }
        Ok(())
    }
}

/// Sample a dataset from [`SynthSpec`]. Per row, the draw order is fixed:
/// group coin, then the feature normals, then the label coin.
pub fn synth_two_group(spec: &SynthSpec) -> Result<DatasetTable, DataError> {
    spec.validate()?;
    let d = spec.label_weights.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    let mut sensitive = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let a = if rng.gen::<f64>() < spec.group_prob { 1.0 } else { 0.0 };
        let mut z = spec.label_bias + spec.group_label_shift * a;
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            let x = a * spec.group_mean_shift[j] + spec.noise_scale * noise;
            data.push(x);
            z += spec.label_weights[j] * x;
        }
        let y = if rng.gen::<f64>() < sigmoid(z) { 1.0 } else { 0.0 };
        labels.push(y);
        sensitive.push(Some(a));
    }
    let features = Matrix::from_flat(spec.n, d, data)?;
    let names = (0..d).map(|j| format!("f{j}")).collect();
    DatasetTable::new(
        features,
        labels,
        sensitive,
        None,
        TaskKind::BinaryClassification,
        SensitiveKind::Categorical,
        names,
    )
}

/// Fractions for train/validation/test, all positive and summing to 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.fractions.iter().any(|f| *f <= 0.0) {
            return Err(DataError::InvalidSpec {
                reason: "split fractions must be positive".to_string(),
            });
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSpec {
                reason: format!("split fractions must sum to 1, got {sum}"),
            });
        }
        Ok(())
    }
}

pub struct SplitOut {
    pub train: DatasetTable,
    pub validation: DatasetTable,
    pub test: DatasetTable,
}

/// Disjoint seeded split. Validation and test sizes are the rounded
/// fractions; the remainder goes to train. Row order within each part is
/// ascending by original index.
pub fn split(table: &DatasetTable, spec: &SplitSpec) -> Result<SplitOut, DataError> {
    spec.validate()?;
    let n = table.n();
    let n_val = (n as f64 * spec.fractions[1]).round() as usize;
    let n_test = (n as f64 * spec.fractions[2]).round() as usize;
    if n_val == 0 {
        return Err(DataError::SplitTooSmall { part: "validation" });
    }
    if n_test == 0 {
        return Err(DataError::SplitTooSmall { part: "test" });
    }
    if n_val + n_test >= n {
        return Err(DataError::SplitTooSmall { part: "train" });
    }
    let n_train = n - n_val - n_test;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let mut train_idx: Vec<usize> = idx[..n_train].to_vec();
    let mut val_idx: Vec<usize> = idx[n_train..n_train + n_val].to_vec();
    let mut test_idx: Vec<usize> = idx[n_train + n_val..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitOut {
        train: table.subset(&train_idx)?,
        validation: table.subset(&val_idx)?,
        test: table.subset(&test_idx)?,
    })
}

/// Keep exactly ceil(fraction * n_annotated) uniformly chosen annotated rows;
/// the rest lose their sensitive value. Features, labels, and row order are
/// untouched.
pub fn subsample_sensitive(
    table: &DatasetTable,
    fraction: f64,
    seed: u64,
) -> Result<DatasetTable, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction { value: fraction });
    }
    let mut annotated = table.annotated_indices();
    let keep = (fraction * annotated.len() as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    annotated.shuffle(&mut rng);
    let kept: std::collections::HashSet<usize> = annotated[..keep].iter().copied().collect();
    let mut out = table.clone();
    for i in 0..out.n() {
        if out.sensitive[i].is_some() && !kept.contains(&i) {
            out.sensitive[i] = None;
        }
    }
    Ok(out)
}

/// Per-feature centering/scaling parameters fitted on a training table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StandardizeRecord {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StandardizeRecord {
    /// Apply the recorded transform to another table's features.
    pub fn apply(&self, table: &DatasetTable) -> Result<DatasetTable, DataError> {
        if self.mean.len() != table.dim() {
            return Err(DataError::LengthMismatch {
                field: "standardize record",
                expected: table.dim(),
                got: self.mean.len(),
            });
        }
        let d = table.dim();
        let mut out = table.clone();
        for i in 0..out.n() {
            for j in 0..d {
                let v = (out.features.get(i, j) - self.mean[j]) / self.scale[j];
                out.features.data[i * d + j] = v;
            }
        }
        Ok(out)
    }
}

/// Fit centering/scaling on `train` (population standard deviation; a
/// zero-variance column is centered with scale 1) and apply it to `train`
/// and every table in `others`.
pub fn standardize(
    train: &DatasetTable,
    others: &[&DatasetTable],
) -> Result<(DatasetTable, Vec<DatasetTable>, StandardizeRecord), DataError> {
    let d = train.dim();
    let mut mu = vec![0.0; d];
    let mut sc = vec![1.0; d];
    for j in 0..d {
        let col: Vec<f64> = (0..train.n()).map(|i| train.features.get(i, j)).collect();
        mu[j] = mean(&col);
        let sd = population_sd(&col);
        sc[j] = if sd <= 1e-12 { 1.0 } else { sd };
    }
    let record = StandardizeRecord { mean: mu, scale: sc };
    let train_out = record.apply(train)?;
    let others_out = others
        .iter()
        .map(|t| record.apply(t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((train_out, others_out, record))
}
