//! Fairness gap metrics, the HGR dependence estimate, Pareto filtering of
//! sweep results, and the post-hoc-module correlation report.
//!
//! Gap metrics look only at rows with a sensitive annotation; predictions
//! passed in are already thresholded labels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, SensitiveKind, TaskKind};
use crate::model::ScoreModule;
use crate::util::observed_categories;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {expected} vs {got}")]
    DimError { expected: usize, got: usize },
    #[error("group cell {cell} is empty")]
    EmptyGroup { cell: String },
    #[error("expected exactly two sensitive categories, found {found}")]
    NotTwoGroups { found: usize },
    #[error("{context}: need at least {needed} rows, got {got}")]
    InsufficientSample {
        context: String,
        needed: usize,
        got: usize,
    },
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

fn check_len(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::DimError {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

fn two_groups(sensitive: &[Option<f64>]) -> Result<[f64; 2], MetricsError> {
    let cats = observed_categories(sensitive);
    if cats.len() != 2 {
        return Err(MetricsError::NotTwoGroups { found: cats.len() });
    }
    Ok([cats[0], cats[1]])
}

/// Misclassification rate among Y=y rows of group a; errors if the cell is empty.
fn cell_error_rate(
    predictions: &[f64],
    labels: &[f64],
    sensitive: &[Option<f64>],
    y: f64,
    a: f64,
) -> Result<f64, MetricsError> {
    let mut n = 0usize;
    let mut wrong = 0usize;
    for i in 0..predictions.len() {
        if labels[i] == y && sensitive[i] == Some(a) {
            n += 1;
            if predictions[i] != labels[i] {
                wrong += 1;
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyGroup {
            cell: format!("Y={y}, A={a}"),
        });
    }
    Ok(wrong as f64 / n as f64)
}

/// |FPR(group 0) - FPR(group 1)| among Y=0 rows.
pub fn fpr_gap(
    predictions: &[f64],
    labels: &[f64],
    sensitive: &[Option<f64>],
) -> Result<f64, MetricsError> {
    check_len(predictions.len(), labels.len())?;
    check_len(predictions.len(), sensitive.len())?;
    let [g0, g1] = two_groups(sensitive)?;
    let f0 = cell_error_rate(predictions, labels, sensitive, 0.0, g0)?;
    let f1 = cell_error_rate(predictions, labels, sensitive, 0.0, g1)?;
    Ok((f0 - f1).abs())
}

/// |TPR gap| and |FPR gap| averaged: mean equalized odds.
pub fn meo(
    predictions: &[f64],
    labels: &[f64],
    sensitive: &[Option<f64>],
) -> Result<f64, MetricsError> {
    check_len(predictions.len(), labels.len())?;
    check_len(predictions.len(), sensitive.len())?;
    let [g0, g1] = two_groups(sensitive)?;
    let fpr = (cell_error_rate(predictions, labels, sensitive, 0.0, g0)?
        - cell_error_rate(predictions, labels, sensitive, 0.0, g1)?)
    .abs();
    let tpr = (cell_error_rate(predictions, labels, sensitive, 1.0, g0)?
        - cell_error_rate(predictions, labels, sensitive, 1.0, g1)?)
    .abs();
    Ok((tpr + fpr) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpAggregate {
    Sum,
    Max,
}

/// Statistical-parity gap over annotated rows: per observed category, the
/// absolute deviation of its positive rate from the overall positive rate,
/// combined by sum (default) or max.
pub fn sp_gap_with(
    predictions: &[f64],
    sensitive: &[Option<f64>],
    aggregate: SpAggregate,
) -> Result<f64, MetricsError> {
    check_len(predictions.len(), sensitive.len())?;
    let annotated: Vec<usize> = (0..predictions.len())
        .filter(|&i| sensitive[i].is_some())
        .collect();
    if annotated.is_empty() {
        return Err(MetricsError::EmptyGroup {
            cell: "annotated rows".to_string(),
        });
    }
    let rate = |idx: &[usize]| {
        idx.iter().filter(|&&i| predictions[i] == 1.0).count() as f64 / idx.len() as f64
    };
    let overall = rate(&annotated);
    let mut total = 0.0;
    let mut worst = 0.0f64;
    for cat in observed_categories(sensitive) {
        let members: Vec<usize> = annotated
            .iter()
            .copied()
            .filter(|&i| sensitive[i] == Some(cat))
            .collect();
        let dev = (rate(&members) - overall).abs();
        total += dev;
        worst = worst.max(dev);
    }
    Ok(match aggregate {
        SpAggregate::Sum => total,
        SpAggregate::Max => worst,
    })
}

pub fn sp_gap(predictions: &[f64], sensitive: &[Option<f64>]) -> Result<f64, MetricsError> {
    sp_gap_with(predictions, sensitive, SpAggregate::Sum)
}

/// Misclassification rate for binary tasks, mean squared error for regression.
pub fn prediction_error(
    predictions: &[f64],
    labels: &[f64],
    task: TaskKind,
) -> Result<f64, MetricsError> {
    check_len(predictions.len(), labels.len())?;
    if predictions.is_empty() {
        return Err(MetricsError::EmptyGroup {
            cell: "all rows".to_string(),
        });
    }
    let n = predictions.len() as f64;
    Ok(match task {
        TaskKind::BinaryClassification => {
            predictions
                .iter()
                .zip(labels)
                .filter(|(p, y)| p != y)
                .count() as f64
                / n
        }
        TaskKind::Regression => {
            predictions
                .iter()
                .zip(labels)
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
                / n
        }
    })
}

/// Quantile bin index per value: floor(bins * rank / n) where rank counts
/// strictly smaller elements, so ties share a bin and any strictly
/// increasing transform leaves the binning unchanged.
fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0usize; n];
    let mut k = 0;
    while k < n {
        let mut end = k;
        while end + 1 < n && values[order[end + 1]] == values[order[k]] {
            end += 1;
        }
        for &i in &order[k..=end] {
            out[i] = (bins * k) / n;
        }
        k = end + 1;
    }
    out
}

/// Second-largest singular value of the margin-normalized joint histogram:
/// Q_ij = P_ij / sqrt(r_i c_j) over cells with nonempty margins. Accepts
/// unnormalized counts. Clamped to [0,1].
pub fn hgr_from_joint(joint: &[Vec<f64>]) -> f64 {
    let total: f64 = joint.iter().flatten().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let rows = joint.len();
    let cols = joint.first().map_or(0, |r| r.len());
    let mut r = vec![0.0; rows];
    let mut c = vec![0.0; cols];
    for (i, row) in joint.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            r[i] += v / total;
            c[j] += v / total;
        }
    }
    let live_r: Vec<usize> = (0..rows).filter(|&i| r[i] > 0.0).collect();
    let live_c: Vec<usize> = (0..cols).filter(|&j| c[j] > 0.0).collect();
    if live_r.len() < 2 || live_c.len() < 2 {
        return 0.0;
    }
    let q = DMatrix::from_fn(live_r.len(), live_c.len(), |a, b| {
        let (i, j) = (live_r[a], live_c[b]);
        joint[i][j] / total / (r[i] * c[j]).sqrt()
    });
    let mut svals: Vec<f64> = q.svd(false, false).singular_values.iter().copied().collect();
    svals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    svals.get(1).copied().unwrap_or(0.0).clamp(0.0, 1.0)
}

/// Histogram-SVD estimate of HGR-infinity dependence between scores and the
/// sensitive attribute, conditioned on the label when labels are given
/// (reporting the max over label values). Quantile binning makes the
/// estimate invariant to strictly increasing transforms of either input.
pub fn hgr_inf(
    scores: &[f64],
    sensitive: &[Option<f64>],
    labels: Option<&[f64]>,
    bins: usize,
) -> Result<f64, MetricsError> {
    check_len(scores.len(), sensitive.len())?;
    if let Some(l) = labels {
        check_len(scores.len(), l.len())?;
    }
    if bins < 2 {
        return Err(MetricsError::InvalidInput(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let annotated: Vec<usize> = (0..scores.len())
        .filter(|&i| sensitive[i].is_some())
        .collect();
    if annotated.is_empty() {
        return Err(MetricsError::EmptyGroup {
            cell: "annotated rows".to_string(),
        });
    }
    let cells: Vec<(String, Vec<usize>)> = match labels {
        None => vec![("all".to_string(), annotated)],
        Some(l) => {
            let mut values: Vec<f64> = annotated.iter().map(|&i| l[i]).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            values.dedup();
            values
                .into_iter()
                .map(|y| {
                    let idx: Vec<usize> =
                        annotated.iter().copied().filter(|&i| l[i] == y).collect();
                    (format!("label {y}"), idx)
                })
                .collect()
        }
    };
    let mut best = 0.0f64;
    for (context, idx) in cells {
        if idx.len() < bins {
            return Err(MetricsError::InsufficientSample {
                context,
                needed: bins,
                got: idx.len(),
            });
        }
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let a: Vec<f64> = idx.iter().map(|&i| sensitive[i].unwrap()).collect();
        let bs = quantile_bins(&s, bins);
        let ba = quantile_bins(&a, bins);
        let mut joint = vec![vec![0.0; bins]; bins];
        for k in 0..idx.len() {
            joint[bs[k]][ba[k]] += 1.0;
        }
        best = best.max(hgr_from_joint(&joint));
    }
    Ok(best)
}

/// One sweep result: a trained run evaluated on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub lambda: f64,
    pub seed: u64,
    pub test_error: f64,
    pub fpr_gap: Option<f64>,
    pub sp_gap: Option<f64>,
    pub meo: Option<f64>,
    pub hgr_inf: Option<f64>,
    pub train_penalty: f64,
    pub epochs_run: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKey {
    TestError,
    FprGap,
    SpGap,
    Meo,
    HgrInf,
    TrainPenalty,
}

impl MetricKey {
    pub fn get(&self, p: &TradeoffPoint) -> Option<f64> {
        match self {
            MetricKey::TestError => Some(p.test_error),
            MetricKey::FprGap => p.fpr_gap,
            MetricKey::SpGap => p.sp_gap,
            MetricKey::Meo => p.meo,
            MetricKey::HgrInf => p.hgr_inf,
            MetricKey::TrainPenalty => Some(p.train_penalty),
        }
    }
}

/// Keep the points not dominated in (error_key, fairness_key); points
/// missing either key are dropped, exact ties keep the first by input
/// order, and the result is sorted by the error key (stable).
pub fn pareto_filter(
    points: &[TradeoffPoint],
    error_key: MetricKey,
    fairness_key: MetricKey,
) -> Vec<TradeoffPoint> {
    let keyed: Vec<(usize, f64, f64)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| Some((i, error_key.get(p)?, fairness_key.get(p)?)))
        .collect();
    let mut keep: Vec<(usize, f64, f64)> = Vec::new();
    'outer: for &(i, e, f) in &keyed {
        for &(j, e2, f2) in &keyed {
            if j == i {
                continue;
            }
            let strictly = e2 < e || f2 < f;
            if e2 <= e && f2 <= f && strictly {
                continue 'outer;
            }
            if e2 == e && f2 == f && j < i {
                continue 'outer;
            }
        }
        keep.push((i, e, f));
    }
    keep.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    keep.into_iter().map(|(i, _, _)| points[i].clone()).collect()
}

/// Absolute Spearman rank correlation with average ranks for ties. A
/// constant input (or fewer than two rows) is degenerate: (0.0, true).
pub fn spearman_abs(x: &[f64], y: &[f64]) -> (f64, bool) {
    if x.len() != y.len() || x.len() < 2 {
        return (0.0, true);
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return (0.0, true);
    }
    ((cov / (vx * vy).sqrt()).abs().min(1.0), false)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut end = k;
        while end + 1 < n && values[order[end + 1]] == values[order[k]] {
            end += 1;
        }
        let avg = (k + end) as f64 / 2.0 + 1.0;
        for &i in &order[k..=end] {
            ranks[i] = avg;
        }
        k = end + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub feature: String,
    pub sensitive_value: String,
    pub abs_spearman: f64,
    pub degenerate: bool,
}

/// For each input feature: |Spearman| between the post-hoc module's output
/// and that feature, over all rows ("all") and per sensitive value.
pub fn posthoc_correlation_analysis(
    posthoc: &ScoreModule,
    table: &DatasetTable,
) -> Result<Vec<CorrelationRow>, MetricsError> {
    if table.sensitive_kind() != SensitiveKind::Categorical {
        return Err(MetricsError::InvalidInput(
            "correlation analysis needs a categorical sensitive attribute".to_string(),
        ));
    }
    if table.n_annotated() == 0 {
        return Err(MetricsError::EmptyGroup {
            cell: "annotated rows".to_string(),
        });
    }
    let outputs = posthoc.forward(table.features())?;
    let cats = observed_categories(table.sensitive());
    let mut report = Vec::new();
    for j in 0..table.dim() {
        let column: Vec<f64> = (0..table.n()).map(|i| table.features().get(i, j)).collect();
        let name = table.feature_names()[j].clone();
        let (rho, degenerate) = spearman_abs(&outputs, &column);
        report.push(CorrelationRow {
            feature: name.clone(),
            sensitive_value: "all".to_string(),
            abs_spearman: rho,
            degenerate,
        });
        for &cat in &cats {
            let idx: Vec<usize> = (0..table.n())
                .filter(|&i| table.sensitive()[i] == Some(cat))
                .collect();
            let t: Vec<f64> = idx.iter().map(|&i| outputs[i]).collect();
            let f: Vec<f64> = idx.iter().map(|&i| column[i]).collect();
            let (rho, degenerate) = spearman_abs(&t, &f);
            report.push(CorrelationRow {
                feature: name.clone(),
                sensitive_value: format!("{cat}"),
                abs_spearman: rho,
                degenerate,
            });
        }
    }
    Ok(report)
}
