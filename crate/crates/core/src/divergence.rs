//! Output-discrepancy terms that anchor the fair model to the base model,
//! plus the Bregman divergence of the data-averaged log-partition used by
//! the GLM equivalence check.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetTable, TaskKind};
use crate::util::{ln_1p_exp, sigmoid};

#[derive(Debug, thiserror::Error)]
pub enum DivergenceError {
    #[error("length mismatch: {expected} vs {got}")]
    DimError { expected: usize, got: usize },
    #[error("inputs must be nonempty")]
    Empty,
    #[error("{0}")]
    Unsupported(String),
}

/// The R_pp term: how fair outputs are tied back to base outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DivergenceSpec {
    /// Mean KL(Bern(sigma(base)) || Bern(sigma(fair))) over rows; set
    /// `reversed` to swap which model is the reference.
    #[serde(rename = "KLBernoulli")]
    KlBernoulli {
        #[serde(default)]
        reversed: bool,
    },
    #[serde(rename = "MSE")]
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmFamily {
    Logistic,
    Linear,
}

const PROB_CLAMP: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), DivergenceError> {
    if a.len() != b.len() {
        return Err(DivergenceError::DimError {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(DivergenceError::Empty);
    }
    Ok(())
}

/// Mean over rows of KL(Bern(sigma(z_base)) || Bern(sigma(z_fair))), with
/// the gradient with respect to the fair logits. The gradient has the exact
/// closed form (sigma(z_fair) - sigma(z_base)) / n, so it is zero per row
/// at equality.
pub fn kl_bernoulli(
    base_logits: &[f64],
    fair_logits: &[f64],
) -> Result<(f64, Vec<f64>), DivergenceError> {
    check_pair(base_logits, fair_logits)?;
    let n = base_logits.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; base_logits.len()];
    for i in 0..base_logits.len() {
        let p = clamp_prob(sigmoid(base_logits[i]));
        let q = clamp_prob(sigmoid(fair_logits[i]));
        value += p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
        grad[i] = (sigmoid(fair_logits[i]) - sigmoid(base_logits[i])) / n;
    }
    Ok(((value / n).max(0.0), grad))
}

/// Mean squared difference of scores with gradient 2(fair - base)/n.
pub fn mse_divergence(
    base_scores: &[f64],
    fair_scores: &[f64],
) -> Result<(f64, Vec<f64>), DivergenceError> {
    check_pair(base_scores, fair_scores)?;
    let n = base_scores.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; base_scores.len()];
    for i in 0..base_scores.len() {
        let d = fair_scores[i] - base_scores[i];
        value += d * d;
        grad[i] = 2.0 * d / n;
    }
    Ok((value / n, grad))
}

/// Evaluate the configured divergence on raw scores (logits for binary
/// tasks); the gradient is with respect to the fair scores.
pub fn divergence_with_grad(
    spec: &DivergenceSpec,
    base_scores: &[f64],
    fair_scores: &[f64],
    task: TaskKind,
) -> Result<(f64, Vec<f64>), DivergenceError> {
    match spec {
        DivergenceSpec::KlBernoulli { reversed } => {
            if task != TaskKind::BinaryClassification {
                return Err(DivergenceError::Unsupported(
                    "KLBernoulli requires a binary classification task".to_string(),
                ));
            }
            if !reversed {
                return kl_bernoulli(base_scores, fair_scores);
            }
            // KL(fair || base): the fair model is the left argument, so the
            // gradient picks up the log-odds difference times sigma'.
            check_pair(base_scores, fair_scores)?;
            let n = base_scores.len() as f64;
            let (value, _) = kl_bernoulli(fair_scores, base_scores)?;
            let grad = fair_scores
                .iter()
                .zip(base_scores)
                .map(|(&zf, &zb)| {
                    let p = sigmoid(zf);
                    (zf - zb) * p * (1.0 - p) / n
                })
                .collect();
            Ok((value, grad))
        }
        DivergenceSpec::Mse => mse_divergence(base_scores, fair_scores),
    }
}

/// Bregman divergence of the data-averaged per-sample partition function:
/// abar(t) = (1/n) sum_i A_{x_i}(t), value = abar(theta) - abar(theta_base)
/// - grad_abar(theta_base) . (theta - theta_base). Nonnegative up to
/// round-off by convexity.
pub fn bregman_glm(
    theta: &[f64],
    theta_base: &[f64],
    table: &DatasetTable,
    family: GlmFamily,
) -> Result<f64, DivergenceError> {
    if theta.len() != theta_base.len() || theta.len() != table.dim() {
        return Err(DivergenceError::DimError {
            expected: table.dim(),
            got: theta.len(),
        });
    }
    let n = table.n() as f64;
    let mut value = 0.0;
    for i in 0..table.n() {
        let x = table.features().row(i);
        let z: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
        let zb: f64 = x.iter().zip(theta_base).map(|(a, b)| a * b).sum();
        let (a, ab, da_b) = match family {
            GlmFamily::Logistic => (ln_1p_exp(z), ln_1p_exp(zb), sigmoid(zb)),
            GlmFamily::Linear => (z * z, zb * zb, 2.0 * zb),
        };
        // grad_abar(theta_base) . (theta - theta_base) accumulated via the
        // chain rule through z: dA/dtheta . (theta - theta_base) = A'(zb) * (z - zb).
        value += a - ab - da_b * (z - zb);
    }
    Ok(value / n)
}
