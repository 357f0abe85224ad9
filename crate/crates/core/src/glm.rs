//! The two regularized objectives written out for generalized linear
//! models, where the post-processing objective provably equals the
//! in-processing one up to an additive constant, plus a verifier that
//! measures that constant empirically and against its closed form.
//!
//! With per-row loss A_x(theta) - theta^T phi(x, y) (logistic:
//! A = ln(1+e^z), phi = y*x; linear: A = z^2, phi = 2*y*x) and theta_base
//! the exact minimizer of the average loss, first-order optimality makes
//!   mean Bregman(theta, theta_base) = mean loss(theta) + C,
//! with C = theta_base^T mean(phi) - mean(A(theta_base)). Both sides carry
//! lambda times the same penalty, so the difference of the two objectives
//! is constant in theta — exactly as constant as theta_base is optimal,
//! which is why the inner fit runs to near machine precision.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, DatasetTable, TaskKind};
use crate::divergence::{bregman_glm, DivergenceError, GlmFamily};
use crate::penalty::{penalty_with_grad, PenaltyError, RegularizerSpec};
use crate::util::{ln_1p_exp, sigmoid};

/// Newton runs until the gradient sup-norm falls this far below the
/// required tolerance (or stalls), so the verifier's identity is limited by
/// float precision rather than by the stopping rule.
const INNER_EXTRA_FACTOR: f64 = 1e-3;
const MAX_NEWTON_ITERS: usize = 100;
pub const DEFAULT_INNER_TOL: f64 = 1e-9;
const ARGMIN_INITS: usize = 2;
const ARGMIN_MAX_STEPS: usize = 4000;
const ARGMIN_GTOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum GlmError {
    #[error("inner fit not converged: gradient sup-norm {achieved:e} exceeds {required:e}")]
    InnerNotConverged { achieved: f64, required: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimError { expected: usize, got: usize },
    #[error("logistic family needs a binary-classification table")]
    NotBinary,
    #[error("normal-equation / Newton system is singular")]
    Singular,
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivReport {
    pub lambda: f64,
    pub n_probe: usize,
    pub max_constant_deviation: f64,
    pub c_empirical: f64,
    pub c_closed_form: f64,
    pub argmin_distance: f64,
    pub family: GlmFamily,
}

fn check_family(table: &DatasetTable, family: GlmFamily) -> Result<(), GlmError> {
    if family == GlmFamily::Logistic && table.task() != TaskKind::BinaryClassification {
        return Err(GlmError::NotBinary);
    }
    Ok(())
}

fn check_dim(table: &DatasetTable, theta: &[f64]) -> Result<(), GlmError> {
    if theta.len() != table.dim() {
        return Err(GlmError::DimError {
            expected: table.dim(),
            got: theta.len(),
        });
    }
    Ok(())
}

/// Linear scores z_i = theta^T x_i over the table's feature rows.
pub fn glm_scores(theta: &[f64], table: &DatasetTable) -> Result<Vec<f64>, GlmError> {
    check_dim(table, theta)?;
    let x = table.features();
    Ok((0..x.rows())
        .map(|i| x.row(i).iter().zip(theta).map(|(a, b)| a * b).sum())
        .collect())
}

/// Average GLM loss (1/n) sum_i [A_{x_i}(theta) - theta^T phi(x_i, y_i)].
pub fn glm_mean_loss(
    theta: &[f64],
    table: &DatasetTable,
    family: GlmFamily,
) -> Result<f64, GlmError> {
    check_family(table, family)?;
    let z = glm_scores(theta, table)?;
    let y = table.labels();
    let n = z.len() as f64;
    let total: f64 = match family {
        GlmFamily::Logistic => (0..z.len()).map(|i| ln_1p_exp(z[i]) - y[i] * z[i]).sum(),
        GlmFamily::Linear => (0..z.len()).map(|i| z[i] * z[i] - 2.0 * y[i] * z[i]).sum(),
    };
    Ok(total / n)
}

fn mean_loss_gradient(theta: &[f64], table: &DatasetTable, family: GlmFamily) -> Vec<f64> {
    let x = table.features();
    let y = table.labels();
    let n = x.rows() as f64;
    let mut grad = vec![0.0; theta.len()];
    for i in 0..x.rows() {
        let row = x.row(i);
        let z: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
        let coeff = match family {
            GlmFamily::Logistic => sigmoid(z) - y[i],
            GlmFamily::Linear => 2.0 * (z - y[i]),
        };
        for (g, &xj) in grad.iter_mut().zip(row) {
            *g += coeff * xj / n;
        }
    }
    grad
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fit the family's average loss to a gradient sup-norm comfortably below
/// `tol`: the linear family by normal equations, the logistic family by
/// damped Newton. Errors with InnerNotConverged if `tol` is unmet after
/// `max_iters` Newton steps.
pub fn fit_glm(
    table: &DatasetTable,
    family: GlmFamily,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>, GlmError> {
    check_family(table, family)?;
    let x = table.features();
    let y = table.labels();
    let (n, d) = (x.rows(), x.cols());
    let theta = match family {
        GlmFamily::Linear => {
            // X^T X theta = X^T y, solved directly.
            let mut xtx = DMatrix::zeros(d, d);
            let mut xty = DVector::zeros(d);
            for i in 0..n {
                let row = x.row(i);
                for a in 0..d {
                    xty[a] += row[a] * y[i];
                    for b in 0..d {
                        xtx[(a, b)] += row[a] * row[b];
                    }
                }
            }
            let solved = xtx
                .clone()
                .cholesky()
                .map(|c| c.solve(&xty))
                .or_else(|| xtx.lu().solve(&xty))
                .ok_or(GlmError::Singular)?;
            solved.iter().copied().collect::<Vec<f64>>()
        }
        GlmFamily::Logistic => {
            let target = (tol * INNER_EXTRA_FACTOR).max(1e-15);
            let mut theta = vec![0.0; d];
            for _ in 0..max_iters {
                let grad = mean_loss_gradient(&theta, table, family);
                if sup_norm(&grad) <= target {
                    break;
                }
                let mut hess = DMatrix::zeros(d, d);
                for i in 0..n {
                    let row = x.row(i);
                    let z: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum();
                    let p = sigmoid(z);
                    let w = p * (1.0 - p) / n as f64;
                    for a in 0..d {
                        for b in 0..d {
                            hess[(a, b)] += w * row[a] * row[b];
                        }
                    }
                }
                let g = DVector::from_column_slice(&grad);
                let dir = hess
                    .clone()
                    .cholesky()
                    .map(|c| c.solve(&g))
                    .or_else(|| hess.lu().solve(&g))
                    .ok_or(GlmError::Singular)?;
                // Damped step: halve until the loss decreases.
                let loss0 = glm_mean_loss(&theta, table, family)?;
                let mut t = 1.0;
                loop {
                    let cand: Vec<f64> = theta
                        .iter()
                        .zip(dir.iter())
                        .map(|(p, s)| p - t * s)
                        .collect();
                    if glm_mean_loss(&cand, table, family)? < loss0 || t < 1e-10 {
                        theta = cand;
                        break;
                    }
                    t *= 0.5;
                }
            }
            theta
        }
    };
    let achieved = sup_norm(&mean_loss_gradient(&theta, table, family));
    if achieved > tol {
        return Err(GlmError::InnerNotConverged {
            achieved,
            required: tol,
        });
    }
    Ok(theta)
}

/// Penalty over the table's annotated rows at the given scores.
fn penalty_on_annotated(
    scores: &[f64],
    table: &DatasetTable,
    regularizer: &RegularizerSpec,
) -> Result<(f64, Vec<usize>, Vec<f64>), GlmError> {
    let idx = table.annotated_indices();
    let sub_scores: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let sub_labels: Vec<f64> = idx.iter().map(|&i| table.labels()[i]).collect();
    let sub_sens: Vec<Option<f64>> = idx.iter().map(|&i| table.sensitive()[i]).collect();
    let (value, grad) = penalty_with_grad(
        regularizer,
        &sub_scores,
        &sub_labels,
        &sub_sens,
        table.task(),
    )?;
    Ok((value, idx, grad))
}

/// In-processing objective: average GLM loss plus lambda times the penalty
/// over the annotated rows.
pub fn lip_value(
    theta: &[f64],
    table: &DatasetTable,
    lambda: f64,
    regularizer: &RegularizerSpec,
    family: GlmFamily,
) -> Result<f64, GlmError> {
    let main = glm_mean_loss(theta, table, family)?;
    if lambda == 0.0 {
        return Ok(main);
    }
    let scores = glm_scores(theta, table)?;
    let (pen, _, _) = penalty_on_annotated(&scores, table, regularizer)?;
    Ok(main + lambda * pen)
}

/// Post-processing objective: average Bregman divergence to the base
/// parameters plus lambda times the same penalty.
pub fn lpp_value(
    theta: &[f64],
    theta_base: &[f64],
    table: &DatasetTable,
    lambda: f64,
    regularizer: &RegularizerSpec,
    family: GlmFamily,
) -> Result<f64, GlmError> {
    check_family(table, family)?;
    check_dim(table, theta)?;
    check_dim(table, theta_base)?;
    let main = bregman_glm(theta, theta_base, table, family)?;
    if lambda == 0.0 {
        return Ok(main);
    }
    let scores = glm_scores(theta, table)?;
    let (pen, _, _) = penalty_on_annotated(&scores, table, regularizer)?;
    Ok(main + lambda * pen)
}

/// The closed form of the objective-difference constant: the negated mean
/// inner loss at theta_base.
fn closed_form_constant(
    theta_base: &[f64],
    table: &DatasetTable,
    family: GlmFamily,
) -> Result<f64, GlmError> {
    let z = glm_scores(theta_base, table)?;
    let y = table.labels();
    let n = z.len() as f64;
    let total: f64 = match family {
        GlmFamily::Logistic => (0..z.len()).map(|i| y[i] * z[i] - ln_1p_exp(z[i])).sum(),
        GlmFamily::Linear => (0..z.len()).map(|i| 2.0 * y[i] * z[i] - z[i] * z[i]).sum(),
    };
    Ok(total / n)
}

enum WhichObjective {
    InProcessing,
    PostProcessing,
}

/// Value and gradient of L_IP or L_PP in theta.
fn objective_value_grad(
    which: &WhichObjective,
    theta: &[f64],
    theta_base: &[f64],
    table: &DatasetTable,
    lambda: f64,
    regularizer: &RegularizerSpec,
    family: GlmFamily,
) -> Result<(f64, Vec<f64>), GlmError> {
    let x = table.features();
    let y = table.labels();
    let n = x.rows() as f64;
    let scores = glm_scores(theta, table)?;
    let base_scores = glm_scores(theta_base, table)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for i in 0..x.rows() {
        let row = x.row(i);
        let z = scores[i];
        let (v, coeff) = match (which, family) {
            (WhichObjective::InProcessing, GlmFamily::Logistic) => {
                (ln_1p_exp(z) - y[i] * z, sigmoid(z) - y[i])
            }
            (WhichObjective::InProcessing, GlmFamily::Linear) => {
                (z * z - 2.0 * y[i] * z, 2.0 * (z - y[i]))
            }
            (WhichObjective::PostProcessing, GlmFamily::Logistic) => {
                let zb = base_scores[i];
                (
                    ln_1p_exp(z) - ln_1p_exp(zb) - sigmoid(zb) * (z - zb),
                    sigmoid(z) - sigmoid(zb),
                )
            }
            (WhichObjective::PostProcessing, GlmFamily::Linear) => {
                let zb = base_scores[i];
                (z * z - zb * zb - 2.0 * zb * (z - zb), 2.0 * (z - zb))
            }
        };
        value += v / n;
        for (g, &xj) in grad.iter_mut().zip(row) {
            *g += coeff * xj / n;
        }
    }
    if lambda > 0.0 {
        let (pen, idx, pgrad) = penalty_on_annotated(&scores, table, regularizer)?;
        value += lambda * pen;
        for (k, &i) in idx.iter().enumerate() {
            let row = x.row(i);
            for (g, &xj) in grad.iter_mut().zip(row) {
                *g += lambda * pgrad[k] * xj;
            }
        }
    }
    Ok((value, grad))
}

/// Gradient descent with backtracking line search until the gradient
/// sup-norm falls below `gtol` or the step stalls.
fn minimize<F>(value_grad: F, init: &[f64]) -> Result<(Vec<f64>, f64), GlmError>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), GlmError>,
{
    let mut theta = init.to_vec();
    let (mut value, mut grad) = value_grad(&theta)?;
    let mut step = 1.0;
    for _ in 0..ARGMIN_MAX_STEPS {
        if sup_norm(&grad) <= ARGMIN_GTOL {
            break;
        }
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        let mut t = step;
        loop {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(p, g)| p - t * g).collect();
            let (cv, cg) = value_grad(&cand)?;
            if cv <= value - 1e-4 * t * gnorm2 {
                theta = cand;
                value = cv;
                grad = cg;
                step = (t * 2.0).min(1e3);
                break;
            }
            t *= 0.5;
            if t < 1e-14 {
                // Stalled: the current point is as good as the line search
                // can make it.
                return Ok((theta, value));
            }
        }
    }
    Ok((theta, value))
}

/// Probe the identity L_PP = L_IP + C around a freshly fitted theta_base:
/// report the spread of Delta(theta) = L_PP - L_IP over `n_probe` draws
/// uniform in a coordinate box of half-width `radius`, the empirical and
/// closed-form constants, and the distance between both objectives' argmins
/// found from shared random starts.
pub fn verify_equivalence(
    table: &DatasetTable,
    lambda: f64,
    regularizer: &RegularizerSpec,
    family: GlmFamily,
    n_probe: usize,
    radius: f64,
    seed: u64,
) -> Result<EquivReport, GlmError> {
    verify_equivalence_with(
        table,
        lambda,
        regularizer,
        family,
        n_probe,
        radius,
        seed,
        DEFAULT_INNER_TOL,
        MAX_NEWTON_ITERS,
    )
}

/// As verify_equivalence, with the inner fit's tolerance and iteration
/// budget exposed (mostly to demonstrate how the identity degrades when the
/// inner problem is solved loosely).
#[allow(clippy::too_many_arguments)]
pub fn verify_equivalence_with(
    table: &DatasetTable,
    lambda: f64,
    regularizer: &RegularizerSpec,
    family: GlmFamily,
    n_probe: usize,
    radius: f64,
    seed: u64,
    inner_tol: f64,
    max_inner_iters: usize,
) -> Result<EquivReport, GlmError> {
    let theta_base = fit_glm(table, family, inner_tol, max_inner_iters)?;
    let d = theta_base.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|j| theta_base[j] + rng.gen_range(-radius..radius))
            .collect()
    };
    let mut deltas = Vec::with_capacity(n_probe);
    for _ in 0..n_probe {
        let theta = draw(&mut rng);
        let ip = lip_value(&theta, table, lambda, regularizer, family)?;
        let pp = lpp_value(&theta, &theta_base, table, lambda, regularizer, family)?;
        deltas.push(pp - ip);
    }
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &dl in &deltas {
        lo = lo.min(dl);
        hi = hi.max(dl);
        sum += dl;
    }
    let c_empirical = sum / deltas.len() as f64;
    let c_closed_form = closed_form_constant(&theta_base, table, family)?;

    // Argmin agreement: minimize both objectives from the same random
    // starts; keep each objective's best end point.
    let mut best_ip: Option<(f64, Vec<f64>)> = None;
    let mut best_pp: Option<(f64, Vec<f64>)> = None;
    for _ in 0..ARGMIN_INITS {
        let init = draw(&mut rng);
        let (t_ip, v_ip) = minimize(
            |t| {
                objective_value_grad(
                    &WhichObjective::InProcessing,
                    t,
                    &theta_base,
                    table,
                    lambda,
                    regularizer,
                    family,
                )
            },
            &init,
        )?;
        if best_ip.as_ref().map_or(true, |(v, _)| v_ip < *v) {
            best_ip = Some((v_ip, t_ip));
        }
        let (t_pp, v_pp) = minimize(
            |t| {
                objective_value_grad(
                    &WhichObjective::PostProcessing,
                    t,
                    &theta_base,
                    table,
                    lambda,
                    regularizer,
                    family,
                )
            },
            &init,
        )?;
        if best_pp.as_ref().map_or(true, |(v, _)| v_pp < *v) {
            best_pp = Some((v_pp, t_pp));
        }
    }
    let (_, amin_ip) = best_ip.expect("at least one argmin start");
    let (_, amin_pp) = best_pp.expect("at least one argmin start");
    let argmin_distance = amin_ip
        .iter()
        .zip(&amin_pp)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    Ok(EquivReport {
        lambda,
        n_probe,
        max_constant_deviation: hi - lo,
        c_empirical,
        c_closed_form,
        argmin_distance,
        family,
    })
}
