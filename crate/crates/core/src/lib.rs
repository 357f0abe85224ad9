//! Turn a regularized group-fairness training objective into a
//! post-processing method: freeze any base scorer, fit a small additive
//! module on top of it, and sweep the fairness/accuracy trade-off.

pub mod data;
pub mod divergence;
pub mod glm;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod penalty;
pub mod train;
pub mod util;

pub use data::{
    load_csv, split, standardize, subsample_sensitive, synth_two_group, write_csv, CsvSchema,
    DataError, DatasetTable, Matrix, SensitiveKind, SplitOut, SplitSpec, StandardizeRecord,
    SynthSpec, TaskKind,
};
pub use divergence::{
    bregman_glm, divergence_with_grad, kl_bernoulli, mse_divergence, DivergenceError,
    DivergenceSpec, GlmFamily,
};
pub use glm::{
    fit_glm, glm_mean_loss, glm_scores, lip_value, lpp_value, verify_equivalence,
    verify_equivalence_with, EquivReport, GlmError,
};
pub use metrics::{
    fpr_gap, hgr_from_joint, hgr_inf, meo, pareto_filter, posthoc_correlation_analysis,
    prediction_error, sp_gap, sp_gap_with, spearman_abs, CorrelationRow, MetricKey, MetricsError,
    SpAggregate, TradeoffPoint,
};
pub use model::{predict_labels, BaseScorer, FairModel, ModelError, ModuleKind, ScoreModule};
pub use penalty::{
    mindiff_penalty, mmd2, penalty_with_grad, BandwidthRule, Chi2Spec, KdeSpSpec, KernelKind,
    MinDiffMode, MinDiffSpec, PenaltyError, RegularizerSpec, ScoreSpace,
};
pub use train::{
    default_lambda_grid, derive_seed, fit_base, fit_frappe, fit_inprocessing,
    naive_randomized_baseline, objective_value_and_grad, sweep, BatchSpec, EarlyStopping,
    EpochRecord, ObjectiveContext, ObjectiveSpec, Optimizer, PredictionLoss, SweepJob, SweepPoint,
    SweepProtocol, TrainConfig, TrainError, TrainMode, TrainResult,
};
