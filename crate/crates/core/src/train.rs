//! Gradient training for both flavors of the fairness objective:
//! in-processing (prediction loss + lambda * penalty, the whole model
//! trains) and post-processing (divergence to a frozen base + lambda *
//! penalty, only the additive correction module trains), plus lambda x seed
//! sweeps and a randomized coin-flip baseline.
//!
//! History semantics: each epoch records the objective terms seen by the
//! gradient step (pre-update; under minibatching the mean over batches and
//! the last step's penalty), while validation error and the optional test
//! gap are measured after the epoch's updates so early stopping acts on the
//! current parameters.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, DatasetTable, Matrix, TaskKind};
use crate::divergence::{divergence_with_grad, DivergenceError, DivergenceSpec};
use crate::metrics::{
    fpr_gap, hgr_inf, meo, prediction_error, sp_gap, MetricsError, TradeoffPoint,
};
use crate::model::{predict_labels, BaseScorer, ModelError, ModuleKind, ScoreModule};
use crate::penalty::{penalty_with_grad, MinDiffSpec, PenaltyError, RegularizerSpec};
use crate::util::{ln_1p_exp, sigmoid, splitmix64};

pub const LR_GRID: [f64; 4] = [1e-3, 3e-3, 1e-2, 3e-2];
pub const DEFAULT_HGR_BINS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("regularizer failed at epoch {epoch}: {source}")]
    PenaltyAt {
        epoch: usize,
        #[source]
        source: PenaltyError,
    },
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training setup: {0}")]
    InvalidConfig(String),
    #[error("probability must lie in [0,1], got {value}")]
    InvalidFraction { value: f64 },
}

fn at_epoch(e: TrainError, epoch: usize) -> TrainError {
    match e {
        TrainError::Penalty(source) => TrainError::PenaltyAt { epoch, source },
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    InProcessing,
    Frappe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionLoss {
    Logistic,
    SquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub mode: TrainMode,
    pub lambda: f64,
    pub regularizer: RegularizerSpec,
    /// Output-anchoring term; only used in frappe mode. Defaults by task:
    /// KL for binary classification, MSE for regression.
    #[serde(default)]
    pub divergence: Option<DivergenceSpec>,
    /// Only used in in-processing mode. Defaults by task: logistic loss for
    /// binary classification, squared error for regression.
    #[serde(default)]
    pub prediction_loss: Option<PredictionLoss>,
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        self.regularizer.validate()?;
        Ok(())
    }

    pub fn resolved_prediction_loss(&self, task: TaskKind) -> PredictionLoss {
        self.prediction_loss.unwrap_or(match task {
            TaskKind::BinaryClassification => PredictionLoss::Logistic,
            TaskKind::Regression => PredictionLoss::SquaredError,
        })
    }

    pub fn resolved_divergence(&self, task: TaskKind) -> DivergenceSpec {
        self.divergence.clone().unwrap_or(match task {
            TaskKind::BinaryClassification => DivergenceSpec::KlBernoulli { reversed: false },
            TaskKind::Regression => DivergenceSpec::Mse,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// lr None picks the best value from LR_GRID by validation error.
    Adam { lr: Option<f64> },
    Sgd { lr: Option<f64> },
}

impl Optimizer {
    fn lr(&self) -> Option<f64> {
        match *self {
            Optimizer::Adam { lr } | Optimizer::Sgd { lr } => lr,
        }
    }

    fn with_lr(&self, lr: f64) -> Optimizer {
        match self {
            Optimizer::Adam { .. } => Optimizer::Adam { lr: Some(lr) },
            Optimizer::Sgd { .. } => Optimizer::Sgd { lr: Some(lr) },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchSpec {
    Full,
    Minibatch { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub batch: BatchSpec,
    pub early_stopping: Option<EarlyStopping>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            optimizer: Optimizer::Adam { lr: None },
            batch: BatchSpec::Full,
            early_stopping: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".to_string()));
        }
        if let Some(lr) = self.optimizer.lr() {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(TrainError::InvalidConfig(format!(
                    "learning rate must be positive, got {lr}"
                )));
            }
        }
        if let BatchSpec::Minibatch { size } = self.batch {
            if size == 0 {
                return Err(TrainError::InvalidConfig(
                    "minibatch size must be >= 1".to_string(),
                ));
            }
        }
        if let Some(es) = &self.early_stopping {
            if es.patience == 0 {
                return Err(TrainError::InvalidConfig(
                    "patience must be >= 1".to_string(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub main_term: f64,
    pub fairness_penalty: f64,
    pub val_error: f64,
    pub test_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub params: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub learning_rate: f64,
}

impl TrainResult {
    /// Validation error of the parameters this run returned: the minimum
    /// recorded when early stopping was in charge, else the final record.
    fn returned_val_error(&self, early_stopping: bool) -> f64 {
        if early_stopping {
            self.history
                .iter()
                .map(|h| h.val_error)
                .fold(f64::INFINITY, f64::min)
        } else {
            self.history.last().map_or(f64::INFINITY, |h| h.val_error)
        }
    }
}

fn prediction_loss_with_grad(
    loss: PredictionLoss,
    scores: &[f64],
    labels: &[f64],
) -> (f64, Vec<f64>) {
    let n = scores.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; scores.len()];
    match loss {
        PredictionLoss::Logistic => {
            for i in 0..scores.len() {
                value += ln_1p_exp(scores[i]) - labels[i] * scores[i];
                grad[i] = (sigmoid(scores[i]) - labels[i]) / n;
            }
        }
        PredictionLoss::SquaredError => {
            for i in 0..scores.len() {
                let d = scores[i] - labels[i];
                value += d * d;
                grad[i] = 2.0 * d / n;
            }
        }
    }
    (value / n, grad)
}

enum MainTerm {
    Prediction(PredictionLoss),
    Divergence(DivergenceSpec),
}

/// Everything needed to evaluate the training objective and its parameter
/// gradient at the current module parameters.
#[derive(Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub main: &'a DatasetTable,
    /// Base scores aligned with `main` rows (frappe mode).
    pub main_base_scores: Option<&'a [f64]>,
    /// Table providing sensitive annotations for the penalty.
    pub sens: &'a DatasetTable,
    pub sens_base_scores: Option<&'a [f64]>,
    pub objective: &'a ObjectiveSpec,
}

struct ObjCore<'a> {
    main: &'a DatasetTable,
    main_base: Option<&'a [f64]>,
    main_term: MainTerm,
    lambda: f64,
    regularizer: &'a RegularizerSpec,
    task: TaskKind,
    // Annotated slice of the sensitive table, materialized once.
    ann_matrix: Matrix,
    ann_labels: Vec<f64>,
    ann_sensitive: Vec<Option<f64>>,
    ann_base: Option<Vec<f64>>,
}

impl<'a> ObjCore<'a> {
    fn new(ctx: &ObjectiveContext<'a>) -> Result<Self, TrainError> {
        let task = ctx.main.task();
        let main_term = match ctx.objective.mode {
            TrainMode::InProcessing => {
                MainTerm::Prediction(ctx.objective.resolved_prediction_loss(task))
            }
            TrainMode::Frappe => {
                if ctx.main_base_scores.is_none() {
                    return Err(TrainError::InvalidConfig(
                        "frappe mode needs base scores for the training table".to_string(),
                    ));
                }
                MainTerm::Divergence(ctx.objective.resolved_divergence(task))
            }
        };
        let sens = ctx.sens;
        let ann_idx = sens.annotated_indices();
        let d = sens.dim();
        let mut flat = Vec::with_capacity(ann_idx.len() * d);
        for &i in &ann_idx {
            flat.extend_from_slice(sens.features().row(i));
        }
        let ann_matrix = Matrix::from_flat(ann_idx.len(), d, flat)?;
        Ok(ObjCore {
            main: ctx.main,
            main_base: ctx.main_base_scores,
            main_term,
            lambda: ctx.objective.lambda,
            regularizer: &ctx.objective.regularizer,
            task,
            ann_labels: ann_idx.iter().map(|&i| sens.labels()[i]).collect(),
            ann_sensitive: ann_idx.iter().map(|&i| sens.sensitive()[i]).collect(),
            ann_base: ctx
                .sens_base_scores
                .map(|b| ann_idx.iter().map(|&i| b[i]).collect()),
            ann_matrix,
        })
    }

    fn main_scores(
        &self,
        module: &ScoreModule,
        rows: Option<&[usize]>,
    ) -> Result<(Vec<f64>, Option<Matrix>), TrainError> {
        match rows {
            None => {
                let mut s = module.forward(self.main.features())?;
                if let Some(base) = self.main_base {
                    for (si, bi) in s.iter_mut().zip(base) {
                        *si += bi;
                    }
                }
                Ok((s, None))
            }
            Some(idx) => {
                let d = self.main.dim();
                let mut flat = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    flat.extend_from_slice(self.main.features().row(i));
                }
                let mat = Matrix::from_flat(idx.len(), d, flat)?;
                let mut s = module.forward(&mat)?;
                if let Some(base) = self.main_base {
                    for (k, &i) in idx.iter().enumerate() {
                        s[k] += base[i];
                    }
                }
                Ok((s, Some(mat)))
            }
        }
    }

    fn main_value_upstream(
        &self,
        scores: &[f64],
        rows: Option<&[usize]>,
    ) -> Result<(f64, Vec<f64>), TrainError> {
        match &self.main_term {
            MainTerm::Prediction(loss) => {
                let labels: Vec<f64> = match rows {
                    None => self.main.labels().to_vec(),
                    Some(idx) => idx.iter().map(|&i| self.main.labels()[i]).collect(),
                };
                Ok(prediction_loss_with_grad(*loss, scores, &labels))
            }
            MainTerm::Divergence(spec) => {
                let base = self.main_base.unwrap();
                let base_rows: Vec<f64> = match rows {
                    None => base.to_vec(),
                    Some(idx) => idx.iter().map(|&i| base[i]).collect(),
                };
                Ok(divergence_with_grad(spec, &base_rows, scores, self.task)?)
            }
        }
    }

    fn penalty_scores(&self, module: &ScoreModule) -> Result<Vec<f64>, TrainError> {
        let mut s = module.forward(&self.ann_matrix)?;
        if let Some(base) = &self.ann_base {
            for (si, bi) in s.iter_mut().zip(base) {
                *si += bi;
            }
        }
        Ok(s)
    }

    fn penalty_value_grad(&self, module: &ScoreModule) -> Result<(f64, Vec<f64>), TrainError> {
        let s = self.penalty_scores(module)?;
        let (v, g) = penalty_with_grad(
            self.regularizer,
            &s,
            &self.ann_labels,
            &self.ann_sensitive,
            self.task,
        )?;
        let mut grad = module.vjp(&self.ann_matrix, &g)?;
        for gi in &mut grad {
            *gi *= self.lambda;
        }
        Ok((v, grad))
    }

    /// (main value, penalty value, parameter gradient of main + lambda*penalty)
    /// over the given main rows; the penalty always sees the full annotated set.
    fn gradient(
        &self,
        module: &ScoreModule,
        rows: Option<&[usize]>,
    ) -> Result<(f64, f64, Vec<f64>), TrainError> {
        let (scores, submat) = self.main_scores(module, rows)?;
        let (main_val, upstream) = self.main_value_upstream(&scores, rows)?;
        let mat = submat.as_ref().unwrap_or_else(|| self.main.features());
        let mut grad = module.vjp(mat, &upstream)?;
        let mut pen_val = 0.0;
        if self.lambda > 0.0 {
            let (pv, pg) = self.penalty_value_grad(module)?;
            pen_val = pv;
            for (gi, pi) in grad.iter_mut().zip(&pg) {
                *gi += pi;
            }
        }
        Ok((main_val, pen_val, grad))
    }
}

/// Value and parameter gradient of the full objective (main term plus
/// lambda times the fairness penalty) at the module's current parameters;
/// `rows` restricts the main term to a subset of `main` (the penalty always
/// uses every annotated row of `sens`).
pub fn objective_value_and_grad(
    module: &ScoreModule,
    ctx: &ObjectiveContext,
    rows: Option<&[usize]>,
) -> Result<(f64, Vec<f64>), TrainError> {
    ctx.objective.validate()?;
    let core = ObjCore::new(ctx)?;
    let (m, p, g) = core.gradient(module, rows)?;
    Ok((m + core.lambda * p, g))
}

enum OptState {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        t: u64,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    fn new(optimizer: &Optimizer, lr: f64, n: usize) -> Self {
        match optimizer {
            Optimizer::Sgd { .. } => OptState::Sgd { lr },
            Optimizer::Adam { .. } => OptState::Adam {
                lr,
                t: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            OptState::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            OptState::Adam { lr, t, m, v } => {
                *t += 1;
                let b1t = 1.0 - ADAM_B1.powi(*t as i32);
                let b2t = 1.0 - ADAM_B2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * grad[i];
                    v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * grad[i] * grad[i];
                    let mh = m[i] / b1t;
                    let vh = v[i] / b2t;
                    params[i] -= *lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

struct Engine<'a> {
    core: ObjCore<'a>,
    val: &'a DatasetTable,
    val_base: Option<Vec<f64>>,
    test: Option<&'a DatasetTable>,
    test_base: Option<Vec<f64>>,
}

impl<'a> Engine<'a> {
    fn scores_on(
        &self,
        module: &ScoreModule,
        table: &DatasetTable,
        base: Option<&Vec<f64>>,
    ) -> Result<Vec<f64>, TrainError> {
        let mut s = module.forward(table.features())?;
        if let Some(b) = base {
            for (si, bi) in s.iter_mut().zip(b) {
                *si += bi;
            }
        }
        Ok(s)
    }

    fn val_error(&self, module: &ScoreModule) -> Result<f64, TrainError> {
        let scores = self.scores_on(module, self.val, self.val_base.as_ref())?;
        let preds = predict_labels(&scores, self.val.task());
        Ok(prediction_error(&preds, self.val.labels(), self.val.task())?)
    }

    fn test_gap(&self, module: &ScoreModule) -> Option<f64> {
        let table = self.test?;
        if table.task() != TaskKind::BinaryClassification {
            return None;
        }
        let scores = self
            .scores_on(module, table, self.test_base.as_ref())
            .ok()?;
        let preds = predict_labels(&scores, table.task());
        fpr_gap(&preds, table.labels(), table.sensitive()).ok()
    }

    fn run(
        &self,
        module: &mut ScoreModule,
        config: &TrainConfig,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainResult, TrainError> {
        let mut opt = OptState::new(&config.optimizer, lr, module.n_params());
        let mut history: Vec<EpochRecord> = Vec::new();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut since_best = 0usize;
        let mut stopped_early = false;
        let n_main = self.core.main.n();
        for epoch in 0..config.epochs {
            let (main_term, fairness_penalty) = match config.batch {
                BatchSpec::Full => {
                    let (m, p, g) = self
                        .core
                        .gradient(module, None)
                        .map_err(|e| at_epoch(e, epoch))?;
                    opt.apply(module.params_mut(), &g);
                    (m, p)
                }
                BatchSpec::Minibatch { size } => {
                    let mut idx: Vec<usize> = (0..n_main).collect();
                    idx.shuffle(rng);
                    let mut main_sum = 0.0;
                    let mut batches = 0usize;
                    let mut last_pen = 0.0;
                    for chunk in idx.chunks(size) {
                        let (m, p, g) = self
                            .core
                            .gradient(module, Some(chunk))
                            .map_err(|e| at_epoch(e, epoch))?;
                        opt.apply(module.params_mut(), &g);
                        main_sum += m;
                        last_pen = p;
                        batches += 1;
                    }
                    (main_sum / batches as f64, last_pen)
                }
            };
            if module.params().iter().any(|p| !p.is_finite())
                || !main_term.is_finite()
                || !fairness_penalty.is_finite()
            {
                return Err(TrainError::Diverged { epoch });
            }
            let val_error = self.val_error(module)?;
            if !val_error.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let test_gap = self.test_gap(module);
            history.push(EpochRecord {
                main_term,
                fairness_penalty,
                val_error,
                test_gap,
            });
            if let Some(es) = &config.early_stopping {
                let improved = best.as_ref().map_or(true, |(b, _)| val_error < *b);
                if improved {
                    best = Some((val_error, module.params().to_vec()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= es.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        if let Some((_, p)) = best {
            module.set_params(&p)?;
        }
        Ok(TrainResult {
            params: module.params().to_vec(),
            epochs_run: history.len(),
            history,
            stopped_early,
            learning_rate: lr,
        })
    }
}

fn init_module(
    mode: TrainMode,
    kind: ModuleKind,
    input_dim: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> ScoreModule {
    match mode {
        TrainMode::InProcessing => ScoreModule::new_base(kind, input_dim, width, rng),
        TrainMode::Frappe => ScoreModule::new_posthoc(kind, input_dim, width, rng),
    }
}

struct RunPlan<'a> {
    ctx: ObjectiveContext<'a>,
    val: &'a DatasetTable,
    val_base: Option<Vec<f64>>,
    test: Option<&'a DatasetTable>,
    test_base: Option<Vec<f64>>,
    kind: ModuleKind,
    width: usize,
}

impl<'a> RunPlan<'a> {
    fn execute(
        &self,
        config: &TrainConfig,
        lr: f64,
    ) -> Result<(ScoreModule, TrainResult), TrainError> {
        let engine = Engine {
            core: ObjCore::new(&self.ctx)?,
            val: self.val,
            val_base: self.val_base.clone(),
            test: self.test,
            test_base: self.test_base.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut module = init_module(
            self.ctx.objective.mode,
            self.kind,
            self.ctx.main.dim(),
            self.width,
            &mut rng,
        );
        let result = engine.run(&mut module, config, lr, &mut rng)?;
        Ok((module, result))
    }

    /// Resolve the learning rate: keep a configured value, otherwise try the
    /// grid at `tune_lambda` and keep the candidate with the lowest
    /// validation error of the returned parameters (ties keep the earlier,
    /// smaller rate; diverged candidates are skipped).
    fn resolve_lr(&self, config: &TrainConfig, tune_lambda: f64) -> Result<f64, TrainError> {
        if let Some(lr) = config.optimizer.lr() {
            return Ok(lr);
        }
        let mut tuned_objective = self.ctx.objective.clone();
        tuned_objective.lambda = tune_lambda;
        let plan = RunPlan {
            ctx: ObjectiveContext {
                objective: &tuned_objective,
                ..self.ctx
            },
            val: self.val,
            val_base: self.val_base.clone(),
            test: None,
            test_base: None,
            kind: self.kind,
            width: self.width,
        };
        let mut best: Option<(f64, f64)> = None;
        let mut last_err = None;
        for lr in LR_GRID {
            match plan.execute(config, lr) {
                Ok((_, result)) => {
                    let err = result.returned_val_error(config.early_stopping.is_some());
                    if best.as_ref().map_or(true, |&(b, _)| err < b) {
                        best = Some((err, lr));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        match best {
            Some((_, lr)) => Ok(lr),
            None => Err(last_err.unwrap_or_else(|| TrainError::InvalidConfig(
                "no learning-rate candidate succeeded".to_string(),
            ))),
        }
    }
}

/// Fit a scorer on prediction loss alone (the inner problem the frozen base
/// comes from). Learning rate is tuned from LR_GRID when unset.
pub fn fit_base(
    train: &DatasetTable,
    val: &DatasetTable,
    kind: ModuleKind,
    width: usize,
    config: &TrainConfig,
) -> Result<(ScoreModule, TrainResult), TrainError> {
    let objective = ObjectiveSpec {
        mode: TrainMode::InProcessing,
        lambda: 0.0,
        regularizer: RegularizerSpec::MinDiffMmd(MinDiffSpec::default()),
        divergence: None,
        prediction_loss: None,
    };
    fit_inprocessing(train, val, None, kind, width, &objective, config)
}

/// Train a model on prediction loss + lambda * penalty; the train table
/// carries the sensitive annotations the penalty sees. When the optimizer's
/// learning rate is unset it is tuned on the lambda=0 objective so the same
/// rate serves a whole lambda sweep.
pub fn fit_inprocessing(
    train: &DatasetTable,
    val: &DatasetTable,
    test: Option<&DatasetTable>,
    kind: ModuleKind,
    width: usize,
    objective: &ObjectiveSpec,
    config: &TrainConfig,
) -> Result<(ScoreModule, TrainResult), TrainError> {
    objective.validate()?;
    config.validate()?;
    if objective.mode != TrainMode::InProcessing {
        return Err(TrainError::InvalidConfig(
            "fit_inprocessing needs mode=in_processing".to_string(),
        ));
    }
    let plan = RunPlan {
        ctx: ObjectiveContext {
            main: train,
            main_base_scores: None,
            sens: train,
            sens_base_scores: None,
            objective,
        },
        val,
        val_base: None,
        test,
        test_base: None,
        kind,
        width,
    };
    let lr = plan.resolve_lr(config, 0.0)?;
    plan.execute(config, lr)
}

/// Train only the additive post-hoc module against a frozen base scorer.
/// `d_pp` anchors the outputs (divergence term), `d_sens` carries sensitive
/// annotations for the penalty (often the same table). Unset learning rates
/// are tuned at this objective's own lambda.
pub fn fit_frappe(
    base: &BaseScorer,
    posthoc_kind: ModuleKind,
    width: usize,
    d_pp: &DatasetTable,
    d_sens: &DatasetTable,
    val: &DatasetTable,
    test: Option<&DatasetTable>,
    objective: &ObjectiveSpec,
    config: &TrainConfig,
) -> Result<(ScoreModule, TrainResult), TrainError> {
    objective.validate()?;
    config.validate()?;
    if objective.mode != TrainMode::Frappe {
        return Err(TrainError::InvalidConfig(
            "fit_frappe needs mode=frappe".to_string(),
        ));
    }
    let base_pp = base.scores(d_pp)?;
    let base_sens = base.scores(d_sens)?;
    let base_val = base.scores(val)?;
    let base_test = test.map(|t| base.scores(t)).transpose()?;
    let plan = RunPlan {
        ctx: ObjectiveContext {
            main: d_pp,
            main_base_scores: Some(&base_pp),
            sens: d_sens,
            sens_base_scores: Some(&base_sens),
            objective,
        },
        val,
        val_base: Some(base_val),
        test,
        test_base: base_test,
        kind: posthoc_kind,
        width,
    };
    let lr = plan.resolve_lr(config, objective.lambda)?;
    plan.execute(config, lr)
}

/// Stable 64-bit mix of (seed_base, lambda index, repeat index) so sweep
/// points get the same seed no matter the execution order or worker count.
pub fn derive_seed(seed_base: u64, lambda_index: usize, repeat_index: usize) -> u64 {
    let a = splitmix64(seed_base ^ 0x6A09_E667_F3BC_C909);
    let b = splitmix64(a ^ (lambda_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    splitmix64(b ^ repeat_index as u64)
}

/// 8 log-spaced penalty weights from 0.1 to 30.
pub fn default_lambda_grid() -> Vec<f64> {
    let (lo, hi) = (0.1f64, 30.0f64);
    let k = 8;
    (0..k)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == k - 1 {
                hi
            } else {
                (lo.ln() + i as f64 * (hi.ln() - lo.ln()) / (k - 1) as f64).exp()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepProtocol {
    pub lambdas: Vec<f64>,
    pub repeats: usize,
    pub seed_base: u64,
}

/// Shared inputs for one sweep: mode comes from `objective.mode`, with
/// `base` present iff the mode is frappe. `objective.lambda` and
/// `config.seed` act as templates and are overwritten per point.
pub struct SweepJob<'a> {
    pub base: Option<&'a BaseScorer>,
    pub model_kind: ModuleKind,
    pub width: usize,
    pub train: &'a DatasetTable,
    pub sens: &'a DatasetTable,
    pub val: &'a DatasetTable,
    pub test: &'a DatasetTable,
    pub objective: ObjectiveSpec,
    pub config: TrainConfig,
}

pub struct SweepPoint {
    pub lambda_index: usize,
    pub repeat_index: usize,
    pub lambda: f64,
    pub seed: u64,
    pub outcome: Result<TradeoffPoint, TrainError>,
}

fn run_tradeoff_point(
    job: &SweepJob,
    config: &TrainConfig,
    lambda: f64,
    seed: u64,
) -> Result<TradeoffPoint, TrainError> {
    let mut objective = job.objective.clone();
    objective.lambda = lambda;
    let mut cfg = config.clone();
    cfg.seed = seed;
    let (module, result) = match job.base {
        None => fit_inprocessing(
            job.train,
            job.val,
            None,
            job.model_kind,
            job.width,
            &objective,
            &cfg,
        )?,
        Some(base) => fit_frappe(
            base,
            job.model_kind,
            job.width,
            job.train,
            job.sens,
            job.val,
            None,
            &objective,
            &cfg,
        )?,
    };
    let task = job.test.task();
    let mut scores = module.forward(job.test.features())?;
    if let Some(base) = job.base {
        for (s, b) in scores.iter_mut().zip(base.scores(job.test)?) {
            *s += b;
        }
    }
    let preds = predict_labels(&scores, task);
    let test_error = prediction_error(&preds, job.test.labels(), task)?;
    let labels_for_hgr = match task {
        TaskKind::BinaryClassification => Some(job.test.labels()),
        TaskKind::Regression => None,
    };
    // Final-parameter penalty on the training-side annotated rows.
    let sens_table = if job.base.is_some() { job.sens } else { job.train };
    let mut sens_scores = module.forward(sens_table.features())?;
    if let Some(base) = job.base {
        for (s, b) in sens_scores.iter_mut().zip(base.scores(sens_table)?) {
            *s += b;
        }
    }
    let train_penalty = penalty_with_grad(
        &objective.regularizer,
        &sens_scores,
        sens_table.labels(),
        sens_table.sensitive(),
        task,
    )?
    .0;
    Ok(TradeoffPoint {
        lambda,
        seed,
        test_error,
        fpr_gap: fpr_gap(&preds, job.test.labels(), job.test.sensitive()).ok(),
        sp_gap: sp_gap(&preds, job.test.sensitive()).ok(),
        meo: meo(&preds, job.test.labels(), job.test.sensitive()).ok(),
        hgr_inf: hgr_inf(&scores, job.test.sensitive(), labels_for_hgr, DEFAULT_HGR_BINS).ok(),
        train_penalty,
        epochs_run: result.epochs_run,
    })
}

/// Run every (lambda, repeat) cell of the protocol, farming cells out to
/// `workers` threads. Per-cell failures are recorded in the outcome so one
/// bad cell cannot sink the sweep; output order and content are independent
/// of the worker count.
pub fn sweep(
    job: &SweepJob,
    protocol: &SweepProtocol,
    workers: usize,
) -> Result<Vec<SweepPoint>, TrainError> {
    if protocol.lambdas.is_empty() {
        return Err(TrainError::InvalidConfig("empty lambda grid".to_string()));
    }
    if protocol.repeats == 0 {
        return Err(TrainError::InvalidConfig("repeats must be >= 1".to_string()));
    }
    // The template's lambda is replaced per point, so validate a copy.
    let mut template = job.objective.clone();
    template.lambda = 0.0;
    template.validate()?;
    job.config.validate()?;
    for &l in &protocol.lambdas {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "lambda grid values must be finite and nonnegative, got {l}"
            )));
        }
    }
    if job.base.is_some() != (job.objective.mode == TrainMode::Frappe) {
        return Err(TrainError::InvalidConfig(
            "base scorer must be present exactly in frappe mode".to_string(),
        ));
    }
    // Tune the learning rate once and share it across every point: at
    // lambda=0 for in-processing, at the smallest positive lambda for
    // frappe (whose lambda=0 objective has an exactly-zero gradient).
    let mut config = job.config.clone();
    if config.optimizer.lr().is_none() {
        let tune_lambda = match job.objective.mode {
            TrainMode::InProcessing => 0.0,
            TrainMode::Frappe => protocol
                .lambdas
                .iter()
                .copied()
                .filter(|&l| l > 0.0)
                .fold(f64::INFINITY, f64::min),
        };
        let tune_lambda = if tune_lambda.is_finite() { tune_lambda } else { 0.01 };
        let probe = run_lr_probe(job, &config, tune_lambda)?;
        config.optimizer = config.optimizer.with_lr(probe);
    }
    let tasks: Vec<(usize, usize, f64, u64)> = protocol
        .lambdas
        .iter()
        .enumerate()
        .flat_map(|(li, &lambda)| {
            (0..protocol.repeats)
                .map(move |ri| (li, ri, lambda, derive_seed(protocol.seed_base, li, ri)))
        })
        .collect();
    let counter = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<TradeoffPoint, TrainError>)>();
    let n_workers = workers.max(1).min(tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            let tx = tx.clone();
            let counter = &counter;
            let tasks = &tasks;
            let config = &config;
            scope.spawn(move || loop {
                let i = counter.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let (_, _, lambda, seed) = tasks[i];
                let outcome = run_tradeoff_point(job, config, lambda, seed);
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<Result<TradeoffPoint, TrainError>>> =
        (0..tasks.len()).map(|_| None).collect();
    for (i, outcome) in rx {
        slots[i] = Some(outcome);
    }
    Ok(tasks
        .iter()
        .zip(slots)
        .map(|(&(li, ri, lambda, seed), outcome)| SweepPoint {
            lambda_index: li,
            repeat_index: ri,
            lambda,
            seed,
            outcome: outcome.expect("every task slot is filled"),
        })
        .collect())
}

fn run_lr_probe(job: &SweepJob, config: &TrainConfig, lambda: f64) -> Result<f64, TrainError> {
    let mut objective = job.objective.clone();
    objective.lambda = lambda;
    match job.base {
        None => {
            let plan = RunPlan {
                ctx: ObjectiveContext {
                    main: job.train,
                    main_base_scores: None,
                    sens: job.train,
                    sens_base_scores: None,
                    objective: &objective,
                },
                val: job.val,
                val_base: None,
                test: None,
                test_base: None,
                kind: job.model_kind,
                width: job.width,
            };
            plan.resolve_lr(config, lambda)
        }
        Some(base) => {
            let base_pp = base.scores(job.train)?;
            let base_sens = base.scores(job.sens)?;
            let base_val = base.scores(job.val)?;
            let plan = RunPlan {
                ctx: ObjectiveContext {
                    main: job.train,
                    main_base_scores: Some(&base_pp),
                    sens: job.sens,
                    sens_base_scores: Some(&base_sens),
                    objective: &objective,
                },
                val: job.val,
                val_base: Some(base_val),
                test: None,
                test_base: None,
                kind: job.model_kind,
                width: job.width,
            };
            plan.resolve_lr(config, lambda)
        }
    }
}

/// Coin-flip post-processing baseline: keep the base prediction with
/// probability p, otherwise emit the favorable label.
pub fn naive_randomized_baseline(
    base_predictions: &[f64],
    p: f64,
    favorable_label: f64,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(TrainError::InvalidFraction { value: p });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(base_predictions
        .iter()
        .map(|&pred| {
            if rand::Rng::gen_bool(&mut rng, p) {
                pred
            } else {
                favorable_label
            }
        })
        .collect())
}
