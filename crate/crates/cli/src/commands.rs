//! One function per subcommand. Each command loads what it needs from the
//! shared [`Ctx`], writes its artifacts, and finishes with a manifest; the
//! manifest is written even when the command then reports a non-zero
//! condition (partial sweep, failed verification), so the on-disk record
//! always matches what happened.

use std::path::PathBuf;

use serde_json::{json, Value};

use frappe_core::data::{synth_two_group, write_csv, TaskKind};
use frappe_core::glm::verify_equivalence;
use frappe_core::metrics::{
    fpr_gap, hgr_inf, meo, pareto_filter, posthoc_correlation_analysis, prediction_error, sp_gap,
    MetricKey, TradeoffPoint,
};
use frappe_core::model::predict_labels;
use frappe_core::train::{
    default_lambda_grid, derive_seed, fit_base, fit_frappe, fit_inprocessing,
    naive_randomized_baseline, sweep, SweepJob, SweepProtocol, TrainMode, TrainResult,
    DEFAULT_HGR_BINS,
};

use crate::config::{ObjectiveConfig, RunConfig, TrainSection};
use crate::outputs::{
    correlation_csv, fmt_opt, frontier_svg, summarize_frontier, tradeoff_csv, write_json,
    write_text, ManifestBuilder, BASELINE_HEADER,
};
use crate::pipeline::{base_kind_width, load_data, load_module, resolve_base, DataBundle};
use crate::CliError;

/// Everything a command needs: the parsed config, its raw JSON echo for the
/// manifest, and the resolved output directory / seed / worker count.
pub struct Ctx {
    pub config: RunConfig,
    pub config_value: Value,
    pub out_dir: PathBuf,
    pub master_seed: u64,
    pub workers: usize,
}

impl Ctx {
    fn manifest(&self, command: &'static str) -> ManifestBuilder {
        ManifestBuilder::new(
            command,
            self.config_value.clone(),
            self.master_seed,
            self.workers,
        )
    }

    fn train_section(&self) -> TrainSection {
        self.config.train.clone().unwrap_or_default()
    }

    fn objective(&self) -> Result<&ObjectiveConfig, CliError> {
        self.config.objective.as_ref().ok_or_else(|| {
            CliError::Config("this command needs an `objective` config section".to_string())
        })
    }

    fn bundle(&self) -> Result<DataBundle, CliError> {
        load_data(&self.config.data)
    }
}

fn training_details(result: &TrainResult) -> Value {
    json!({
        "learning_rate": result.learning_rate,
        "epochs_run": result.epochs_run,
        "stopped_early": result.stopped_early,
        "history": result.history,
    })
}

pub fn cmd_synth(ctx: &Ctx) -> Result<(), CliError> {
    let mut manifest = ctx.manifest("synth");
    let spec = ctx.config.data.synth.as_ref().ok_or_else(|| {
        CliError::Config("synth needs a `data.synth` config section".to_string())
    })?;
    let table = synth_two_group(spec)?;
    write_csv(&table, &ctx.out_dir.join("dataset.csv"))?;
    manifest.add_output("dataset.csv");
    write_json(&ctx.out_dir.join("synth_spec.json"), spec)?;
    manifest.add_output("synth_spec.json");
    manifest.set_details(json!({
        "rows": table.n(),
        "feature_columns": table.dim(),
        "annotated_rows": table.n_annotated(),
    }));
    manifest.write(&ctx.out_dir)?;
    Ok(())
}

pub fn cmd_train_base(ctx: &Ctx) -> Result<(), CliError> {
    let mut manifest = ctx.manifest("train-base");
    let bundle = ctx.bundle()?;
    let (kind, width) = base_kind_width(&ctx.config.base)?;
    let tcfg = ctx.train_section().train_config(ctx.master_seed);
    let (module, result) = fit_base(&bundle.train, &bundle.validation, kind, width, &tcfg)?;
    write_json(&ctx.out_dir.join("model.json"), &module)?;
    manifest.add_output("model.json");
    manifest.set_details(training_details(&result));
    manifest.write(&ctx.out_dir)?;
    Ok(())
}

/// The single lambda a `train` run uses: `objective.lambda_grid` must hold
/// exactly one value.
fn single_lambda(obj: &ObjectiveConfig) -> Result<f64, CliError> {
    match obj.lambda_grid.as_deref() {
        Some([lambda]) => Ok(*lambda),
        Some(grid) => Err(CliError::Config(format!(
            "train needs `objective.lambda_grid` with exactly one value, got {} (use `sweep` for grids)",
            grid.len()
        ))),
        None => Err(CliError::Config(
            "train needs `objective.lambda_grid` with exactly one value".to_string(),
        )),
    }
}

pub fn cmd_train(ctx: &Ctx) -> Result<(), CliError> {
    let mut manifest = ctx.manifest("train");
    let obj_cfg = ctx.objective()?;
    let lambda = single_lambda(obj_cfg)?;
    let objective = obj_cfg.objective_spec(lambda);
    let bundle = ctx.bundle()?;
    let tcfg = ctx.train_section().train_config(ctx.master_seed);
    let (module, result) = match objective.mode {
        TrainMode::InProcessing => {
            let (kind, width) = base_kind_width(&ctx.config.base)?;
            fit_inprocessing(
                &bundle.train,
                &bundle.validation,
                Some(&bundle.test),
                kind,
                width,
                &objective,
                &tcfg,
            )?
        }
        TrainMode::Frappe => {
            let base = resolve_base(&ctx.config.base)?;
            let posthoc = ctx.config.posthoc.as_ref().ok_or_else(|| {
                CliError::Config(
                    "frappe mode needs a `posthoc` config section for the module shape"
                        .to_string(),
                )
            })?;
            fit_frappe(
                &base,
                posthoc.kind,
                posthoc.width(),
                &bundle.train,
                &bundle.train,
                &bundle.validation,
                Some(&bundle.test),
                &objective,
                &tcfg,
            )?
        }
    };
    write_json(&ctx.out_dir.join("model.json"), &module)?;
    manifest.add_output("model.json");
    let mut details = training_details(&result);
    details["lambda"] = json!(lambda);
    details["mode"] = serde_json::to_value(objective.mode)
        .map_err(|e| CliError::Config(e.to_string()))?;
    manifest.set_details(details);
    manifest.write(&ctx.out_dir)?;
    Ok(())
}

fn metric_key_label(key: MetricKey) -> String {
    match serde_json::to_value(key) {
        Ok(Value::String(s)) => s,
        _ => "metric".to_string(),
    }
}

pub fn cmd_sweep(ctx: &Ctx) -> Result<(), CliError> {
    let mut manifest = ctx.manifest("sweep");
    let obj_cfg = ctx.objective()?;
    let bundle = ctx.bundle()?;
    let tsec = ctx.train_section();
    let tcfg = tsec.train_config(ctx.master_seed);
    let objective = obj_cfg.objective_spec(0.0);
    let base_scorer;
    let (base, model_kind, width) = match objective.mode {
        TrainMode::InProcessing => {
            let (kind, width) = base_kind_width(&ctx.config.base)?;
            (None, kind, width)
        }
        TrainMode::Frappe => {
            base_scorer = resolve_base(&ctx.config.base)?;
            let posthoc = ctx.config.posthoc.as_ref().ok_or_else(|| {
                CliError::Config(
                    "frappe mode needs a `posthoc` config section for the module shape"
                        .to_string(),
                )
            })?;
            (Some(&base_scorer), posthoc.kind, posthoc.width())
        }
    };
    let job = SweepJob {
        base,
        model_kind,
        width,
        train: &bundle.train,
        sens: &bundle.train,
        val: &bundle.validation,
        test: &bundle.test,
        objective,
        config: tcfg,
    };
    let protocol = SweepProtocol {
        lambdas: obj_cfg
            .lambda_grid
            .clone()
            .unwrap_or_else(default_lambda_grid),
        repeats: tsec.repeats,
        seed_base: ctx.master_seed,
    };
    let points = sweep(&job, &protocol, ctx.workers)?;

    let mut successes: Vec<TradeoffPoint> = Vec::new();
    let mut failures: Vec<Value> = Vec::new();
    for point in &points {
        match &point.outcome {
            Ok(p) => successes.push(p.clone()),
            Err(e) => failures.push(json!({
                "lambda_index": point.lambda_index,
                "repeat_index": point.repeat_index,
                "lambda": point.lambda,
                "seed": point.seed,
                "error": e.to_string(),
            })),
        }
    }

    write_text(&ctx.out_dir.join("tradeoff.csv"), &tradeoff_csv(&successes))?;
    manifest.add_output("tradeoff.csv");
    let pareto = pareto_filter(
        &successes,
        MetricKey::TestError,
        ctx.config.output.pareto_metric,
    );
    write_text(&ctx.out_dir.join("pareto.csv"), &tradeoff_csv(&pareto))?;
    manifest.add_output("pareto.csv");
    if ctx.config.output.plot {
        let gap_key = ctx.config.output.pareto_metric;
        let frontier = summarize_frontier(&successes, |p| gap_key.get(p));
        let svg = frontier_svg(&frontier, &metric_key_label(gap_key));
        write_text(&ctx.out_dir.join("frontier.svg"), &svg)?;
        manifest.add_output("frontier.svg");
    }
    let n_failed = failures.len();
    manifest.set_details(json!({
        "points_total": points.len(),
        "points_succeeded": successes.len(),
        "points_failed": n_failed,
        "failures": failures,
        "lambda_grid": protocol.lambdas,
        "repeats": protocol.repeats,
    }));
    manifest.write(&ctx.out_dir)?;
    if n_failed > 0 {
        return Err(CliError::Partial(format!(
            "{n_failed} of {} sweep points failed; wrote the {} that succeeded \
             (see manifest.json for per-point errors)",
            points.len(),
            successes.len()
        )));
    }
    Ok(())
}

const EVAL_METRICS: [&str; 5] = ["test_error", "fpr_gap", "sp_gap", "meo", "hgr_inf"];

pub fn cmd_eval(ctx: &Ctx) -> Result<(), CliError> {
    let mut manifest = ctx.manifest("eval");
    let eval_cfg = ctx.config.eval.as_ref().ok_or_else(|| {
        CliError::Config("eval needs an `eval` config section".to_string())
    })?;
    for name in &eval_cfg.metrics {
        if !EVAL_METRICS.contains(&name.as_str()) {
            return Err(CliError::Config(format!(
                "unknown metric {name:?}; valid metrics are {}",
                EVAL_METRICS.join(", ")
            )));
        }
    }
    let bundle = ctx.bundle()?;
    let table = bundle.eval_table();
    let module = load_module(&eval_cfg.model_file)?;
    let mut scores = module.forward(table.features())?;
    if eval_cfg.with_base_column {
        let base = table.base_scores().ok_or_else(|| {
            CliError::Config(
                "eval.with_base_column needs a base-score column in the dataset schema"
                    .to_string(),
            )
        })?;
        for (s, b) in scores.iter_mut().zip(base) {
            *s += b;
        }
    }
    let preds = predict_labels(&scores, table.task());
    let labels_for_hgr = match table.task() {
        TaskKind::BinaryClassification => Some(table.labels()),
        TaskKind::Regression => None,
    };
    let mut values = serde_json::Map::new();
    for name in &eval_cfg.metrics {
        let value: Option<f64> = match name.as_str() {
            "test_error" => Some(prediction_error(&preds, table.labels(), table.task())?),
            "fpr_gap" => fpr_gap(&preds, table.labels(), table.sensitive()).ok(),
            "sp_gap" => sp_gap(&preds, table.sensitive()).ok(),
            "meo" => meo(&preds, table.labels(), table.sensitive()).ok(),
            "hgr_inf" => {
                hgr_inf(&scores, table.sensitive(), labels_for_hgr, DEFAULT_HGR_BINS).ok()
            }
            _ => unreachable!("metric names validated above"),
        };
        values.insert(name.clone(), json!(value));
    }
    let metrics_value = Value::Object(values);
    write_json(&ctx.out_dir.join("metrics.json"), &metrics_value)?;
    manifest.add_output("metrics.json");
    manifest.set_details(json!({
        "rows_scored": table.n(),
        "metrics": metrics_value,
    }));
    manifest.write(&ctx.out_dir)?;
    Ok(())
}

pub fn cmd_verify_glm(ctx: &Ctx) -> Result<(), CliError> {
    let mut manifest = ctx.manifest("verify-glm");
    let verify = ctx.config.verify.as_ref().ok_or_else(|| {
        CliError::Config("verify-glm needs a `verify` config section".to_string())
    })?;
    let regularizer = verify
        .regularizer
        .clone()
        .or_else(|| ctx.config.objective.as_ref().map(|o| o.regularizer.clone()))
        .ok_or_else(|| {
            CliError::Config(
                "verify-glm needs a regularizer (set `verify.regularizer` or \
                 `objective.regularizer`)"
                    .to_string(),
            )
        })?;
    let bundle = ctx.bundle()?;
    let report = verify_equivalence(
        &bundle.full,
        verify.lambda,
        &regularizer,
        verify.family,
        verify.n_probe,
        verify.radius,
        ctx.master_seed,
    )?;
    write_json(&ctx.out_dir.join("report.json"), &report)?;
    manifest.add_output("report.json");
    let c_gap = (report.c_empirical - report.c_closed_form).abs();
    let pass = report.max_constant_deviation <= verify.tolerance && c_gap <= verify.tolerance;
    manifest.set_details(json!({
        "report": report,
        "tolerance": verify.tolerance,
        "pass": pass,
    }));
    manifest.write(&ctx.out_dir)?;
    println!(
        "verify-glm: max_constant_deviation={:.3e} |c_empirical-c_closed_form|={:.3e} \
         argmin_distance={:.3e} tolerance={:.3e} -> {}",
        report.max_constant_deviation,
        c_gap,
        report.argmin_distance,
        verify.tolerance,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "objective difference is not constant within tolerance {:.3e} \
             (max deviation {:.3e}, constant mismatch {:.3e})",
            verify.tolerance, report.max_constant_deviation, c_gap
        )))
    }
}

pub fn cmd_analyze_posthoc(ctx: &Ctx) -> Result<(), CliError> {
    let mut manifest = ctx.manifest("analyze-posthoc");
    let analyze = ctx.config.analyze.as_ref().ok_or_else(|| {
        CliError::Config("analyze-posthoc needs an `analyze` config section".to_string())
    })?;
    let bundle = ctx.bundle()?;
    let module = load_module(&analyze.model_file)?;
    let rows = posthoc_correlation_analysis(&module, bundle.eval_table())?;
    write_text(
        &ctx.out_dir.join("posthoc_correlation.csv"),
        &correlation_csv(&rows),
    )?;
    manifest.add_output("posthoc_correlation.csv");
    let max_assoc = rows
        .iter()
        .filter(|r| !r.degenerate)
        .map(|r| r.abs_spearman)
        .fold(f64::NEG_INFINITY, f64::max);
    manifest.set_details(json!({
        "rows": rows.len(),
        "max_abs_spearman": if max_assoc.is_finite() { json!(max_assoc) } else { Value::Null },
    }));
    manifest.write(&ctx.out_dir)?;
    Ok(())
}

pub fn cmd_baseline_naive(ctx: &Ctx) -> Result<(), CliError> {
    let mut manifest = ctx.manifest("baseline-naive");
    let baseline = ctx.config.baseline.as_ref().ok_or_else(|| {
        CliError::Config("baseline-naive needs a `baseline` config section".to_string())
    })?;
    if baseline.p_grid.is_empty() {
        return Err(CliError::Config(
            "baseline.p_grid must not be empty".to_string(),
        ));
    }
    let bundle = ctx.bundle()?;
    let table = bundle.eval_table();
    let base = resolve_base(&ctx.config.base)?;
    let base_preds = predict_labels(&base.scores(table)?, table.task());
    let mut csv = String::from(BASELINE_HEADER);
    csv.push('\n');
    for (i, &p) in baseline.p_grid.iter().enumerate() {
        let preds = naive_randomized_baseline(
            &base_preds,
            p,
            baseline.favorable_label,
            derive_seed(ctx.master_seed, i, 0),
        )?;
        let err = prediction_error(&preds, table.labels(), table.task())?;
        let row = [
            p.to_string(),
            err.to_string(),
            fmt_opt(fpr_gap(&preds, table.labels(), table.sensitive()).ok()),
            fmt_opt(sp_gap(&preds, table.sensitive()).ok()),
            fmt_opt(meo(&preds, table.labels(), table.sensitive()).ok()),
        ];
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_text(&ctx.out_dir.join("baseline.csv"), &csv)?;
    manifest.add_output("baseline.csv");
    manifest.set_details(json!({
        "p_grid": baseline.p_grid,
        "favorable_label": baseline.favorable_label,
        "rows_scored": table.n(),
    }));
    manifest.write(&ctx.out_dir)?;
    Ok(())
}
