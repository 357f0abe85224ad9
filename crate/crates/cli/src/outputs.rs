//! Output files: result CSVs, manifests, and the optional frontier plot.
//! Every value is written with Rust's shortest-round-trip float formatting,
//! so identical runs produce identical bytes; run-dependent timing lives in
//! exactly one manifest field.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use frappe_core::metrics::{CorrelationRow, TradeoffPoint};

use crate::CliError;

pub const TRADEOFF_HEADER: &str =
    "lambda,seed,test_error,fpr_gap,sp_gap,meo,hgr_inf,train_penalty,epochs_run";
pub const CORRELATION_HEADER: &str = "feature,sensitive_value,abs_spearman,degenerate";
pub const BASELINE_HEADER: &str = "p,test_error,fpr_gap,sp_gap,meo";

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn tradeoff_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from(TRADEOFF_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.lambda,
            p.seed,
            p.test_error,
            fmt_opt(p.fpr_gap),
            fmt_opt(p.sp_gap),
            fmt_opt(p.meo),
            fmt_opt(p.hgr_inf),
            p.train_penalty,
            p.epochs_run
        );
    }
    out
}

pub fn correlation_csv(rows: &[CorrelationRow]) -> String {
    let mut out = String::from(CORRELATION_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.feature, r.sensitive_value, r.abs_spearman, r.degenerate
        );
    }
    out
}

/// One manifest per command: config echo, seeds, outputs, command-specific
/// details, and a single `timing` field holding everything that varies
/// between otherwise identical runs.
pub struct ManifestBuilder {
    command: &'static str,
    config: Value,
    master_seed: u64,
    workers: usize,
    outputs: Vec<String>,
    details: Value,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &'static str, config: Value, master_seed: u64, workers: usize) -> Self {
        ManifestBuilder {
            command,
            config,
            master_seed,
            workers,
            outputs: Vec::new(),
            details: Value::Null,
            started: Instant::now(),
        }
    }

    pub fn add_output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn set_details(&mut self, details: Value) {
        self.details = details;
    }

    pub fn write(self, dir: &Path) -> Result<PathBuf, CliError> {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let manifest = json!({
            "command": self.command,
            "config": self.config,
            "master_seed": self.master_seed,
            "workers": self.workers,
            "outputs": self.outputs,
            "details": self.details,
            "timing": {
                "timestamp_unix": timestamp,
                "wall_time_secs": self.started.elapsed().as_secs_f64(),
            },
        });
        let path = dir.join("manifest.json");
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

/// Per-lambda frontier summary used by the plot: mean and standard error of
/// the error and fairness-gap coordinates over a sweep's repeats.
pub struct FrontierPoint {
    pub lambda: f64,
    pub mean_error: f64,
    pub se_error: f64,
    pub mean_gap: f64,
    pub se_gap: f64,
}

pub fn summarize_frontier(
    points: &[TradeoffPoint],
    gap_of: impl Fn(&TradeoffPoint) -> Option<f64>,
) -> Vec<FrontierPoint> {
    let mut lambdas: Vec<f64> = points.iter().map(|p| p.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut out = Vec::new();
    for lambda in lambdas {
        let errs: Vec<f64> = points
            .iter()
            .filter(|p| p.lambda == lambda)
            .map(|p| p.test_error)
            .collect();
        let gaps: Vec<f64> = points
            .iter()
            .filter(|p| p.lambda == lambda)
            .filter_map(&gap_of)
            .collect();
        if errs.is_empty() || gaps.is_empty() {
            continue;
        }
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (mean, (var / n).sqrt())
        };
        let (mean_error, se_error) = stats(&errs);
        let (mean_gap, se_gap) = stats(&gaps);
        out.push(FrontierPoint {
            lambda,
            mean_error,
            se_error,
            mean_gap,
            se_gap,
        });
    }
    out
}

/// Hand-rolled static scatter: test error on x, fairness gap on y, one
/// point per lambda with standard-error bars.
pub fn frontier_svg(points: &[FrontierPoint], gap_label: &str) -> String {
    let (w, h) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 20.0, 50.0);
    let span = |lo: f64, hi: f64| {
        let pad = ((hi - lo) * 0.1).max(1e-6);
        (lo - pad, hi + pad)
    };
    let (x_lo, x_hi) = span(
        points
            .iter()
            .map(|p| p.mean_error - p.se_error)
            .fold(f64::INFINITY, f64::min),
        points
            .iter()
            .map(|p| p.mean_error + p.se_error)
            .fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = span(
        points
            .iter()
            .map(|p| p.mean_gap - p.se_gap)
            .fold(f64::INFINITY, f64::min),
        points
            .iter()
            .map(|p| p.mean_gap + p.se_gap)
            .fold(f64::NEG_INFINITY, f64::max),
    );
    let px = |x: f64| ml + (x - x_lo) / (x_hi - x_lo) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y_lo) / (y_hi - y_lo) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "  <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "  <line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        h - mb,
        w - mr
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>",
        h - mb
    );
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">test error</text>",
        (ml + w - mr) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        "  <text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" transform=\"rotate(-90 16 {})\">{gap_label}</text>",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    );
    for tick in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * tick as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * tick as f64 / 4.0;
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>",
            px(fx),
            h - mb + 16.0,
            fx
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>",
            ml - 6.0,
            py(fy) + 4.0,
            fy
        );
    }
    for p in points {
        let (cx, cy) = (px(p.mean_error), py(p.mean_gap));
        let _ = writeln!(
            s,
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"steelblue\"/>",
            px(p.mean_error - p.se_error),
            cy,
            px(p.mean_error + p.se_error),
            cy
        );
        let _ = writeln!(
            s,
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"steelblue\"/>",
            cx,
            py(p.mean_gap - p.se_gap),
            cx,
            py(p.mean_gap + p.se_gap)
        );
        let _ = writeln!(
            s,
            "  <circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"4\" fill=\"steelblue\"/>",
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">λ={}</text>",
            cx + 6.0,
            cy - 6.0,
            p.lambda
        );
    }
    s.push_str("</svg>\n");
    s
}
