//! CSV and SVG report emitters, and calibration-result files.
//!
//! CSV schemas (header row first, floats in shortest round-trip form, an
//! empty field for an absent value):
//!
//! | report      | columns |
//! |-------------|---------|
//! | sweep       | `delta,lambda_star,savings_step,savings_token,error_rate,n` |
//! | evaluation  | `n,lambda_star,delta,epsilon,budget,loss_mode,savings_step,savings_token,error_rate,mean_stop_step,mean_total_steps` |
//! | savings     | `index,savings` (per-problem) |
//! | calibration | `lambda,risk,losses,p_value,rejected` |
//! | epochs      | `epoch,mean_outer_loss` |
//! | trace       | `step,raw,smoothed,threshold,stopped,first_correct` |
//! | diagonal    | `method,delta,error_rate` |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{OrcaError, Result};
use crate::io::svg::{self, Axis, Bar, Plot, Rule, Series, PALETTE};
use crate::ltt::CalibrationResult;
use crate::meta::EpochReport;
use crate::runtime::{EvalReport, SweepRow, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = OrcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(OrcaError::input(format!("unknown report format `{other}`"))),
        }
    }
}

/// One error-vs-δ curve for the calibration diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalCurve {
    pub method: String,
    /// `(δ, mean empirical error)` pairs.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub enum Report<'a> {
    Eval(&'a EvalReport),
    Calibration(&'a CalibrationResult),
    Sweep(&'a [SweepRow]),
    Diagonal(&'a [DiagonalCurve]),
    Trace(&'a Trace),
    Epochs(&'a [EpochReport]),
}

pub fn render_report(report: Report<'_>, format: ReportFormat) -> Result<String> {
    Ok(match (report, format) {
        (Report::Eval(r), ReportFormat::Csv) => eval_csv(r),
        (Report::Eval(r), ReportFormat::Svg) => savings_histogram_svg(&r.per_problem_savings),
        (Report::Calibration(c), ReportFormat::Csv) => calibration_csv(c),
        (Report::Calibration(c), ReportFormat::Svg) => calibration_svg(c),
        (Report::Sweep(rows), ReportFormat::Csv) => sweep_csv(rows),
        (Report::Sweep(rows), ReportFormat::Svg) => sweep_svg(rows),
        (Report::Diagonal(curves), ReportFormat::Csv) => diagonal_csv(curves),
        (Report::Diagonal(curves), ReportFormat::Svg) => diagonal_svg(curves),
        (Report::Trace(t), ReportFormat::Csv) => trace_csv(t),
        (Report::Trace(t), ReportFormat::Svg) => trace_svg(t),
        (Report::Epochs(e), ReportFormat::Csv) => epochs_csv(e),
        (Report::Epochs(e), ReportFormat::Svg) => epochs_svg(e),
    })
}

pub fn emit_report(report: Report<'_>, path: &Path, format: ReportFormat) -> Result<()> {
    fs::write(path, render_report(report, format)?)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("delta,lambda_star,savings_step,savings_token,error_rate,n\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.delta,
            opt(r.lambda_star),
            r.savings_step,
            opt(r.savings_token),
            r.error_rate,
            r.n
        );
    }
    s
}

pub fn eval_csv(r: &EvalReport) -> String {
    let mut s = String::from(
        "n,lambda_star,delta,epsilon,budget,loss_mode,savings_step,savings_token,error_rate,mean_stop_step,mean_total_steps\n",
    );
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.n,
        opt(r.lambda_star),
        r.spec.delta,
        r.spec.epsilon,
        r.spec.budget,
        r.spec.loss_mode,
        r.mean_step_savings,
        opt(r.mean_token_savings),
        r.error_rate,
        r.mean_stop_step,
        r.mean_total_steps
    );
    s
}

pub fn savings_csv(per_problem: &[f64]) -> String {
    let mut s = String::from("index,savings\n");
    for (i, v) in per_problem.iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s
}

pub fn calibration_csv(c: &CalibrationResult) -> String {
    let mut s = String::from("lambda,risk,losses,p_value,rejected\n");
    for r in &c.records {
        let _ = writeln!(s, "{},{},{},{},{}", r.lambda, r.risk, r.losses, r.p_value, r.rejected);
    }
    s
}

pub fn epochs_csv(reports: &[EpochReport]) -> String {
    let mut s = String::from("epoch,mean_outer_loss\n");
    for r in reports {
        let _ = writeln!(s, "{},{}", r.epoch, r.mean_outer_loss);
    }
    s
}

pub fn trace_csv(t: &Trace) -> String {
    let mut s = String::from("step,raw,smoothed,threshold,stopped,first_correct\n");
    for r in &t.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step,
            r.raw,
            r.smoothed,
            opt(t.lambda_star),
            r.stopped,
            t.first_correct.is_some_and(|f| f == r.step)
        );
    }
    s
}

pub fn diagonal_csv(curves: &[DiagonalCurve]) -> String {
    let mut s = String::from("method,delta,error_rate\n");
    for c in curves {
        for (d, e) in &c.points {
            let _ = writeln!(s, "{},{d},{e}", c.method);
        }
    }
    s
}

/// Savings against `δ`, with a second panel of error against `δ`.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let mut savings = Plot::new("Savings vs risk tolerance", "delta", "savings");
    savings.series.push(
        Series::line("step savings", rows.iter().map(|r| (r.delta, r.savings_step)).collect(), PALETTE[0])
            .with_markers(),
    );
    let token: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.savings_token.map(|t| (r.delta, t))).collect();
    if !token.is_empty() {
        savings.series.push(Series::line("token savings", token, PALETTE[1]).dashed().with_markers());
    }
    let curve = DiagonalCurve {
        method: "empirical error".into(),
        points: rows.iter().map(|r| (r.delta, r.error_rate)).collect(),
    };
    svg::render(&[savings, diagonal_plot(std::slice::from_ref(&curve))])
}

fn diagonal_plot(curves: &[DiagonalCurve]) -> Plot {
    let hi = curves
        .iter()
        .flat_map(|c| c.points.iter().flat_map(|p| [p.0, p.1]))
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.1;
    let mut p = Plot::new("Calibration diagonal", "target risk delta", "empirical error");
    p.x_range = Some((0.0, hi));
    p.y_range = Some((0.0, hi));
    p.series.push(Series::line("y = x", vec![(0.0, 0.0), (hi, hi)], "#000000").dashed());
    for (i, c) in curves.iter().enumerate() {
        p.series
            .push(Series::line(c.method.clone(), c.points.clone(), PALETTE[i % PALETTE.len()]).with_markers());
    }
    p
}

/// Empirical error against `δ` with the `y = x` reference line.
pub fn diagonal_svg(curves: &[DiagonalCurve]) -> String {
    svg::render(&[diagonal_plot(curves)])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { (v[m - 1] + v[m]) / 2.0 } else { v[m] })
}

/// Histogram of per-problem savings; the solid rule marks the mean and the
/// dashed rule the median.
pub fn savings_histogram_svg(per_problem: &[f64]) -> String {
    const BINS: usize = 20;
    let lo = per_problem.iter().copied().fold(0.0f64, f64::min);
    let hi = per_problem.iter().copied().fold(1.0f64, f64::max);
    let width = (hi - lo) / BINS as f64;
    let mut counts = [0usize; BINS];
    for &v in per_problem {
        counts[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let mut p = Plot::new("Per-problem savings", "savings", "count");
    p.x_range = Some((lo, hi));
    p.bars = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| Bar { x0: lo + i as f64 * width, x1: lo + (i + 1) as f64 * width, height: c as f64 })
        .collect();
    if let Some(med) = median(per_problem) {
        let mean = per_problem.iter().sum::<f64>() / per_problem.len() as f64;
        p.rules.push(Rule { label: format!("mean {mean:.3}"), axis: Axis::X, at: mean, color: PALETTE[1], dashed: false });
        p.rules.push(Rule { label: format!("median {med:.3}"), axis: Axis::X, at: med, color: PALETTE[2], dashed: true });
    }
    svg::render(&[p])
}

/// Empirical risk and p-value against `λ`, with `δ`, `ε` and `λ*` rules.
pub fn calibration_svg(c: &CalibrationResult) -> String {
    let mut p = Plot::new("LTT calibration", "threshold lambda", "value");
    p.x_range = Some((0.0, 1.0));
    p.y_range = Some((0.0, 1.0));
    p.series.push(Series::line("empirical risk", c.records.iter().map(|r| (r.lambda, r.risk)).collect(), PALETTE[0]));
    p.series.push(Series::line("p-value", c.records.iter().map(|r| (r.lambda, r.p_value)).collect(), PALETTE[1]));
    p.rules.push(Rule { label: "delta".into(), axis: Axis::Y, at: c.spec.delta, color: PALETTE[0], dashed: true });
    p.rules.push(Rule { label: "epsilon".into(), axis: Axis::Y, at: c.spec.epsilon, color: PALETTE[1], dashed: true });
    if let Some(l) = c.lambda_star {
        p.rules.push(Rule { label: "lambda*".into(), axis: Axis::X, at: l, color: PALETTE[2], dashed: false });
    }
    svg::render(&[p])
}

/// Raw and smoothed scores per step, the threshold and the first-correct step.
pub fn trace_svg(t: &Trace) -> String {
    let mut p = Plot::new(format!("Trajectory {}", t.id), "step", "score");
    let last = t.records.last().map_or(1.0, |r| r.step as f64);
    p.x_range = Some((1.0, last.max(2.0)));
    p.y_range = Some((0.0, 1.0));
    p.series.push(Series::line("raw", t.records.iter().map(|r| (r.step as f64, r.raw)).collect(), PALETTE[5]));
    p.series.push(Series::line(
        format!("smoothed (w={})", t.window),
        t.records.iter().map(|r| (r.step as f64, r.smoothed)).collect(),
        PALETTE[0],
    ));
    if let Some(l) = t.lambda_star {
        p.rules.push(Rule { label: "threshold".into(), axis: Axis::Y, at: l, color: PALETTE[1], dashed: true });
    }
    if let Some(f) = t.first_correct {
        p.rules.push(Rule { label: "first correct".into(), axis: Axis::X, at: f as f64, color: PALETTE[2], dashed: true });
    }
    if let Some(stop) = t.records.iter().find(|r| r.stopped) {
        p.rules.push(Rule { label: "stop".into(), axis: Axis::X, at: stop.step as f64, color: PALETTE[3], dashed: false });
    }
    svg::render(&[p])
}

pub fn epochs_svg(reports: &[EpochReport]) -> String {
    let mut p = Plot::new("Meta-training", "epoch", "mean outer loss");
    p.series.push(
        Series::line("outer loss", reports.iter().map(|r| (r.epoch as f64, r.mean_outer_loss)).collect(), PALETTE[0])
            .with_markers(),
    );
    svg::render(&[p])
}

pub fn write_calibration(path: &Path, result: &CalibrationResult) -> Result<()> {
    let mut text = serde_json::to_string_pretty(result).map_err(|e| OrcaError::format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationResult> {
    let text = fs::read_to_string(path)?;
    let result: CalibrationResult =
        serde_json::from_str(&text).map_err(|e| OrcaError::format(format!("calibration file: {e}")))?;
    result.spec.validate().map_err(|e| OrcaError::format(e.to_string()))?;
    Ok(result)
}
