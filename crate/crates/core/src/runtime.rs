//! Deployment of the calibrated stopping rule and its metrics.
//!
//! At each step the probe scores the current embedding with its fast
//! weights; if the smoothed score reaches `λ*` the rule stops and emits that
//! step's answer without updating. Otherwise it takes one inner update with
//! the pseudo-target `C = 0` and moves on. Fast weights start from the slow
//! weights for every trajectory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OrcaError, Result};
use crate::labels::{build_labels, first_positive, LabelMode};
use crate::ltt::{calibrate_prepared, LossMode, RiskSpec, ThresholdGrid};
use crate::probe::{FastState, ProbeConfig, SlowWeights};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// 1-based emission step.
    pub stop_step: usize,
    /// The threshold was reached (as opposed to running out of steps).
    pub stopped_early: bool,
    /// Steps available to the rule: `min(budget, trajectory length)`.
    pub horizon: usize,
    pub raw_scores: Vec<f64>,
    pub smoothed_scores: Vec<f64>,
    pub emitted_label: Option<bool>,
    pub step_savings: f64,
    pub token_savings: Option<f64>,
}

impl RunOutcome {
    /// Loss bit of this run under `mode`, given the trajectory's labels.
    pub fn loss(&self, labels: &[bool], mode: LossMode) -> bool {
        loss_bit(self.stop_step, self.horizon, labels[self.stop_step - 1], mode)
    }
}

fn loss_bit(stop_step: usize, horizon: usize, correct: bool, mode: LossMode) -> bool {
    match mode {
        LossMode::EmittedIncorrect => !correct,
        LossMode::EarlyStopOnly => stop_step < horizon && !correct,
    }
}

fn check_run_inputs(slow: &SlowWeights, cfg: &ProbeConfig, traj: &Trajectory, budget: usize) -> Result<()> {
    slow.validate(cfg)?;
    if traj.is_empty() {
        return Err(OrcaError::input(format!("trajectory {} is empty", traj.id)));
    }
    if budget == 0 {
        return Err(OrcaError::input("budget must be positive"));
    }
    traj.check_dim(cfg.embed_dim)
}

/// Tokens spent up to `stop_step` and up to `horizon`.
fn token_usage(tokens: &[u32], stop_step: usize, horizon: usize) -> (u64, u64) {
    let sum = |n: usize| tokens[..n].iter().map(|&t| u64::from(t)).sum::<u64>();
    (sum(stop_step), sum(horizon))
}

fn savings_ratio(used: u64, total: u64) -> Option<f64> {
    (total > 0).then(|| 1.0 - used as f64 / total as f64)
}

fn token_savings(tokens: Option<&[u32]>, stop_step: usize, horizon: usize) -> Option<f64> {
    let (used, total) = token_usage(tokens?, stop_step, horizon);
    savings_ratio(used, total)
}

/// Runs the deployed rule over `traj`. `lambda_star = None` never stops
/// early.
pub fn run_with_stopping(
    slow: &SlowWeights,
    probe_cfg: &ProbeConfig,
    lambda_star: Option<f64>,
    traj: &Trajectory,
    budget: usize,
) -> Result<RunOutcome> {
    check_run_inputs(slow, probe_cfg, traj, budget)?;
    let horizon = budget.min(traj.len());
    let mut state = FastState::new(slow);
    let mut smoothed_scores = Vec::with_capacity(horizon);
    let mut stop = None;
    for t in 0..horizon {
        let phi = traj.embedding(t);
        let (_, smoothed) = state.score_only(slow, probe_cfg, phi)?;
        smoothed_scores.push(smoothed);
        if lambda_star.is_some_and(|l| smoothed >= l) {
            stop = Some(t + 1);
            break;
        }
        state.commit_update(slow, probe_cfg, phi, false)?;
    }
    let stop_step = stop.unwrap_or(horizon);
    Ok(RunOutcome {
        stop_step,
        stopped_early: stop.is_some(),
        horizon,
        raw_scores: state.raw_scores,
        smoothed_scores,
        emitted_label: None,
        step_savings: 1.0 - stop_step as f64 / horizon as f64,
        token_savings: token_savings(traj.token_counts().as_deref(), stop_step, horizon),
    })
}

/// Raw and smoothed scores of the deployed rule run without stopping.
///
/// Because the rule never updates at its stopping step, the scores it sees
/// up to any stop are a prefix of this path, so one path serves every
/// threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePath {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl ScorePath {
    pub fn compute(slow: &SlowWeights, cfg: &ProbeConfig, traj: &Trajectory, budget: usize) -> Result<Self> {
        check_run_inputs(slow, cfg, traj, budget)?;
        let horizon = budget.min(traj.len());
        let mut state = FastState::new(slow);
        let mut smoothed = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let phi = traj.embedding(t);
            smoothed.push(state.score_only(slow, cfg, phi)?.1);
            state.commit_update(slow, cfg, phi, false)?;
        }
        Ok(ScorePath {
            raw: state.raw_scores,
            smoothed,
        })
    }

    pub fn horizon(&self) -> usize {
        self.smoothed.len()
    }

    /// `τ_λ`: first 1-based step whose smoothed score reaches `lambda`.
    pub fn first_crossing(&self, lambda: f64) -> Option<usize> {
        self.smoothed.iter().position(|&s| s >= lambda).map(|i| i + 1)
    }

    /// Emission step under `lambda_star`, and whether the threshold fired.
    pub fn stop(&self, lambda_star: Option<f64>) -> (usize, bool) {
        match lambda_star.and_then(|l| self.first_crossing(l)) {
            Some(t) => (t, true),
            None => (self.horizon(), false),
        }
    }
}

/// One trajectory prepared for repeated threshold evaluation.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub path: ScorePath,
    pub labels: Vec<bool>,
    pub tokens: Option<Vec<u32>>,
}

impl PreparedRun {
    pub fn outcome(&self, lambda_star: Option<f64>) -> RunOutcome {
        let (stop_step, stopped_early) = self.path.stop(lambda_star);
        let horizon = self.path.horizon();
        let token_savings = token_savings(self.tokens.as_deref(), stop_step, horizon);
        RunOutcome {
            stop_step,
            stopped_early,
            horizon,
            raw_scores: self.path.raw[..stop_step].to_vec(),
            smoothed_scores: self.path.smoothed[..stop_step].to_vec(),
            emitted_label: Some(self.labels[stop_step - 1]),
            step_savings: 1.0 - stop_step as f64 / horizon as f64,
            token_savings,
        }
    }

    pub fn loss(&self, lambda_star: Option<f64>, mode: LossMode) -> bool {
        let (stop_step, _) = self.path.stop(lambda_star);
        loss_bit(stop_step, self.path.horizon(), self.labels[stop_step - 1], mode)
    }
}

/// Score paths and labels of a labeled set, computed once.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    runs: Vec<PreparedRun>,
}

impl PreparedSet {
    pub fn new(
        slow: &SlowWeights,
        cfg: &ProbeConfig,
        set: &[Trajectory],
        budget: usize,
        mode: LabelMode,
    ) -> Result<Self> {
        let runs = set
            .par_iter()
            .map(|traj| {
                Ok(PreparedRun {
                    path: ScorePath::compute(slow, cfg, traj, budget)?,
                    labels: build_labels(traj, mode)?,
                    tokens: traj.token_counts(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSet { runs })
    }

    pub fn runs(&self) -> &[PreparedRun] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn loss_count(&self, lambda_star: Option<f64>, mode: LossMode) -> usize {
        self.runs.iter().filter(|r| r.loss(lambda_star, mode)).count()
    }

    pub fn evaluate(&self, lambda_star: Option<f64>, spec: &RiskSpec) -> Result<EvalReport> {
        if self.runs.is_empty() {
            return Err(OrcaError::input("evaluation set is empty"));
        }
        let outcomes: Vec<RunOutcome> = self.runs.iter().map(|r| r.outcome(lambda_star)).collect();
        let losses: Vec<bool> = self.runs.iter().map(|r| r.loss(lambda_star, spec.loss_mode)).collect();
        let stops: Vec<usize> = outcomes.iter().map(|o| o.stop_step).collect();
        let totals: Vec<usize> = outcomes.iter().map(|o| o.horizon).collect();
        let mean_token_savings = self
            .runs
            .iter()
            .zip(&stops)
            .map(|(r, &stop)| {
                r.tokens.as_deref().map(|tok| token_usage(tok, stop, r.path.horizon()))
            })
            .collect::<Option<Vec<(u64, u64)>>>()
            .and_then(|pairs| {
                let (used, total) = pairs.iter().fold((0, 0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
                savings_ratio(used, total)
            });
        let n = outcomes.len();
        Ok(EvalReport {
            n,
            mean_step_savings: ratio_of_means_savings(&stops, &totals),
            mean_token_savings,
            error_rate: error_rate(&losses),
            per_problem_savings: outcomes.iter().map(|o| o.step_savings).collect(),
            mean_stop_step: stops.iter().sum::<usize>() as f64 / n as f64,
            mean_total_steps: totals.iter().sum::<usize>() as f64 / n as f64,
            lambda_star,
            spec: *spec,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// `1 − mean(stop step) / mean(total steps)`.
    pub mean_step_savings: f64,
    /// Same ratio over cumulative token counts; absent without token data.
    pub mean_token_savings: Option<f64>,
    pub error_rate: f64,
    pub per_problem_savings: Vec<f64>,
    pub mean_stop_step: f64,
    pub mean_total_steps: f64,
    pub lambda_star: Option<f64>,
    pub spec: RiskSpec,
}

/// Savings as a ratio of means: `1 − Σ stop / Σ total`.
pub fn ratio_of_means_savings(stops: &[usize], totals: &[usize]) -> f64 {
    let stop: usize = stops.iter().sum();
    let total: usize = totals.iter().sum();
    1.0 - stop as f64 / total as f64
}

pub fn error_rate(losses: &[bool]) -> f64 {
    losses.iter().filter(|&&l| l).count() as f64 / losses.len() as f64
}

/// Runs the rule at `lambda_star` over a labeled set and aggregates metrics.
pub fn evaluate_set(
    slow: &SlowWeights,
    probe_cfg: &ProbeConfig,
    lambda_star: Option<f64>,
    test_set: &[Trajectory],
    spec: &RiskSpec,
    mode: LabelMode,
) -> Result<EvalReport> {
    spec.validate()?;
    if test_set.is_empty() {
        return Err(OrcaError::input("evaluation set is empty"));
    }
    PreparedSet::new(slow, probe_cfg, test_set, spec.budget, mode)?.evaluate(lambda_star, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub lambda_star: Option<f64>,
    pub savings_step: f64,
    pub savings_token: Option<f64>,
    pub error_rate: f64,
    /// Evaluation-set size.
    pub n: usize,
}

/// Calibrates at each `δ` (sorted ascending) and evaluates on `test_set`.
/// `spec` supplies `ε`, the budget and the loss mode; its `δ` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn risk_savings_sweep(
    slow: &SlowWeights,
    probe_cfg: &ProbeConfig,
    cal_set: &[Trajectory],
    test_set: &[Trajectory],
    deltas: &[f64],
    grid: &ThresholdGrid,
    spec: &RiskSpec,
    mode: LabelMode,
) -> Result<Vec<SweepRow>> {
    let cal = PreparedSet::new(slow, probe_cfg, cal_set, spec.budget, mode)?;
    let test = PreparedSet::new(slow, probe_cfg, test_set, spec.budget, mode)?;
    sweep_prepared(&cal, &test, deltas, grid, spec)
}

pub fn sweep_prepared(
    cal: &PreparedSet,
    test: &PreparedSet,
    deltas: &[f64],
    grid: &ThresholdGrid,
    spec: &RiskSpec,
) -> Result<Vec<SweepRow>> {
    let mut deltas = deltas.to_vec();
    deltas.sort_by(f64::total_cmp);
    deltas
        .into_iter()
        .map(|delta| {
            let spec = RiskSpec { delta, ..*spec };
            spec.validate()?;
            let calib = calibrate_prepared(cal, grid, &spec)?;
            let report = test.evaluate(calib.lambda_star, &spec)?;
            Ok(SweepRow {
                delta,
                lambda_star: calib.lambda_star,
                savings_step: report.mean_step_savings,
                savings_token: report.mean_token_savings,
                error_rate: report.error_rate,
                n: report.n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub raw: f64,
    pub smoothed: f64,
    /// The rule stopped at this step.
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: u32,
    pub lambda_star: Option<f64>,
    pub window: usize,
    pub records: Vec<TraceRecord>,
    /// First 1-based step with label 1, when labels are known.
    pub first_correct: Option<usize>,
}

/// Per-step scores of one deployed run, for plotting.
pub fn dump_trajectory_trace(
    slow: &SlowWeights,
    probe_cfg: &ProbeConfig,
    lambda_star: Option<f64>,
    traj: &Trajectory,
    labels: Option<&[bool]>,
) -> Result<Trace> {
    let outcome = run_with_stopping(slow, probe_cfg, lambda_star, traj, traj.len())?;
    let records = outcome
        .raw_scores
        .iter()
        .zip(&outcome.smoothed_scores)
        .enumerate()
        .map(|(i, (&raw, &smoothed))| TraceRecord {
            step: i + 1,
            raw,
            smoothed,
            stopped: outcome.stopped_early && i + 1 == outcome.stop_step,
        })
        .collect();
    Ok(Trace {
        id: traj.id,
        lambda_star,
        window: probe_cfg.smoothing_window,
        records,
        first_correct: labels.and_then(first_positive),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltt::{empirical_risk, ThresholdGrid};
    use crate::probe::{trailing_mean, Projections};
    use crate::trajectory::Step;

    fn constant_traj(len: usize, labels: &[bool]) -> Trajectory {
        Trajectory::new(
            0,
            (0..len)
                .map(|t| Step {
                    correct: labels.get(t).copied(),
                    tokens: Some(10 + t as u32),
                    ..Step::new(vec![1.0])
                })
                .collect(),
        )
    }

    fn origin_probe() -> (ProbeConfig, SlowWeights) {
        let cfg = ProbeConfig::no_qk(1);
        let slow = SlowWeights::zeros(&cfg, 0.01).unwrap();
        (cfg, slow)
    }

    #[test]
    fn never_stop_runs_to_horizon() {
        let (cfg, slow) = origin_probe();
        let traj = constant_traj(12, &[]);
        let out = run_with_stopping(&slow, &cfg, None, &traj, 8).unwrap();
        assert_eq!(out.stop_step, 8);
        assert!(!out.stopped_early);
        assert_eq!(out.step_savings, 0.0);
        let out = run_with_stopping(&slow, &cfg, None, &traj, 50).unwrap();
        assert_eq!(out.stop_step, 12);
    }

    #[test]
    fn stops_on_first_step_without_update() {
        let (cfg, slow) = origin_probe();
        let traj = constant_traj(5, &[]);
        let out = run_with_stopping(&slow, &cfg, Some(0.4), &traj, 5).unwrap();
        assert_eq!(out.stop_step, 1);
        assert!(out.stopped_early);
        assert_eq!(out.raw_scores, vec![0.5]);
        assert_eq!(out.smoothed_scores, vec![0.5]);
        assert!((out.step_savings - 0.8).abs() < 1e-15);
    }

    #[test]
    fn decaying_scores_never_reach_threshold_above_start() {
        let (cfg, slow) = origin_probe();
        let traj = constant_traj(30, &[]);
        let out = run_with_stopping(&slow, &cfg, Some(0.499), &traj, 30).unwrap();
        assert_eq!(out.stop_step, 1);
        let out = run_with_stopping(&slow, &cfg, Some(0.501), &traj, 30).unwrap();
        assert_eq!(out.stop_step, 30);
        assert!(!out.stopped_early);
        assert!(out.raw_scores.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn savings_arithmetic() {
        let s = ratio_of_means_savings(&[3, 8, 10], &[10, 10, 20]);
        assert!((s - 0.475).abs() < 1e-15, "{s}");
        assert_eq!(ratio_of_means_savings(&[10, 20], &[10, 20]), 0.0);
        assert_eq!(error_rate(&[false, false, true, true]), 0.5);
    }

    #[test]
    fn prepared_paths_agree_with_literal_runs() {
        let cfg = ProbeConfig::no_qk(2).with_window(3);
        let slow = SlowWeights {
            w0: vec![0.8, -0.5],
            b0: -0.2,
            projections: Projections::Identity,
            eta: 0.3,
        };
        let traj = Trajectory::new(
            4,
            (0..15)
                .map(|t| Step {
                    correct: Some(t >= 6),
                    ..Step::new(vec![if t >= 6 { 2.0 } else { 0.1 }, (t as f64 * 0.7).sin()])
                })
                .collect(),
        );
        let labels = build_labels(&traj, LabelMode::supervised()).unwrap();
        let prepared = PreparedRun {
            path: ScorePath::compute(&slow, &cfg, &traj, 12).unwrap(),
            labels: labels.clone(),
            tokens: None,
        };
        for lambda in [None, Some(0.9), Some(0.6), Some(0.45), Some(0.3), Some(0.01)] {
            let literal = run_with_stopping(&slow, &cfg, lambda, &traj, 12).unwrap();
            let fast = prepared.outcome(lambda);
            assert_eq!(literal.stop_step, fast.stop_step);
            assert_eq!(literal.raw_scores, fast.raw_scores);
            assert_eq!(literal.smoothed_scores, fast.smoothed_scores);
            for mode in [LossMode::EmittedIncorrect, LossMode::EarlyStopOnly] {
                assert_eq!(literal.loss(&labels, mode), prepared.loss(lambda, mode));
            }
            // Minimality: nothing before the stop reached the threshold.
            if let Some(l) = lambda {
                let last = fast.smoothed_scores.len() - 1;
                assert!(fast.smoothed_scores[..last].iter().all(|&s| s < l));
            }
        }
    }

    #[test]
    fn empirical_risk_edges() {
        let (cfg, slow) = origin_probe();
        let labels_a = [false, true, true, true];
        let labels_b = [true, true, true, true];
        let set = vec![constant_traj(4, &labels_a), constant_traj(4, &labels_b)];
        let spec = RiskSpec::new(0.1, 0.05, 4).unwrap();
        let (risk, bits) = empirical_risk(&slow, 0.99, &set, &spec, &cfg, LabelMode::supervised()).unwrap();
        assert_eq!(risk, 0.0);
        assert_eq!(bits, vec![false, false]);
        let (risk, _) = empirical_risk(&slow, 1e-9, &set, &spec, &cfg, LabelMode::supervised()).unwrap();
        assert_eq!(risk, 0.5);
    }

    #[test]
    fn evaluate_reports_tokens_and_errors() {
        let (cfg, slow) = origin_probe();
        let set = vec![
            constant_traj(4, &[false, false, true, true]),
            constant_traj(4, &[true, true, true, true]),
        ];
        let spec = RiskSpec::new(0.1, 0.05, 4).unwrap();
        let report = evaluate_set(&slow, &cfg, Some(0.4), &set, &spec, LabelMode::supervised()).unwrap();
        assert_eq!(report.n, 2);
        assert!((report.mean_step_savings - 0.75).abs() < 1e-15);
        // tokens 10, 11, 12, 13: stop after the first step of each.
        let tok = report.mean_token_savings.unwrap();
        assert!((tok - (1.0 - 20.0 / 92.0)).abs() < 1e-15);
        assert_eq!(report.error_rate, 0.5);
        let none = evaluate_set(&slow, &cfg, None, &set, &spec, LabelMode::supervised()).unwrap();
        assert_eq!(none.mean_step_savings, 0.0);
        assert_eq!(none.error_rate, 0.0);
        assert!(evaluate_set(&slow, &cfg, None, &[], &spec, LabelMode::supervised()).is_err());
    }

    #[test]
    fn sweep_orders_rows_and_rejects_bad_delta() {
        let (cfg, slow) = origin_probe();
        let set: Vec<Trajectory> = (0..40).map(|_| constant_traj(5, &[true; 5])).collect();
        let spec = RiskSpec::new(0.1, 0.05, 5).unwrap();
        let grid = ThresholdGrid::default_uniform();
        let rows = risk_savings_sweep(&slow, &cfg, &set, &set, &[0.2, 0.05], &grid, &spec, LabelMode::supervised())
            .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].delta < rows[1].delta);
        assert!(risk_savings_sweep(&slow, &cfg, &set, &set, &[1.0], &grid, &spec, LabelMode::supervised()).is_err());
    }

    #[test]
    fn trace_contents() {
        let cfg = ProbeConfig::no_qk(1).with_window(4);
        let slow = SlowWeights {
            w0: vec![1.0],
            b0: -1.0,
            projections: Projections::Identity,
            eta: 0.05,
        };
        let traj = Trajectory::from_embeddings(2, (0..10).map(|t| vec![t as f64 * 0.3]).collect());
        let labels = [false, false, false, true, true, true, true, true, true, true];
        let trace = dump_trajectory_trace(&slow, &cfg, Some(0.6), &traj, Some(&labels)).unwrap();
        assert_eq!(trace.first_correct, Some(4));
        let last = trace.records.last().unwrap();
        assert!(last.stopped);
        let out = run_with_stopping(&slow, &cfg, Some(0.6), &traj, 10).unwrap();
        assert_eq!(trace.records.len(), out.stop_step);
        let raws: Vec<f64> = trace.records.iter().map(|r| r.raw).collect();
        for (i, r) in trace.records.iter().enumerate() {
            assert_eq!(r.smoothed, trailing_mean(&raws[..=i], 4));
        }
        let none = dump_trajectory_trace(&slow, &cfg, None, &traj, Some(&[false; 10])).unwrap();
        assert_eq!(none.first_correct, None);
        assert_eq!(none.records.len(), 10);
    }
}
