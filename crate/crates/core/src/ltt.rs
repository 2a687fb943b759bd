//! Learn-then-Test calibration of the stopping threshold.
//!
//! For each threshold `λ_j` of a grid ordered from conservative to
//! aggressive, the deployed procedure is run on the calibration set and the
//! null `H_j: risk(λ_j) ≥ δ` is tested with the exact binomial tail p-value
//! `P(Binom(n, δ) ≤ k_j)`, where `k_j` is the number of losses. Fixed-sequence
//! testing rejects nulls in grid order at full level `ε` and stops at the
//! first acceptance; the selected `λ*` is the last rejected threshold. With
//! exchangeable calibration and test instances, the deployed rule then has
//! risk at most `δ` with probability at least `1 − ε`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OrcaError, Result};
use crate::labels::LabelMode;
use crate::probe::{ProbeConfig, SlowWeights};
use crate::runtime::{run_with_stopping, PreparedSet};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Loss 1 iff the label at the emission step is 0, budget exhaustion
    /// included.
    EmittedIncorrect,
    /// Loss 1 iff the rule stopped strictly before the horizon at a step
    /// with label 0.
    EarlyStopOnly,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::EmittedIncorrect => "emitted_incorrect",
            LossMode::EarlyStopOnly => "early_stop_only",
        })
    }
}

impl FromStr for LossMode {
    type Err = OrcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "emitted_incorrect" => Ok(LossMode::EmittedIncorrect),
            "early_stop_only" => Ok(LossMode::EarlyStopOnly),
            other => Err(OrcaError::input(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    /// Target risk bound.
    pub delta: f64,
    /// Failure probability of the guarantee.
    pub epsilon: f64,
    /// Maximum number of steps run per instance.
    pub budget: usize,
    pub loss_mode: LossMode,
}

impl RiskSpec {
    pub fn new(delta: f64, epsilon: f64, budget: usize) -> Result<Self> {
        let spec = RiskSpec {
            delta,
            epsilon,
            budget,
            loss_mode: LossMode::EmittedIncorrect,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_loss_mode(mut self, mode: LossMode) -> Self {
        self.loss_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(OrcaError::input(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(OrcaError::input(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.budget == 0 {
            return Err(OrcaError::input("budget must be positive"));
        }
        Ok(())
    }
}

/// Strictly decreasing thresholds in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    thresholds: Vec<f64>,
}

impl ThresholdGrid {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(OrcaError::input("threshold grid is empty"));
        }
        if let Some(bad) = thresholds.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
            return Err(OrcaError::input(format!("threshold {bad} outside (0, 1)")));
        }
        if thresholds.windows(2).any(|w| w[1] >= w[0]) {
            return Err(OrcaError::input("threshold grid must be strictly decreasing"));
        }
        Ok(ThresholdGrid { thresholds })
    }

    /// `m` evenly spaced thresholds from `hi` down to `lo`.
    pub fn uniform(m: usize, lo: f64, hi: f64) -> Result<Self> {
        if m == 1 {
            return Self::new(vec![hi]);
        }
        let span = hi - lo;
        let last = (m - 1) as f64;
        Self::new((0..m).map(|i| lo + span * ((m - 1 - i) as f64) / last).collect())
    }

    /// Default grid: 99 thresholds 0.99, 0.98, …, 0.01.
    pub fn default_uniform() -> Self {
        Self::new((1..=99).rev().map(|i| i as f64 / 100.0).collect())
            .expect("static grid is valid")
    }

    /// Grid from quantiles of observed scores at levels `(m − i)/(m + 1)`,
    /// deduplicated and kept inside `(0, 1)`.
    pub fn from_scores(scores: &[f64], m: usize) -> Result<Self> {
        if scores.is_empty() || m == 0 {
            return Err(OrcaError::input("quantile grid needs scores and m ≥ 1"));
        }
        let mut sorted: Vec<f64> = scores.iter().copied().filter(|x| x.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut out: Vec<f64> = Vec::with_capacity(m);
        for i in 0..m {
            let level = (m - i) as f64 / (m + 1) as f64;
            let idx = ((level * n as f64).ceil() as usize).clamp(1, n) - 1;
            let v = sorted[idx].clamp(1e-9, 1.0 - 1e-9);
            if out.last().is_none_or(|&last| v < last) {
                out.push(v);
            }
        }
        Self::new(out)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub lambda: f64,
    pub risk: f64,
    /// Number of calibration instances with loss 1.
    pub losses: usize,
    pub p_value: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Most aggressive certified threshold; `None` means run to budget.
    pub lambda_star: Option<f64>,
    pub records: Vec<ThresholdRecord>,
    pub n: usize,
    pub spec: RiskSpec,
}

impl CalibrationResult {
    pub fn rejected_count(&self) -> usize {
        self.records.iter().take_while(|r| r.rejected).count()
    }
}

/// Mean loss of the deployed rule at `lambda` over `cal_set`, plus the
/// per-instance loss bits.
pub fn empirical_risk(
    slow: &SlowWeights,
    lambda: f64,
    cal_set: &[Trajectory],
    spec: &RiskSpec,
    probe_cfg: &ProbeConfig,
    mode: LabelMode,
) -> Result<(f64, Vec<bool>)> {
    spec.validate()?;
    if cal_set.is_empty() {
        return Err(OrcaError::input("calibration set is empty"));
    }
    let bits = cal_set
        .iter()
        .map(|traj| {
            let labels = crate::labels::build_labels(traj, mode)?;
            let outcome = run_with_stopping(slow, probe_cfg, Some(lambda), traj, spec.budget)?;
            Ok(outcome.loss(&labels, spec.loss_mode))
        })
        .collect::<Result<Vec<bool>>>()?;
    let risk = bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
    Ok((risk, bits))
}

/// Exact lower binomial tail `P(Binom(n, δ) ≤ k)`, summed in log space.
pub fn binom_tail_pvalue(n: usize, delta: f64, k: usize) -> Result<f64> {
    if n == 0 {
        return Err(OrcaError::input("binomial tail needs n ≥ 1"));
    }
    if k > n {
        return Err(OrcaError::input(format!("loss count {k} exceeds n = {n}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(OrcaError::input(format!("delta must lie in (0, 1), got {delta}")));
    }
    if k == n {
        return Ok(1.0);
    }
    let ln_p = delta.ln();
    let ln_q = (-delta).ln_1p();
    let mut log_terms = Vec::with_capacity(k + 1);
    let mut ln_choose = 0.0;
    for i in 0..=k {
        log_terms.push(ln_choose + i as f64 * ln_p + (n - i) as f64 * ln_q);
        ln_choose += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
    Ok((max + sum.ln()).exp().min(1.0))
}

/// Fixed-sequence testing: index of the last hypothesis in the leading run
/// of p-values `≤ epsilon`, or `None` if the first test fails.
pub fn fixed_sequence_select(pvalues: &[f64], epsilon: f64) -> Result<Option<usize>> {
    if pvalues.is_empty() {
        return Err(OrcaError::input("no p-values to test"));
    }
    let rejected = pvalues.iter().take_while(|&&p| p <= epsilon).count();
    Ok(rejected.checked_sub(1))
}

/// Selects `λ*` on `cal_set`. The calibration set must be disjoint from the
/// data the slow weights were trained on.
pub fn calibrate(
    slow: &SlowWeights,
    cal_set: &[Trajectory],
    grid: &ThresholdGrid,
    spec: &RiskSpec,
    probe_cfg: &ProbeConfig,
    mode: LabelMode,
) -> Result<CalibrationResult> {
    spec.validate()?;
    let prepared = PreparedSet::new(slow, probe_cfg, cal_set, spec.budget, mode)?;
    calibrate_prepared(&prepared, grid, spec)
}

/// [`calibrate`] over score paths computed once.
pub fn calibrate_prepared(
    prepared: &PreparedSet,
    grid: &ThresholdGrid,
    spec: &RiskSpec,
) -> Result<CalibrationResult> {
    spec.validate()?;
    let n = prepared.len();
    if n == 0 {
        return Err(OrcaError::input("calibration set is empty"));
    }
    let mut records = Vec::with_capacity(grid.len());
    for &lambda in grid.thresholds() {
        let losses = prepared.loss_count(Some(lambda), spec.loss_mode);
        records.push(ThresholdRecord {
            lambda,
            risk: losses as f64 / n as f64,
            losses,
            p_value: binom_tail_pvalue(n, spec.delta, losses)?,
            rejected: false,
        });
    }
    let pvalues: Vec<f64> = records.iter().map(|r| r.p_value).collect();
    let selected = fixed_sequence_select(&pvalues, spec.epsilon)?;
    if let Some(last) = selected {
        records[..=last].iter_mut().for_each(|r| r.rejected = true);
    }
    Ok(CalibrationResult {
        lambda_star: selected.map(|j| records[j].lambda),
        records,
        n,
        spec: *spec,
    })
}

/// Split-conformal quantile: the order statistic of rank
/// `⌈(n + 1)(1 − ε)⌉`, clipped to `n`.
pub fn conformal_quantile(scores: &[f64], epsilon: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(OrcaError::input("conformal quantile needs at least one score"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(OrcaError::input(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Guard against 9.000000000000002-style products rounding one rank up.
    let rank = (((n + 1) as f64 * (1.0 - epsilon)) - 1e-9).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct pmf summation with exact integer binomial coefficients.
    fn brute_tail(n: usize, delta: f64, k: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..=k {
            let mut c: u128 = 1;
            for j in 0..i {
                c = c * (n - j) as u128 / (j + 1) as u128;
            }
            total += c as f64 * delta.powi(i as i32) * (1.0 - delta).powi((n - i) as i32);
        }
        total
    }

    #[test]
    fn pvalue_worked_examples() {
        assert_eq!(binom_tail_pvalue(10, 0.5, 10).unwrap(), 1.0);
        let p = binom_tail_pvalue(10, 0.5, 0).unwrap();
        assert!((p - 2f64.powi(-10)).abs() < 1e-16);
        // mpmath: 0.9^29 = 0.047101286972462448...
        let p = binom_tail_pvalue(29, 0.1, 0).unwrap();
        assert!((p - 0.047_101_286_972_462_45).abs() < 1e-15, "{p}");
        // mpmath: P(Binom(50, 0.1) ≤ 3) = 0.25029390595330767...
        let p = binom_tail_pvalue(50, 0.1, 3).unwrap();
        assert!((p - 0.250_293_905_953_307_7).abs() < 1e-12);
        assert!((p - brute_tail(50, 0.1, 3)).abs() < 1e-12);
    }

    #[test]
    fn pvalue_matches_brute_force_grid() {
        for &delta in &[0.05, 0.1, 0.5] {
            for n in 1..=50 {
                for k in 0..=n {
                    let p = binom_tail_pvalue(n, delta, k).unwrap();
                    assert!((p - brute_tail(n, delta, k)).abs() < 1e-12, "n={n} k={k} δ={delta}");
                }
            }
        }
    }

    #[test]
    fn pvalue_rejects_bad_input() {
        assert!(binom_tail_pvalue(5, 0.1, 6).is_err());
        assert!(binom_tail_pvalue(5, 0.0, 1).is_err());
        assert!(binom_tail_pvalue(0, 0.1, 0).is_err());
    }

    #[test]
    fn fixed_sequence_examples() {
        assert_eq!(fixed_sequence_select(&[0.01, 0.04, 0.20, 0.01], 0.05).unwrap(), Some(1));
        assert_eq!(fixed_sequence_select(&[0.30, 0.01], 0.05).unwrap(), None);
        assert_eq!(fixed_sequence_select(&[0.001], 0.05).unwrap(), Some(0));
        assert!(fixed_sequence_select(&[], 0.05).is_err());
    }

    #[test]
    fn conformal_quantile_examples() {
        assert_eq!(conformal_quantile(&[4.0, 2.0, 3.0, 1.0], 0.5).unwrap(), 3.0);
        assert_eq!(conformal_quantile(&[0.7], 0.2).unwrap(), 0.7);
        let tenths: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(conformal_quantile(&tenths, 0.1).unwrap(), 1.0);
        assert!(conformal_quantile(&tenths, 1.0).is_err());
        assert!(conformal_quantile(&[], 0.1).is_err());
    }

    #[test]
    fn grids() {
        let g = ThresholdGrid::default_uniform();
        assert_eq!(g.len(), 99);
        assert_eq!(g.thresholds()[0], 0.99);
        assert_eq!(g.thresholds()[98], 0.01);
        let u = ThresholdGrid::uniform(5, 0.1, 0.9).unwrap();
        assert!((u.thresholds()[2] - 0.5).abs() < 1e-15);
        assert!(ThresholdGrid::new(vec![0.5, 0.5]).is_err());
        assert!(ThresholdGrid::new(vec![0.4, 0.6]).is_err());
        assert!(ThresholdGrid::new(vec![1.0]).is_err());
        let q = ThresholdGrid::from_scores(&[0.1, 0.2, 0.2, 0.3, 0.9], 10).unwrap();
        assert!(q.thresholds().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn risk_spec_bounds() {
        assert!(RiskSpec::new(0.1, 0.05, 10).is_ok());
        assert!(RiskSpec::new(1.0, 0.05, 10).is_err());
        assert!(RiskSpec::new(0.1, 0.0, 10).is_err());
        assert!(RiskSpec::new(0.1, 0.05, 0).is_err());
    }

    proptest! {
        #[test]
        fn pvalue_monotone(n in 1usize..200, k in 0usize..200, delta in 0.01f64..0.5) {
            let k = k.min(n);
            let p = binom_tail_pvalue(n, delta, k).unwrap();
            prop_assert!(p > 0.0 && p <= 1.0);
            if k < n {
                // Near 1 the log-space sum is only accurate to a few ulps.
                prop_assert!(binom_tail_pvalue(n, delta, k + 1).unwrap() >= p - 1e-12);
                let wider = binom_tail_pvalue(n + 1, delta, k).unwrap();
                prop_assert!(wider <= p + 1e-12);
                if p < 0.99 {
                    prop_assert!(wider < p);
                }
            }
        }

        #[test]
        fn fst_prefix(ps in prop::collection::vec(0.0f64..0.2, 1..30), eps in 0.01f64..0.1) {
            match fixed_sequence_select(&ps, eps).unwrap() {
                None => prop_assert!(ps[0] > eps),
                Some(j) => {
                    prop_assert!(ps[..=j].iter().all(|&p| p <= eps));
                    if j + 1 < ps.len() {
                        prop_assert!(ps[j + 1] > eps);
                    }
                }
            }
        }
    }
}
