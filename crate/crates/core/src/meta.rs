//! Outer-loop meta-training.
//!
//! The outer loss of one trajectory is the summed Brier loss of the raw
//! scores produced by the unrolled inner loop,
//!
//! ```text
//! L = Σ_t (s_t − y_t)²,   s_t = σ(w_{t−1}·Q φ_t + b_{t−1})
//! w_t = w_{t−1} − η g_t K φ_t,   b_t = b_{t−1} − η g_t
//! g_t = 2(a_t − c_t) a_t (1 − a_t),   a_t = σ(w_{t−1}·K φ_t + b_{t−1})
//! ```
//!
//! where `y_t` are the true labels and `c_t` the inner targets (zero under
//! the default pseudo-target policy). [`unroll_outer_loss`] records every
//! intermediate on a [`Tape`]; [`outer_gradients`] replays it backwards and
//! returns exact derivatives with respect to the slow weights, in the flat
//! layout of [`SlowWeights::to_flat`].

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OrcaError, Result};
use crate::labels::{build_labels, LabelMode};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::probe::{brier_logit_grad, sigmoid, ProbeConfig, Projections, SlowWeights, Variant};
use crate::trajectory::Trajectory;

/// Floor applied to a learnable inner rate after each optimizer step.
pub const MIN_INNER_LR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerLabelPolicy {
    /// `C_t = 0` in every inner update, as at deployment.
    PseudoZero,
    /// Inner updates see the true step labels.
    TrueLabels,
}

impl fmt::Display for InnerLabelPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InnerLabelPolicy::PseudoZero => "pseudo_zero",
            InnerLabelPolicy::TrueLabels => "true_labels",
        })
    }
}

impl FromStr for InnerLabelPolicy {
    type Err = OrcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "pseudo_zero" => Ok(InnerLabelPolicy::PseudoZero),
            "true_labels" => Ok(InnerLabelPolicy::TrueLabels),
            other => Err(OrcaError::input(format!("unknown inner label policy `{other}`"))),
        }
    }
}

/// How far back gradients flow through the chain of inner updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    Full,
    /// Keep only the most recent `k` inner updates behind each score.
    Steps(usize),
}

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truncation::Full => f.write_str("full"),
            Truncation::Steps(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for Truncation {
    type Err = OrcaError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Truncation::Full);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(Truncation::Steps(k)),
            _ => Err(OrcaError::input(format!(
                "truncation must be `full` or a positive integer, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub outer_lr: f64,
    /// Global-norm clipping threshold.
    pub grad_clip: f64,
    pub epochs: usize,
    pub truncation: Truncation,
    pub inner_label_policy: InnerLabelPolicy,
    pub seed: u64,
    /// Trajectories per optimizer step; gradients are averaged.
    pub batch: usize,
    /// Initial inner rate `η`.
    pub inner_lr: f64,
}

impl TrainConfig {
    /// Defaults: Adam at 1e-3, clipping at 1.0, η = 0.01, 20 epochs for
    /// no-QK and 10 for the projecting variants.
    pub fn for_variant(variant: Variant) -> Self {
        TrainConfig {
            outer_lr: 1e-3,
            grad_clip: 1.0,
            epochs: match variant {
                Variant::NoQk => 20,
                Variant::Qk | Variant::SharedQk => 10,
            },
            truncation: Truncation::Full,
            inner_label_policy: InnerLabelPolicy::PseudoZero,
            seed: 0,
            batch: 1,
            inner_lr: crate::probe::DEFAULT_INNER_LR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.outer_lr) || !positive(self.grad_clip) {
            return Err(OrcaError::contract("outer_lr and grad_clip must be positive"));
        }
        if !(self.inner_lr.is_finite() && self.inner_lr >= 0.0) {
            return Err(OrcaError::contract("inner_lr must be nonnegative"));
        }
        if self.batch == 0 {
            return Err(OrcaError::contract("batch must be positive"));
        }
        if self.truncation == Truncation::Steps(0) {
            return Err(OrcaError::contract("truncation must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based epoch index; also the index into [`TrainOutcome::snapshots`].
    pub epoch: usize,
    pub mean_outer_loss: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: SlowWeights,
    pub reports: Vec<EpochReport>,
    /// `snapshots[e]` holds the weights after `e` epochs; `snapshots[0]` is
    /// the initialization.
    pub snapshots: Vec<SlowWeights>,
}

#[derive(Debug, Clone)]
struct StepRecord {
    q: Vec<f64>,
    k: Vec<f64>,
    w: Vec<f64>,
    s: f64,
    a: f64,
    g: f64,
    c: f64,
    target: f64,
}

/// Forward intermediates of one unrolled trajectory.
#[derive(Debug, Clone)]
pub struct Tape<'a> {
    slow: &'a SlowWeights,
    cfg: &'a ProbeConfig,
    phis: Vec<&'a [f64]>,
    records: Vec<StepRecord>,
    loss_scale: f64,
}

impl Tape<'_> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Raw scores `s_1 … s_T` of the unroll.
    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.s).collect()
    }
}

/// Unrolls the inner loop over `traj` and returns the summed Brier loss of
/// the raw scores against `labels`.
pub fn unroll_outer_loss<'a>(
    slow: &'a SlowWeights,
    cfg: &'a ProbeConfig,
    traj: &'a Trajectory,
    labels: &[bool],
    policy: InnerLabelPolicy,
) -> Result<(f64, Tape<'a>)> {
    unroll_scaled(slow, cfg, traj, labels, policy, 1.0)
}

fn unroll_scaled<'a>(
    slow: &'a SlowWeights,
    cfg: &'a ProbeConfig,
    traj: &'a Trajectory,
    labels: &[bool],
    policy: InnerLabelPolicy,
    loss_scale: f64,
) -> Result<(f64, Tape<'a>)> {
    slow.validate(cfg)?;
    if labels.len() != traj.len() {
        return Err(OrcaError::contract(format!(
            "trajectory {} has {} steps but {} labels",
            traj.id,
            traj.len(),
            labels.len()
        )));
    }
    traj.check_dim(cfg.embed_dim)?;

    let mut w = slow.w0.clone();
    let mut b = slow.b0;
    let mut records = Vec::with_capacity(traj.len());
    let mut phis = Vec::with_capacity(traj.len());
    let mut loss = 0.0;
    for (step, &label) in traj.steps.iter().zip(labels) {
        let phi = step.embedding.as_slice();
        let q = slow.query_view(phi).into_owned();
        let k = slow.key_view(phi).into_owned();
        let s = sigmoid(dot(&w, &q) + b);
        let a = sigmoid(dot(&w, &k) + b);
        let target = f64::from(u8::from(label));
        let c = match policy {
            InnerLabelPolicy::PseudoZero => 0.0,
            InnerLabelPolicy::TrueLabels => target,
        };
        let g = brier_logit_grad(a, c);
        loss += (s - target).powi(2);
        let next_w: Vec<f64> = w.iter().zip(&k).map(|(wi, ki)| wi - slow.eta * g * ki).collect();
        let next_b = b - slow.eta * g;
        records.push(StepRecord {
            q,
            k,
            w: std::mem::replace(&mut w, next_w),
            s,
            a,
            g,
            c,
            target,
        });
        b = next_b;
        phis.push(phi);
    }
    let loss = loss * loss_scale;
    if !loss.is_finite() {
        return Err(OrcaError::numeric(format!(
            "outer loss on trajectory {} is not finite",
            traj.id
        )));
    }
    Ok((
        loss,
        Tape {
            slow,
            cfg,
            phis,
            records,
            loss_scale,
        },
    ))
}

struct Adjoint {
    w: Vec<f64>,
    b: f64,
}

struct Accumulator {
    w0: Vec<f64>,
    b0: f64,
    query: Option<Matrix>,
    key: Option<Matrix>,
    eta: f64,
}

impl Tape<'_> {
    /// Adds the contribution of the loss term at `t` to the adjoint of the
    /// state that scored it.
    fn backprop_loss(&self, t: usize, adj: &mut Adjoint, acc: &mut Accumulator) {
        let r = &self.records[t];
        let zs = 2.0 * (r.s - r.target) * self.loss_scale * r.s * (1.0 - r.s);
        axpy(zs, &r.q, &mut adj.w);
        adj.b += zs;
        if let Some(query) = acc.query.as_mut() {
            query.add_outer(zs, &r.w, self.phis[t]);
        }
    }

    /// Maps the adjoint of the state after update `t` onto the state before.
    fn backprop_update(&self, t: usize, adj: &mut Adjoint, acc: &mut Accumulator) {
        let r = &self.records[t];
        let eta = self.slow.eta;
        let along_k = dot(&adj.w, &r.k) + adj.b;
        acc.eta -= r.g * along_k;
        let g_bar = -eta * along_k;
        let dg_da = 2.0 * (r.a * (1.0 - r.a) + (r.a - r.c) * (1.0 - 2.0 * r.a));
        let zk = g_bar * dg_da * r.a * (1.0 - r.a);
        if let Some(key) = acc.key.as_mut() {
            // k̂ = −η g ŵ_after + ẑ_k w_before
            key.add_outer(-eta * r.g, &adj.w, self.phis[t]);
            key.add_outer(zk, &r.w, self.phis[t]);
        }
        axpy(zk, &r.k, &mut adj.w);
        adj.b += zk;
    }
}

/// Exact reverse-mode gradient of the outer loss recorded on `tape`, in the
/// flat layout of [`SlowWeights::to_flat`].
///
/// Under [`Truncation::Steps`]`(k)` every score still contributes its loss,
/// but its dependence on inner updates more than `k` steps old is dropped;
/// the direct path from the score back to `(w₀, b₀)` is kept. A window of at
/// least the trajectory length is the full unroll.
pub fn outer_gradients(tape: &Tape<'_>, truncation: Truncation) -> Result<Vec<f64>> {
    let cfg = tape.cfg;
    let h = cfg.feature_dim();
    let (query, key) = match &tape.slow.projections {
        Projections::Identity => (None, None),
        Projections::Separate { query, .. } | Projections::Shared(query) => (
            Some(Matrix::zeros(query.rows(), query.cols())),
            Some(Matrix::zeros(query.rows(), query.cols())),
        ),
    };
    let mut acc = Accumulator {
        w0: vec![0.0; h],
        b0: 0.0,
        query,
        key,
        eta: 0.0,
    };
    let n = tape.records.len();
    if tape.phis.len() != n || tape.records.iter().any(|r| r.w.len() != h) {
        return Err(OrcaError::Internal("tape replay mismatch".into()));
    }

    match truncation {
        Truncation::Steps(0) => return Err(OrcaError::contract("truncation must be positive")),
        Truncation::Steps(k) if k < n => {
            for t in 0..n {
                let mut adj = Adjoint { w: vec![0.0; h], b: 0.0 };
                tape.backprop_loss(t, &mut adj, &mut acc);
                for j in (t.saturating_sub(k)..t).rev() {
                    tape.backprop_update(j, &mut adj, &mut acc);
                }
                axpy(1.0, &adj.w, &mut acc.w0);
                acc.b0 += adj.b;
            }
        }
        _ => {
            let mut adj = Adjoint { w: vec![0.0; h], b: 0.0 };
            for t in (0..n).rev() {
                tape.backprop_update(t, &mut adj, &mut acc);
                tape.backprop_loss(t, &mut adj, &mut acc);
            }
            acc.w0 = adj.w;
            acc.b0 = adj.b;
        }
    }

    let mut flat = Vec::with_capacity(SlowWeights::flat_len(cfg));
    flat.extend_from_slice(&acc.w0);
    flat.push(acc.b0);
    match (&tape.slow.projections, acc.query, acc.key) {
        (Projections::Identity, _, _) => {}
        (Projections::Separate { .. }, Some(q), Some(k)) => {
            flat.extend_from_slice(q.as_slice());
            flat.extend_from_slice(k.as_slice());
        }
        (Projections::Shared(_), Some(q), Some(k)) => {
            flat.extend(q.as_slice().iter().zip(k.as_slice()).map(|(a, b)| a + b));
        }
        _ => return Err(OrcaError::Internal("tape replay mismatch".into())),
    }
    if cfg.inner_lr_learnable {
        flat.push(acc.eta);
    }
    if !flat.iter().all(|g| g.is_finite()) {
        return Err(OrcaError::numeric("outer gradient is not finite"));
    }
    Ok(flat)
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = norm(grads);
    if n > max_norm {
        let scale = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    n
}

/// Meta-trains slow weights from the seeded initialization
/// (`w₀ = 0`, `b₀ = 0`, projections `U(−1, 1)/√d_φ`, `η = inner_lr`).
pub fn train(
    dataset: &[Trajectory],
    probe_cfg: &ProbeConfig,
    train_cfg: &TrainConfig,
    mode: LabelMode,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let initial = SlowWeights::init(probe_cfg, train_cfg.inner_lr, &mut rng)?;
    run_training(initial, dataset, probe_cfg, train_cfg, mode, Objective::Meta, &mut rng)
}

/// Meta-trains starting from `initial`.
pub fn train_from(
    initial: SlowWeights,
    dataset: &[Trajectory],
    probe_cfg: &ProbeConfig,
    train_cfg: &TrainConfig,
    mode: LabelMode,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    run_training(initial, dataset, probe_cfg, train_cfg, mode, Objective::Meta, &mut rng)
}

/// Static baseline: the same probe and optimizer with `η = 0`, minimizing
/// the mean per-step Brier loss. The returned weights carry `η = 0` exactly.
pub fn train_static(
    dataset: &[Trajectory],
    probe_cfg: &ProbeConfig,
    train_cfg: &TrainConfig,
    mode: LabelMode,
) -> Result<TrainOutcome> {
    let cfg = probe_cfg.clone().with_learnable_eta(false);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let initial = SlowWeights::init(&cfg, 0.0, &mut rng)?;
    run_training(initial, dataset, &cfg, train_cfg, mode, Objective::Static, &mut rng)
}

#[derive(Clone, Copy, PartialEq)]
enum Objective {
    Meta,
    Static,
}

fn run_training(
    initial: SlowWeights,
    dataset: &[Trajectory],
    probe_cfg: &ProbeConfig,
    train_cfg: &TrainConfig,
    mode: LabelMode,
    objective: Objective,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    initial.validate(probe_cfg)?;
    if dataset.is_empty() {
        return Err(OrcaError::input("training set is empty"));
    }
    if let Truncation::Steps(k) = train_cfg.truncation {
        let longest = dataset.iter().map(Trajectory::len).max().unwrap_or(0);
        if k > longest {
            return Err(OrcaError::contract(format!(
                "truncation {k} exceeds the longest trajectory ({longest} steps)"
            )));
        }
    }
    let labels: Vec<Vec<bool>> = dataset
        .iter()
        .map(|t| build_labels(t, mode))
        .collect::<Result<_>>()?;
    if let Some(t) = dataset.iter().find(|t| t.is_empty()) {
        return Err(OrcaError::input(format!("trajectory {} is empty", t.id)));
    }

    let mut weights = initial;
    let mut params = weights.to_flat(probe_cfg);
    let mut adam = Adam::new(train_cfg.outer_lr, params.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut snapshots = vec![weights.clone()];
    let mut reports = Vec::with_capacity(train_cfg.epochs);

    for epoch in 1..=train_cfg.epochs {
        let started = Instant::now();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(train_cfg.batch).enumerate() {
            let per_traj: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let traj = &dataset[i];
                    let scale = match objective {
                        Objective::Meta => 1.0,
                        Objective::Static => 1.0 / traj.len() as f64,
                    };
                    let (loss, tape) = unroll_scaled(
                        &weights,
                        probe_cfg,
                        traj,
                        &labels[i],
                        train_cfg.inner_label_policy,
                        scale,
                    )?;
                    Ok((loss, outer_gradients(&tape, train_cfg.truncation)?))
                })
                .collect();
            let mut grads = vec![0.0; params.len()];
            for item in per_traj {
                let (loss, g) = item.map_err(|e| OrcaError::Divergence {
                    epoch,
                    batch: batch_idx + 1,
                    detail: e.to_string(),
                })?;
                loss_sum += loss;
                axpy(1.0, &g, &mut grads);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            clip_global_norm(&mut grads, train_cfg.grad_clip);
            adam.step(&mut params, &grads);
            if probe_cfg.inner_lr_learnable {
                let last = params.len() - 1;
                params[last] = params[last].max(MIN_INNER_LR);
            }
            if !params.iter().all(|p| p.is_finite()) {
                return Err(OrcaError::Divergence {
                    epoch,
                    batch: batch_idx + 1,
                    detail: "parameters became non-finite".into(),
                });
            }
            weights.set_flat(probe_cfg, &params)?;
        }
        let mean = loss_sum / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(OrcaError::Divergence {
                epoch,
                batch: 0,
                detail: "mean outer loss is not finite".into(),
            });
        }
        reports.push(EpochReport {
            epoch,
            mean_outer_loss: mean,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        snapshots.push(weights.clone());
    }
    Ok(TrainOutcome {
        weights,
        reports,
        snapshots,
    })
}

/// Mean outer loss of `weights` over `dataset`, without training.
pub fn mean_outer_loss(
    weights: &SlowWeights,
    probe_cfg: &ProbeConfig,
    dataset: &[Trajectory],
    mode: LabelMode,
    policy: InnerLabelPolicy,
) -> Result<f64> {
    let losses: Vec<f64> = dataset
        .par_iter()
        .map(|t| {
            let labels = build_labels(t, mode)?;
            Ok(unroll_outer_loss(weights, probe_cfg, t, &labels, policy)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}
