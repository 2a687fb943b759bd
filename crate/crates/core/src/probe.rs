//! The online-adaptive probe.
//!
//! A probe is a logistic scorer `f(u; w, b) = σ(w·u + b)` whose fast weights
//! `(w, b)` move along a trajectory by one gradient step on the Brier loss per
//! step. Every step follows score-then-update: the score at step `t` is
//! computed with the weights accumulated through step `t − 1`, and only then
//! are the weights updated.
//!
//! Three variants differ in the views fed to the scorer and to the update:
//!
//! | variant     | score view | loss view |
//! |-------------|------------|-----------|
//! | `NoQk`      | `φ`        | `φ`       |
//! | `Qk`        | `θ_Q φ`    | `θ_K φ`   |
//! | `SharedQk`  | `P φ`      | `P φ`     |

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OrcaError, Result};
use crate::linalg::{dot, Matrix};

pub const DEFAULT_SMOOTHING_WINDOW: usize = 10;
pub const DEFAULT_INNER_LR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoQk,
    Qk,
    SharedQk,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoQk => "no_qk",
            Variant::Qk => "qk",
            Variant::SharedQk => "shared_qk",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = OrcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "no_qk" => Ok(Variant::NoQk),
            "qk" => Ok(Variant::Qk),
            "shared_qk" => Ok(Variant::SharedQk),
            other => Err(OrcaError::input(format!("unknown probe variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub variant: Variant,
    /// Embedding width `d_φ`.
    pub embed_dim: usize,
    /// Projection width `d_h`; present iff the variant projects.
    pub proj_dim: Option<usize>,
    pub smoothing_window: usize,
    pub inner_lr_learnable: bool,
}

impl ProbeConfig {
    pub fn no_qk(embed_dim: usize) -> Self {
        ProbeConfig {
            variant: Variant::NoQk,
            embed_dim,
            proj_dim: None,
            smoothing_window: DEFAULT_SMOOTHING_WINDOW,
            inner_lr_learnable: false,
        }
    }

    pub fn qk(embed_dim: usize, proj_dim: usize) -> Self {
        ProbeConfig {
            variant: Variant::Qk,
            proj_dim: Some(proj_dim),
            ..Self::no_qk(embed_dim)
        }
    }

    pub fn shared_qk(embed_dim: usize, proj_dim: usize) -> Self {
        ProbeConfig {
            variant: Variant::SharedQk,
            proj_dim: Some(proj_dim),
            ..Self::no_qk(embed_dim)
        }
    }

    /// Builds a config for `variant`, ignoring `proj_dim` for `NoQk`.
    pub fn for_variant(variant: Variant, embed_dim: usize, proj_dim: usize) -> Self {
        match variant {
            Variant::NoQk => Self::no_qk(embed_dim),
            Variant::Qk => Self::qk(embed_dim, proj_dim),
            Variant::SharedQk => Self::shared_qk(embed_dim, proj_dim),
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.smoothing_window = window;
        self
    }

    pub fn with_learnable_eta(mut self, learnable: bool) -> Self {
        self.inner_lr_learnable = learnable;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(OrcaError::contract("embed_dim must be positive"));
        }
        if self.smoothing_window == 0 {
            return Err(OrcaError::contract("smoothing_window must be at least 1"));
        }
        match (self.variant, self.proj_dim) {
            (Variant::NoQk, Some(_)) => Err(OrcaError::contract(
                "no_qk probes have identity projections; proj_dim must be absent",
            )),
            (Variant::Qk | Variant::SharedQk, None) => Err(OrcaError::contract(format!(
                "{} probes require proj_dim",
                self.variant
            ))),
            (_, Some(0)) => Err(OrcaError::contract("proj_dim must be positive")),
            _ => Ok(()),
        }
    }

    /// Length of the fast-weight vector `w`.
    pub fn feature_dim(&self) -> usize {
        self.proj_dim.unwrap_or(self.embed_dim)
    }
}

/// Outer-loop view parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projections {
    Identity,
    Separate { query: Matrix, key: Matrix },
    /// One matrix serving as both `θ_Q` and `θ_K`.
    Shared(Matrix),
}

impl Projections {
    pub fn query(&self) -> Option<&Matrix> {
        match self {
            Projections::Identity => None,
            Projections::Separate { query, .. } => Some(query),
            Projections::Shared(m) => Some(m),
        }
    }

    pub fn key(&self) -> Option<&Matrix> {
        match self {
            Projections::Identity => None,
            Projections::Separate { key, .. } => Some(key),
            Projections::Shared(m) => Some(m),
        }
    }
}

/// Slow weights `(w₀, b₀, θ_Q, θ_K, η)`, frozen at deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowWeights {
    pub w0: Vec<f64>,
    pub b0: f64,
    pub projections: Projections,
    pub eta: f64,
}

impl SlowWeights {
    /// All-zero initialization. Projecting variants get zero matrices.
    pub fn zeros(cfg: &ProbeConfig, eta: f64) -> Result<Self> {
        cfg.validate()?;
        let projections = match (cfg.variant, cfg.proj_dim) {
            (Variant::NoQk, _) => Projections::Identity,
            (Variant::Qk, Some(h)) => Projections::Separate {
                query: Matrix::zeros(h, cfg.embed_dim),
                key: Matrix::zeros(h, cfg.embed_dim),
            },
            (Variant::SharedQk, Some(h)) => Projections::Shared(Matrix::zeros(h, cfg.embed_dim)),
            _ => unreachable!("validated above"),
        };
        let weights = SlowWeights {
            w0: vec![0.0; cfg.feature_dim()],
            b0: 0.0,
            projections,
            eta,
        };
        weights.validate(cfg)?;
        Ok(weights)
    }

    /// Training initialization: `w₀ = 0`, `b₀ = 0`, projection entries drawn
    /// from `U(−1, 1) / √d_φ`.
    pub fn init<R: Rng + ?Sized>(cfg: &ProbeConfig, eta: f64, rng: &mut R) -> Result<Self> {
        let mut weights = Self::zeros(cfg, eta)?;
        let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
        let mut fill = |m: &mut Matrix| {
            for x in m.as_mut_slice() {
                *x = rng.random_range(-1.0..1.0) * scale;
            }
        };
        match &mut weights.projections {
            Projections::Identity => {}
            Projections::Separate { query, key } => {
                fill(query);
                fill(key);
            }
            Projections::Shared(m) => fill(m),
        }
        Ok(weights)
    }

    pub fn validate(&self, cfg: &ProbeConfig) -> Result<()> {
        cfg.validate()?;
        if self.w0.len() != cfg.feature_dim() {
            return Err(OrcaError::contract(format!(
                "w0 has length {}, probe expects {}",
                self.w0.len(),
                cfg.feature_dim()
            )));
        }
        // η = 0 is the static baseline; negative rates are never valid.
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(OrcaError::contract(format!("invalid inner rate η = {}", self.eta)));
        }
        if !self.b0.is_finite() || !self.w0.iter().all(|x| x.is_finite()) {
            return Err(OrcaError::numeric("slow weights contain non-finite entries"));
        }
        let check = |m: &Matrix| -> Result<()> {
            if Some(m.rows()) != cfg.proj_dim || m.cols() != cfg.embed_dim {
                return Err(OrcaError::contract(format!(
                    "projection is {}x{}, probe expects {}x{}",
                    m.rows(),
                    m.cols(),
                    cfg.proj_dim.unwrap_or(0),
                    cfg.embed_dim
                )));
            }
            if !m.is_finite() {
                return Err(OrcaError::numeric("projection contains non-finite entries"));
            }
            Ok(())
        };
        match (&self.projections, cfg.variant) {
            (Projections::Identity, Variant::NoQk) => Ok(()),
            (Projections::Separate { query, key }, Variant::Qk) => {
                check(query)?;
                check(key)
            }
            (Projections::Shared(m), Variant::SharedQk) => check(m),
            (p, v) => Err(OrcaError::contract(format!(
                "projection layout {:?} does not match variant {v}",
                std::mem::discriminant(p)
            ))),
        }
    }

    pub fn query_view<'a>(&self, phi: &'a [f64]) -> Cow<'a, [f64]> {
        match self.projections.query() {
            None => Cow::Borrowed(phi),
            Some(m) => Cow::Owned(m.matvec(phi)),
        }
    }

    pub fn key_view<'a>(&self, phi: &'a [f64]) -> Cow<'a, [f64]> {
        match self.projections.key() {
            None => Cow::Borrowed(phi),
            Some(m) => Cow::Owned(m.matvec(phi)),
        }
    }

    /// Number of trainable scalars in the flat layout (see [`Self::to_flat`]).
    pub fn flat_len(cfg: &ProbeConfig) -> usize {
        let proj = match (cfg.variant, cfg.proj_dim) {
            (Variant::NoQk, _) => 0,
            (Variant::Qk, Some(h)) => 2 * h * cfg.embed_dim,
            (Variant::SharedQk, Some(h)) => h * cfg.embed_dim,
            _ => 0,
        };
        cfg.feature_dim() + 1 + proj + usize::from(cfg.inner_lr_learnable)
    }

    /// Flat parameter vector: `w₀`, `b₀`, projection entries (query then key,
    /// or the shared matrix), then `η` when it is learnable.
    pub fn to_flat(&self, cfg: &ProbeConfig) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::flat_len(cfg));
        out.extend_from_slice(&self.w0);
        out.push(self.b0);
        match &self.projections {
            Projections::Identity => {}
            Projections::Separate { query, key } => {
                out.extend_from_slice(query.as_slice());
                out.extend_from_slice(key.as_slice());
            }
            Projections::Shared(m) => out.extend_from_slice(m.as_slice()),
        }
        if cfg.inner_lr_learnable {
            out.push(self.eta);
        }
        out
    }

    pub fn set_flat(&mut self, cfg: &ProbeConfig, flat: &[f64]) -> Result<()> {
        if flat.len() != Self::flat_len(cfg) {
            return Err(OrcaError::contract(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                Self::flat_len(cfg)
            )));
        }
        let h = self.w0.len();
        self.w0.copy_from_slice(&flat[..h]);
        self.b0 = flat[h];
        let mut at = h + 1;
        let mut take = |m: &mut Matrix| {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        };
        match &mut self.projections {
            Projections::Identity => {}
            Projections::Separate { query, key } => {
                take(query);
                take(key);
            }
            Projections::Shared(m) => take(m),
        }
        if cfg.inner_lr_learnable {
            self.eta = flat[flat.len() - 1];
        }
        Ok(())
    }
}

/// Per-instance probe state, reset between trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct FastState {
    pub w: Vec<f64>,
    pub b: f64,
    /// Completed score-then-update rounds.
    pub step: usize,
    pub raw_scores: Vec<f64>,
}

impl FastState {
    pub fn new(slow: &SlowWeights) -> Self {
        FastState {
            w: slow.w0.clone(),
            b: slow.b0,
            step: 0,
            raw_scores: Vec::new(),
        }
    }

    /// One score-then-update round in place; returns `(raw, smoothed)`.
    pub fn advance_in_place(
        &mut self,
        slow: &SlowWeights,
        cfg: &ProbeConfig,
        phi: &[f64],
        c: bool,
    ) -> Result<(f64, f64)> {
        let scored = self.score_only(slow, cfg, phi)?;
        self.commit_update(slow, cfg, phi, c)?;
        Ok(scored)
    }

    /// Scores `phi` and appends the raw score without updating the weights.
    /// Used by the deployed rule at its stopping step.
    pub fn score_only(&mut self, slow: &SlowWeights, cfg: &ProbeConfig, phi: &[f64]) -> Result<(f64, f64)> {
        let raw = score(self, slow, cfg, phi)?;
        self.raw_scores.push(raw);
        Ok((raw, trailing_mean(&self.raw_scores, cfg.smoothing_window)))
    }

    /// Completes a round opened by [`Self::score_only`].
    pub fn commit_update(&mut self, slow: &SlowWeights, cfg: &ProbeConfig, phi: &[f64], c: bool) -> Result<()> {
        update_in_place(self, slow, cfg, phi, c)?;
        self.step += 1;
        Ok(())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of the last `min(len, window)` entries; NaN on an empty slice.
pub fn trailing_mean(values: &[f64], window: usize) -> f64 {
    let from = values.len().saturating_sub(window.max(1));
    let tail = &values[from..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn check_dims(fast: &FastState, cfg: &ProbeConfig, phi: &[f64]) -> Result<()> {
    if phi.len() != cfg.embed_dim {
        return Err(OrcaError::contract(format!(
            "embedding has length {}, probe expects {}",
            phi.len(),
            cfg.embed_dim
        )));
    }
    if fast.w.len() != cfg.feature_dim() {
        return Err(OrcaError::contract(format!(
            "fast weights have length {}, probe expects {}",
            fast.w.len(),
            cfg.feature_dim()
        )));
    }
    Ok(())
}

/// Raw score `σ(w · view_Q(φ) + b)` with the current fast weights.
pub fn score(fast: &FastState, slow: &SlowWeights, cfg: &ProbeConfig, phi: &[f64]) -> Result<f64> {
    check_dims(fast, cfg, phi)?;
    let q = slow.query_view(phi);
    let s = sigmoid(dot(&fast.w, &q) + fast.b);
    if !s.is_finite() {
        return Err(OrcaError::numeric("probe score is not finite"));
    }
    Ok(s)
}

/// Brier loss of the loss-view forward pass against `c`.
pub fn inner_loss(
    fast: &FastState,
    slow: &SlowWeights,
    cfg: &ProbeConfig,
    phi: &[f64],
    c: bool,
) -> Result<f64> {
    check_dims(fast, cfg, phi)?;
    let k = slow.key_view(phi);
    let a = sigmoid(dot(&fast.w, &k) + fast.b);
    let loss = (a - f64::from(u8::from(c))).powi(2);
    if !loss.is_finite() {
        return Err(OrcaError::numeric("inner loss is not finite"));
    }
    Ok(loss)
}

/// Coefficient `g = ∂ℓ/∂z = 2(a − c)·a(1 − a)` of the Brier loss at logit `z`.
pub(crate) fn brier_logit_grad(a: f64, c: f64) -> f64 {
    2.0 * (a - c) * a * (1.0 - a)
}

fn update_in_place(
    fast: &mut FastState,
    slow: &SlowWeights,
    cfg: &ProbeConfig,
    phi: &[f64],
    c: bool,
) -> Result<()> {
    check_dims(fast, cfg, phi)?;
    let k = slow.key_view(phi);
    let a = sigmoid(dot(&fast.w, &k) + fast.b);
    let g = brier_logit_grad(a, f64::from(u8::from(c)));
    if !g.is_finite() {
        return Err(OrcaError::numeric("inner gradient is not finite"));
    }
    let step = slow.eta * g;
    for (w, ki) in fast.w.iter_mut().zip(k.iter()) {
        *w -= step * ki;
    }
    fast.b -= step;
    Ok(())
}

/// One gradient step on the inner Brier loss. Leaves `step` untouched.
pub fn inner_update(
    fast: &FastState,
    slow: &SlowWeights,
    cfg: &ProbeConfig,
    phi: &[f64],
    c: bool,
) -> Result<FastState> {
    let mut next = fast.clone();
    update_in_place(&mut next, slow, cfg, phi, c)?;
    Ok(next)
}

/// Result of one score-then-update round.
#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    pub raw: f64,
    pub smoothed: f64,
    pub state: FastState,
}

pub fn advance(
    fast: &FastState,
    slow: &SlowWeights,
    cfg: &ProbeConfig,
    phi: &[f64],
    c: bool,
) -> Result<Advance> {
    let mut state = fast.clone();
    let (raw, smoothed) = state.advance_in_place(slow, cfg, phi, c)?;
    Ok(Advance { raw, smoothed, state })
}
