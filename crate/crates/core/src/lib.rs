//! Online-adaptive confidence probes over reasoning-step embeddings.
//!
//! The crate is organised around the life cycle of a stopping rule:
//!
//! * [`probe`] scores each step with a logistic probe whose fast weights are
//!   updated online (score first, then update).
//! * [`meta`] meta-trains the probe's slow weights by differentiating a
//!   summed Brier loss through the unrolled inner updates.
//! * [`ltt`] calibrates the stopping threshold with binomial tail p-values
//!   and fixed-sequence testing, giving finite-sample risk control.
//! * [`runtime`] deploys the calibrated rule and aggregates savings and
//!   error metrics.
//! * [`synth`] generates seeded synthetic trajectories with a single
//!   transition point, used to exercise all of the above.
//! * [`io`] holds the on-disk formats and report emitters.

pub mod error;
pub mod io;
pub mod labels;
pub mod linalg;
pub mod ltt;
pub mod meta;
pub mod probe;
pub mod runtime;
pub mod synth;
pub mod trajectory;

pub use error::{OrcaError, Result};
pub use labels::{build_labels, LabelMode, LabelSource};
pub use ltt::{
    binom_tail_pvalue, calibrate, conformal_quantile, empirical_risk, fixed_sequence_select,
    CalibrationResult, LossMode, RiskSpec, ThresholdGrid, ThresholdRecord,
};
pub use meta::{train, train_static, EpochReport, InnerLabelPolicy, TrainConfig, Truncation};
pub use probe::{FastState, Projections, ProbeConfig, SlowWeights, Variant};
pub use runtime::{evaluate_set, risk_savings_sweep, run_with_stopping, EvalReport, RunOutcome};
pub use synth::{generate_dataset, oracle_transition, SynthConfig};
pub use trajectory::{Step, Trajectory};
