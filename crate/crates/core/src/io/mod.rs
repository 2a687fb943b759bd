//! On-disk formats and report emitters.
//!
//! * [`trajectories`]: JSON-lines text and little-endian binary trajectory
//!   files.
//! * [`model`]: the canonical model artifact with an FNV-1a checksum.
//! * [`report`]: CSV tables, SVG plots and calibration-result files.

pub mod model;
pub mod report;
pub mod svg;
pub mod trajectories;

pub use model::{fnv1a64, read_model, write_model, ModelArtifact};
pub use report::{emit_report, read_calibration, write_calibration, Report, ReportFormat};
pub use trajectories::{read_trajectories, write_trajectories, TrajectoryFormat};
