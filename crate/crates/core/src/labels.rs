//! Step-label construction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OrcaError, Result};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Per-step correctness bits.
    Supervised,
    /// Agreement of each step's answer with the final step's answer.
    Consistent,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::Supervised => "supervised",
            LabelSource::Consistent => "consistent",
        })
    }
}

impl FromStr for LabelSource {
    type Err = OrcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(LabelSource::Supervised),
            "consistent" => Ok(LabelSource::Consistent),
            other => Err(OrcaError::input(format!("unknown label mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMode {
    pub source: LabelSource,
    /// Replace labels by their running maximum.
    pub cumulative: bool,
}

impl LabelMode {
    pub fn supervised() -> Self {
        LabelMode {
            source: LabelSource::Supervised,
            cumulative: true,
        }
    }

    pub fn consistent() -> Self {
        LabelMode {
            source: LabelSource::Consistent,
            cumulative: true,
        }
    }
}

impl Default for LabelMode {
    fn default() -> Self {
        Self::supervised()
    }
}

/// Builds the binary step labels of `traj` under `mode`.
pub fn build_labels(traj: &Trajectory, mode: LabelMode) -> Result<Vec<bool>> {
    let mut labels: Vec<bool> = match mode.source {
        LabelSource::Supervised => traj
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| {
                s.correct.ok_or_else(|| {
                    OrcaError::input(format!(
                        "trajectory {} step {} has no correctness bit",
                        traj.id,
                        t + 1
                    ))
                })
            })
            .collect::<Result<_>>()?,
        LabelSource::Consistent => {
            let answers: Vec<u32> = traj
                .steps
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    s.answer.ok_or_else(|| {
                        OrcaError::input(format!(
                            "trajectory {} step {} has no answer id",
                            traj.id,
                            t + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            match answers.last() {
                Some(&last) => answers.iter().map(|&a| a == last).collect(),
                None => Vec::new(),
            }
        }
    };
    if mode.cumulative {
        let mut seen = false;
        for l in &mut labels {
            seen |= *l;
            *l = seen;
        }
    }
    Ok(labels)
}

/// First 1-based step with label 1.
pub fn first_positive(labels: &[bool]) -> Option<usize> {
    labels.iter().position(|&l| l).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Step;
    use proptest::prelude::*;

    fn supervised(bits: &[bool]) -> Trajectory {
        Trajectory::new(
            0,
            bits.iter()
                .map(|&b| Step {
                    correct: Some(b),
                    ..Step::new(vec![0.0])
                })
                .collect(),
        )
    }

    fn consistent(ids: &[u32]) -> Trajectory {
        Trajectory::new(
            0,
            ids.iter()
                .map(|&a| Step {
                    answer: Some(a),
                    ..Step::new(vec![0.0])
                })
                .collect(),
        )
    }

    #[test]
    fn worked_examples() {
        let t = supervised(&[false, true, false, true]);
        assert_eq!(build_labels(&t, LabelMode::supervised()).unwrap(), [false, true, true, true]);
        let raw = LabelMode { cumulative: false, ..LabelMode::supervised() };
        assert_eq!(build_labels(&t, raw).unwrap(), [false, true, false, true]);

        let t = consistent(&[7, 3, 3]);
        assert_eq!(build_labels(&t, LabelMode::consistent()).unwrap(), [false, true, true]);

        let t = supervised(&[false; 5]);
        assert_eq!(build_labels(&t, LabelMode::supervised()).unwrap(), [false; 5]);
    }

    #[test]
    fn missing_fields_are_input_errors() {
        let t = consistent(&[1, 2]);
        assert!(matches!(build_labels(&t, LabelMode::supervised()), Err(OrcaError::Input(_))));
        let t = supervised(&[true]);
        assert!(matches!(build_labels(&t, LabelMode::consistent()), Err(OrcaError::Input(_))));
    }

    proptest! {
        #[test]
        fn cumulative_labels_are_monotone(
            bits in prop::collection::vec(any::<bool>(), 1..40),
            ids in prop::collection::vec(0u32..4, 1..40),
        ) {
            let s = build_labels(&supervised(&bits), LabelMode::supervised()).unwrap();
            prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
            let c = build_labels(&consistent(&ids), LabelMode::consistent()).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(*c.last().unwrap());
        }
    }
}
