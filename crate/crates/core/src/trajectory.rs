//! Step-embedding trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{OrcaError, Result};

/// One reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<u32>,
}

impl Step {
    pub fn new(embedding: Vec<f64>) -> Self {
        Step {
            embedding,
            correct: None,
            answer: None,
            tokens: None,
        }
    }
}

/// Ordered steps of one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u32,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(id: u32, steps: Vec<Step>) -> Self {
        Trajectory { id, steps }
    }

    /// Builds an unlabeled trajectory from raw embeddings.
    pub fn from_embeddings(id: u32, embeddings: Vec<Vec<f64>>) -> Self {
        Trajectory {
            id,
            steps: embeddings.into_iter().map(Step::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn embedding(&self, t: usize) -> &[f64] {
        &self.steps[t].embedding
    }

    /// Common embedding width, or an error if steps disagree.
    pub fn embed_dim(&self) -> Result<Option<usize>> {
        let mut dims = self.steps.iter().map(|s| s.embedding.len());
        let Some(first) = dims.next() else {
            return Ok(None);
        };
        if dims.any(|d| d != first) {
            return Err(OrcaError::input(format!(
                "trajectory {} mixes embedding widths",
                self.id
            )));
        }
        Ok(Some(first))
    }

    /// Per-step token counts if every step carries one.
    pub fn token_counts(&self) -> Option<Vec<u32>> {
        self.steps.iter().map(|s| s.tokens).collect()
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match self.steps.iter().position(|s| s.embedding.len() != dim) {
            None => Ok(()),
            Some(t) => Err(OrcaError::contract(format!(
                "trajectory {} step {} has width {}, expected {dim}",
                self.id,
                t + 1,
                self.steps[t].embedding.len()
            ))),
        }
    }
}
