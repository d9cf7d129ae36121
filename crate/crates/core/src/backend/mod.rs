//! Inference contract: a batch of windows in, one label distribution per
//! window position out.

mod mock;
mod remote;
pub mod wire;

use serde::{Deserialize, Serialize};

pub use crate::corpus::LabelSet;
use crate::windowing::InputExample;

pub use mock::{Gazetteer, GazetteerEntry, GazetteerError, MockConfig, MockLexiconBackend};
pub use mock::{derive_seed, DEFAULT_STRENGTH};
pub use remote::{FinetuneParams, RemoteBackend, RemoteConfig};

/// Probability tolerance for a distribution to count as normalized.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("batch {batch}: backend unavailable: {message}")]
    Unavailable { batch: usize, message: String },
    #[error("batch {batch}: request timed out")]
    Timeout { batch: usize },
    #[error("batch {batch}: protocol version mismatch: expected {expected}, server speaks {found}")]
    ProtocolVersion { batch: usize, expected: String, found: String },
    #[error("batch {batch}, example {example}: response shape mismatch: {message}")]
    Shape { batch: usize, example: usize, message: String },
    #[error("example {example}: {message}")]
    InvalidBatch { example: usize, message: String },
    #[error("batch {batch}: server error {code}: {message}")]
    Remote { batch: usize, code: String, message: String },
}

/// A probability vector over a [`LabelSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    /// Accepts any non-negative vector summing to 1 within [`SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self, String> {
        if probs.is_empty() {
            return Err("empty distribution".into());
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(format!("invalid probability {p}"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(format!("probabilities sum to {sum}"));
        }
        Ok(LabelDistribution { probs })
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        LabelDistribution { probs: exps.into_iter().map(|e| e / total).collect() }
    }

    pub fn uniform(n: usize) -> Self {
        LabelDistribution { probs: vec![1.0 / n as f64; n] }
    }

    /// Wrap without validation; callers guarantee the invariant.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        LabelDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub type Predictions = Vec<Vec<LabelDistribution>>;

pub trait Backend: Send + Sync {
    fn label_set(&self) -> &LabelSet;

    /// One distribution per position of every example, in batch order.
    fn predict(&self, batch: &[InputExample]) -> Result<Predictions, BackendError>;
}

/// Every example must share one window length. Returns it (0 for an empty batch).
pub fn check_batch(batch: &[InputExample]) -> Result<usize, BackendError> {
    let Some(first) = batch.first() else { return Ok(0) };
    let len = first.items.len();
    match batch.iter().position(|e| e.items.len() != len) {
        Some(example) => Err(BackendError::InvalidBatch {
            example,
            message: format!("window length {} differs from {len}", batch[example].items.len()),
        }),
        None => Ok(len),
    }
}

/// Response must have one row per example and one normalized distribution
/// of `label_count` entries per position.
pub fn check_response_shape(
    batch_index: usize,
    batch: &[InputExample],
    response: &Predictions,
    label_count: usize,
) -> Result<(), BackendError> {
    if response.len() != batch.len() {
        return Err(BackendError::Shape {
            batch: batch_index,
            example: response.len().min(batch.len()),
            message: format!("{} rows for {} examples", response.len(), batch.len()),
        });
    }
    for (example, (row, ex)) in response.iter().zip(batch).enumerate() {
        let shape = |message: String| BackendError::Shape { batch: batch_index, example, message };
        if row.len() != ex.items.len() {
            return Err(shape(format!("{} positions, expected {}", row.len(), ex.items.len())));
        }
        for (pos, dist) in row.iter().enumerate() {
            if dist.len() != label_count {
                return Err(shape(format!("position {pos}: {} labels, expected {label_count}", dist.len())));
            }
            let sum: f64 = dist.probs().iter().sum();
            let valid = (sum - 1.0).abs() <= SUM_TOLERANCE && dist.probs().iter().all(|p| *p >= 0.0);
            if !valid {
                return Err(shape(format!("position {pos}: not a probability distribution")));
            }
        }
    }
    Ok(())
}
