//! Image/text embedding backends used to score attribute prompts against
//! person images.
//!
//! The generator only talks to [`ScorerBackend`]. Three implementations ship:
//! [`MockBackend`] (hash-seeded vectors), [`ScriptedBackend`] (images embed to
//! the mean of their known attribute prompts) and [`PluginBackend`] (an
//! external process speaking newline-delimited JSON).

mod mock;
mod plugin;
mod scripted;

pub use mock::MockBackend;
pub use plugin::{serve_plugin, PluginBackend, PluginRequest, PluginResponse, RequestKind};
pub use scripted::{ScriptedBackend, ScriptedTruth};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::PromptText;

/// A unit-norm embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalises `values` to unit length. Fails on non-finite or all-zero
    /// input.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding must be non-empty and finite".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("cannot normalise a zero vector".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values as-is, without normalising.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// An image as seen by a scorer: its id plus raw bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub bytes: Vec<u8>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            id: id.into(),
            bytes: bytes.into(),
        }
    }
}

/// An embedding model queried during attribute selection.
///
/// Implementations are pure: the same input always yields the same vector.
pub trait ScorerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_image(&self, image: &ImageRecord) -> Result<EmbeddingVector>;
    fn embed_text(&self, prompt: &PromptText) -> Result<EmbeddingVector>;
}

/// `aᵀb / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
