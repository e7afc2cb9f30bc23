use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EmbeddingVector, ImageRecord, ScorerBackend};
use crate::error::{Error, Result};
use crate::ontology::PromptText;

/// Embeds inputs as unit-normalised Gaussian vectors drawn from a generator
/// keyed by `SHA-256(seed, kind, bytes)`. Stable across processes and
/// platforms.
#[derive(Clone, Debug)]
pub struct MockBackend {
    seed: u64,
    dimension: usize,
}

impl MockBackend {
    pub const DEFAULT_DIMENSION: usize = 64;

    pub fn new(seed: u64, dimension: usize) -> Self {
        assert!(dimension > 0, "mock backend dimension must be positive");
        Self { seed, dimension }
    }

    fn vector(&self, kind: u8, data: &[u8]) -> EmbeddingVector {
        let mut h = Sha256::new();
        h.update(b"pedtext-mock-v1");
        h.update(self.seed.to_le_bytes());
        h.update([kind]);
        h.update(data);
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        let values: Vec<f64> = (0..self.dimension)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        EmbeddingVector::normalized(values).expect("gaussian draw is nonzero")
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(0, Self::DEFAULT_DIMENSION)
    }
}

impl ScorerBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_image(&self, image: &ImageRecord) -> Result<EmbeddingVector> {
        if image.bytes.is_empty() {
            return Err(Error::Input {
                id: image.id.clone(),
                message: "image has no bytes".into(),
            });
        }
        Ok(self.vector(b'i', &image.bytes))
    }

    fn embed_text(&self, prompt: &PromptText) -> Result<EmbeddingVector> {
        if prompt.as_str().is_empty() {
            return Err(Error::Input {
                id: "<prompt>".into(),
                message: "empty prompt".into(),
            });
        }
        Ok(self.vector(b't', prompt.as_str().as_bytes()))
    }
}
