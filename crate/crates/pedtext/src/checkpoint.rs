//! Versioned JSON container for trained models.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerState};

pub const CHECKPOINT_FORMAT: &str = "pedtext-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Validation(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Validation("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub model: ModelConfig,
    /// Snapshot of the stage configuration that produced this checkpoint.
    pub training: serde_json::Value,
    pub vocabulary: Vec<String>,
    pub vocabulary_hash: String,
    pub params: ParamSet,
    pub optimizer_config: Option<OptimizerConfig>,
    pub optimizer_state: Option<OptimizerState>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        seed: u64,
        model: &Model,
        training: serde_json::Value,
        vocab: &Vocabulary,
        optimizer: Option<&Optimizer>,
        rng: &ChaCha8Rng,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage,
            seed,
            model: model.config.clone(),
            training,
            vocabulary: vocab.tokens().to_vec(),
            vocabulary_hash: vocab.hash(),
            params: model.params.clone(),
            optimizer_config: optimizer.map(|o| o.config.clone()),
            optimizer_state: optimizer.map(|o| o.state.clone()),
            rng: RngState::capture(rng),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.model.clone(), self.params.clone())
    }

    /// The stored vocabulary, checked against its hash.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let vocab = Vocabulary::from_tokens(self.vocabulary.clone())?;
        if vocab.hash() != self.vocabulary_hash {
            return Err(Error::Validation("checkpoint vocabulary does not match its hash".into()));
        }
        Ok(vocab)
    }

    pub fn optimizer(&self) -> Result<Option<Optimizer>> {
        match (&self.optimizer_config, &self.optimizer_state) {
            (Some(c), Some(s)) => Ok(Some(Optimizer::from_state(c.clone(), s.clone(), &self.params)?)),
            _ => Ok(None),
        }
    }

    /// Hex SHA-256 of the model and training configuration and seed.
    pub fn config_hash(&self) -> String {
        let record = serde_json::json!({
            "seed": self.seed,
            "stage": self.stage,
            "model": self.model,
            "training": self.training,
        });
        hex::encode(Sha256::digest(record.to_string().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(parse(format!("not a checkpoint (format {:?})", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(parse(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.vocabulary().map_err(|e| parse(e.to_string()))?;
        ck.model().map_err(|e| parse(e.to_string()))?;
        Ok(ck)
    }
}
