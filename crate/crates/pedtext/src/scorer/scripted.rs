use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use super::{EmbeddingVector, ImageRecord, ScorerBackend};
use crate::error::{Error, Result};
use crate::ontology::{to_prompt, AttributeOntology, AttributePhrase};

/// Ground truth per image: category name → phrase surface. Optional
/// categories may name their null phrase (`"no bag"`) to mark absence.
pub type ScriptedTruth = BTreeMap<String, BTreeMap<String, String>>;

/// Text goes to an inner backend; an image embeds to the renormalised mean of
/// the prompt embeddings of its scripted phrases.
pub struct ScriptedBackend {
    text: Arc<dyn ScorerBackend>,
    images: HashMap<String, EmbeddingVector>,
}

impl ScriptedBackend {
    pub fn new(
        text: Arc<dyn ScorerBackend>,
        ontology: &AttributeOntology,
        truth: &ScriptedTruth,
    ) -> Result<Self> {
        let mut images = HashMap::with_capacity(truth.len());
        for (image_id, attrs) in truth {
            if attrs.is_empty() {
                return Err(Error::Validation(format!("script for {image_id} is empty")));
            }
            let mut sum = vec![0.0; text.dimension()];
            for (category, surface) in attrs {
                let cat = ontology.category(category).ok_or_else(|| {
                    Error::Validation(format!("script for {image_id}: unknown category {category}"))
                })?;
                let prompt = to_prompt(cat, &AttributePhrase::new(surface.clone())).map_err(|_| {
                    Error::Validation(format!(
                        "script for {image_id}: \"{surface}\" is not a {category} phrase"
                    ))
                })?;
                let v = text.embed_text(&prompt)?;
                for (s, x) in sum.iter_mut().zip(v.as_slice()) {
                    *s += x;
                }
            }
            let n = attrs.len() as f64;
            let mean = sum.into_iter().map(|s| s / n).collect();
            images.insert(image_id.clone(), EmbeddingVector::normalized(mean)?);
        }
        Ok(Self { text, images })
    }

    /// Reads a script file: a JSON object mapping image id to its
    /// `{category: phrase}` record.
    pub fn load_truth(path: &Path) -> Result<ScriptedTruth> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

impl ScorerBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn dimension(&self) -> usize {
        self.text.dimension()
    }

    fn embed_image(&self, image: &ImageRecord) -> Result<EmbeddingVector> {
        self.images.get(&image.id).cloned().ok_or_else(|| Error::Input {
            id: image.id.clone(),
            message: "image is not in the script".into(),
        })
    }

    fn embed_text(&self, prompt: &crate::ontology::PromptText) -> Result<EmbeddingVector> {
        self.text.embed_text(prompt)
    }
}
