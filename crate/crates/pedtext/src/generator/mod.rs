//! Pseudo-caption generation: score attribute prompts against an image
//! (conquer), then fill a sentence template and vary its wording (combine).

mod stats;
mod template;

pub use stats::{corpus_stats, CorpusStats};
pub use template::{
    alt_templates, default_templates, load_templates, parse_templates, CaptionTemplate,
    PseudoCaption,
};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetManifest, ImageSource, PersonRecord};
use crate::error::{Error, Result};
use crate::ontology::{to_prompt, AttributeCategory, AttributeOntology, AttributePhrase, CategoryKind};
use crate::scorer::{cosine_similarity, EmbeddingVector, ImageRecord, ScorerBackend};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Minimum softmax probability for an optional attribute to be kept.
    pub threshold: f64,
    /// Logit scale applied to cosine similarities before the softmax.
    pub scale: f64,
    /// Per-slot probability of replacing a phrase by one of its synonyms.
    pub synonym_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            scale: 100.0,
            synonym_rate: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.synonym_rate) {
            return Err(Error::Config(format!(
                "synonym rate must lie in [0, 1], got {}",
                self.synonym_rate
            )));
        }
        Ok(())
    }
}

/// `softmax(scale · scores)`, computed with max subtraction.
pub fn softmax(scores: &[f64], scale: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Contract("softmax of an empty sequence".into()));
    }
    if !(scale > 0.0) || scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("softmax needs finite scores and a positive scale".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) * scale).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest value; the earliest wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Prompt embeddings for every candidate phrase of every category, computed
/// once per backend.
pub struct PromptBank {
    entries: HashMap<String, Vec<(AttributePhrase, EmbeddingVector)>>,
}

impl PromptBank {
    pub fn build(ontology: &AttributeOntology, backend: &dyn ScorerBackend) -> Result<Self> {
        let mut entries = HashMap::new();
        for c in ontology.categories() {
            entries.insert(c.name.clone(), Self::embed_category(c, backend)?);
        }
        Ok(Self { entries })
    }

    fn embed_category(
        category: &AttributeCategory,
        backend: &dyn ScorerBackend,
    ) -> Result<Vec<(AttributePhrase, EmbeddingVector)>> {
        category
            .candidates()
            .into_iter()
            .map(|p| {
                let v = backend.embed_text(&to_prompt(category, &p)?)?;
                Ok((p, v))
            })
            .collect()
    }

    /// Candidates of `category` in order; optional categories end with their
    /// null phrase.
    pub fn candidates(&self, category: &str) -> Result<&[(AttributePhrase, EmbeddingVector)]> {
        self.entries
            .get(category)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("no prompts for category {category}")))
    }
}

/// Audit record of one category's scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    pub similarities: Vec<f64>,
    /// Softmax over the candidates (optional categories only).
    pub probabilities: Option<Vec<f64>>,
    pub chosen: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributeSelection {
    pub image_id: String,
    pub required: BTreeMap<String, AttributePhrase>,
    pub optional: BTreeMap<String, AttributePhrase>,
    pub scores: Vec<CategoryScore>,
}

impl AttributeSelection {
    pub fn get(&self, category: &str) -> Option<&AttributePhrase> {
        self.required.get(category).or_else(|| self.optional.get(category))
    }

    pub fn covers(&self, template: &CaptionTemplate) -> bool {
        template.slots.iter().all(|s| self.get(s).is_some())
    }
}

fn similarities(image: &EmbeddingVector, cands: &[(AttributePhrase, EmbeddingVector)]) -> Result<Vec<f64>> {
    cands
        .iter()
        .map(|(_, v)| cosine_similarity(image.as_slice(), v.as_slice()))
        .collect()
}

/// The phrase of a required category whose prompt is most similar to the
/// image.
pub fn select_required(
    image: &EmbeddingVector,
    category: &AttributeCategory,
    bank: &PromptBank,
) -> Result<(AttributePhrase, CategoryScore)> {
    if category.kind != CategoryKind::Required {
        return Err(Error::Contract(format!("{} is not a required category", category.name)));
    }
    let cands = bank.candidates(&category.name)?;
    if cands.is_empty() {
        return Err(Error::Contract(format!("category {} has no phrases", category.name)));
    }
    let sims = similarities(image, cands)?;
    let phrase = cands[argmax(&sims)].0.clone();
    let score = CategoryScore {
        category: category.name.clone(),
        similarities: sims,
        probabilities: None,
        chosen: Some(phrase.surface.clone()),
    };
    Ok((phrase, score))
}

/// Softmax over the category's phrases plus its null phrase; the winner is
/// kept only if it is a real phrase and its probability exceeds `threshold`.
pub fn select_optional(
    image: &EmbeddingVector,
    category: &AttributeCategory,
    bank: &PromptBank,
    threshold: f64,
    scale: f64,
) -> Result<(Option<AttributePhrase>, CategoryScore)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if category.kind != CategoryKind::Optional {
        return Err(Error::Contract(format!("{} is not an optional category", category.name)));
    }
    let cands = bank.candidates(&category.name)?;
    let sims = similarities(image, cands)?;
    let probs = softmax(&sims, scale)?;
    let best = argmax(&probs);
    let null_index = cands.len() - 1;
    let chosen = (best != null_index && probs[best] > threshold).then(|| cands[best].0.clone());
    let score = CategoryScore {
        category: category.name.clone(),
        similarities: sims,
        probabilities: Some(probs),
        chosen: chosen.as_ref().map(|p| p.surface.clone()),
    };
    Ok((chosen, score))
}

/// Runs both selection rules over every category of the ontology.
pub fn select_attributes(
    image_id: &str,
    image: &EmbeddingVector,
    ontology: &AttributeOntology,
    bank: &PromptBank,
    config: &GeneratorConfig,
) -> Result<AttributeSelection> {
    let mut sel = AttributeSelection {
        image_id: image_id.to_owned(),
        ..Default::default()
    };
    for c in ontology.required() {
        let (p, s) = select_required(image, c, bank)?;
        sel.required.insert(c.name.clone(), p);
        sel.scores.push(s);
    }
    for c in ontology.optional() {
        let (p, s) = select_optional(image, c, bank, config.threshold, config.scale)?;
        if let Some(p) = p {
            sel.optional.insert(c.name.clone(), p);
        }
        sel.scores.push(s);
    }
    Ok(sel)
}

/// Uniform choice among the templates whose every slot is selected.
pub fn choose_template<'a, R: Rng>(
    templates: &'a [CaptionTemplate],
    selection: &AttributeSelection,
    rng: &mut R,
) -> Result<&'a CaptionTemplate> {
    let covered: Vec<&CaptionTemplate> = templates.iter().filter(|t| selection.covers(t)).collect();
    if covered.is_empty() {
        return Err(Error::Generation {
            image_id: selection.image_id.clone(),
            message: "no template is covered by the selected attributes".into(),
        });
    }
    Ok(covered[rng.random_range(0..covered.len())])
}

/// Writes the selected phrase surfaces into the template's blanks.
pub fn fill_template(template: &CaptionTemplate, selection: &AttributeSelection) -> Result<PseudoCaption> {
    let mut fills = BTreeMap::new();
    for slot in &template.slots {
        let phrase = selection.get(slot).ok_or_else(|| {
            Error::Contract(format!(
                "template {} uses {{{slot}}} but {} has no {slot} selected",
                template.id, selection.image_id
            ))
        })?;
        fills.insert(slot.clone(), phrase.surface.clone());
    }
    Ok(PseudoCaption {
        image_id: selection.image_id.clone(),
        template_id: template.id,
        text: template.render(&fills)?,
        fills,
    })
}

/// Independently per slot, with probability `rate`, swaps the phrase for a
/// uniformly chosen synonym. Phrases without synonyms are left alone.
pub fn substitute_synonyms<R: Rng>(
    caption: &PseudoCaption,
    template: &CaptionTemplate,
    ontology: &AttributeOntology,
    rng: &mut R,
    rate: f64,
) -> Result<PseudoCaption> {
    if template.id != caption.template_id {
        return Err(Error::Contract(format!(
            "caption was rendered from template {}, not {}",
            caption.template_id, template.id
        )));
    }
    let mut fills = caption.fills.clone();
    for (slot, surface) in fills.iter_mut() {
        let hit = rng.random_bool(rate);
        let synonyms = ontology
            .category(slot)
            .and_then(|c| c.phrase(surface))
            .map(|p| p.synonyms.as_slice())
            .unwrap_or_default();
        if hit && !synonyms.is_empty() {
            *surface = synonyms[rng.random_range(0..synonyms.len())].clone();
        }
    }
    Ok(PseudoCaption {
        image_id: caption.image_id.clone(),
        template_id: caption.template_id,
        text: template.render(&fills)?,
        fills,
    })
}

/// Per-image generator seed derived from the run seed and the image id.
pub fn image_seed(global_seed: u64, image_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"pedtext-image-seed");
    h.update(global_seed.to_le_bytes());
    h.update(image_id.as_bytes());
    h.finalize().into()
}

/// A caption plus the selection it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub caption: PseudoCaption,
    pub selection: AttributeSelection,
}

/// Everything the generator needs besides the image.
pub struct CaptionGenerator<'a> {
    pub ontology: &'a AttributeOntology,
    pub templates: &'a [CaptionTemplate],
    pub backend: &'a dyn ScorerBackend,
    pub bank: &'a PromptBank,
    pub config: &'a GeneratorConfig,
}

impl CaptionGenerator<'_> {
    /// Embed, select, choose a template, fill it, substitute synonyms. A pure
    /// function of the image bytes/id, the inputs above and `seed`.
    pub fn generate(&self, image: &ImageRecord, seed: u64) -> Result<GeneratedCaption> {
        self.config.validate()?;
        let mut rng = ChaCha8Rng::from_seed(image_seed(seed, &image.id));
        let vec = self
            .backend
            .embed_image(image)
            .map_err(|e| e.in_stage("embed"))?;
        let selection = select_attributes(&image.id, &vec, self.ontology, self.bank, self.config)
            .map_err(|e| e.in_stage("conquer"))?;
        let combine = |rng: &mut ChaCha8Rng| -> Result<PseudoCaption> {
            let template = choose_template(self.templates, &selection, rng)?;
            let plain = fill_template(template, &selection)?;
            substitute_synonyms(&plain, template, self.ontology, rng, self.config.synonym_rate)
        };
        let caption = combine(&mut rng).map_err(|e| e.in_stage("combine"))?;
        Ok(GeneratedCaption { caption, selection })
    }

    /// Generates captions for many images on `workers` threads. Output order
    /// follows input order and does not depend on the worker count.
    pub fn generate_all(&self, images: &[ImageRecord], seed: u64, workers: usize) -> Result<Vec<GeneratedCaption>> {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| images.par_iter().map(|img| self.generate(img, seed)).collect())
    }
}

/// Bytes a backend sees for a manifest record: the image file, or the
/// little-endian encoding of an inline feature vector.
pub fn record_bytes(record: &PersonRecord, base: &Path) -> Result<Vec<u8>> {
    match record.image()? {
        ImageSource::Path(p) => std::fs::read(base.join(p)).map_err(|e| Error::Input {
            id: record.image_id.clone(),
            message: format!("cannot read {p}: {e}"),
        }),
        ImageSource::Features(f) => Ok(f.iter().flat_map(|x| x.to_le_bytes()).collect()),
    }
}

/// Captions every record of `manifest`, replacing caption, fills and
/// template id.
pub fn caption_manifest(
    generator: &CaptionGenerator<'_>,
    manifest: &DatasetManifest,
    base: &Path,
    seed: u64,
    workers: usize,
) -> Result<DatasetManifest> {
    let images = manifest
        .records
        .iter()
        .map(|r| Ok(ImageRecord::new(r.image_id.clone(), record_bytes(r, base)?)))
        .collect::<Result<Vec<_>>>()?;
    let generated = generator.generate_all(&images, seed, workers)?;
    let records = manifest
        .records
        .iter()
        .zip(generated)
        .map(|(r, g)| PersonRecord {
            caption: g.caption.text,
            fills: Some(g.caption.fills),
            template_id: Some(g.caption.template_id),
            ..r.clone()
        })
        .collect();
    Ok(DatasetManifest { records })
}

/// Convenience wrapper building the prompt bank on the fly.
pub fn generate_caption(
    image: &ImageRecord,
    ontology: &AttributeOntology,
    templates: &[CaptionTemplate],
    backend: &dyn ScorerBackend,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<GeneratedCaption> {
    let bank = PromptBank::build(ontology, backend)?;
    CaptionGenerator {
        ontology,
        templates,
        backend,
        bank: &bank,
        config,
    }
    .generate(image, seed)
}
