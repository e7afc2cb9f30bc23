//! Synthetic person benchmark: identities with known attributes rendered as
//! feature vectors, scripted so the generator recovers those attributes.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, PersonRecord, Split};
use crate::finetune::FinetuneConfig;
use crate::error::{Error, Result};
use crate::generator::{caption_manifest, CaptionGenerator, CaptionTemplate, GeneratorConfig, PromptBank};
use crate::model::Temperature;
use crate::ontology::{AttributeOntology, CategoryKind};
use crate::optim::GroupRates;
use crate::pretrain::{ArchConfig, PretrainConfig};
use crate::scorer::{MockBackend, ScriptedBackend, ScriptedTruth};

/// Text-embedding width of the scripted backend used for toy captions.
pub const SCRIPT_DIMENSION: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    /// Length of each feature vector; split evenly over `feature_tokens`
    /// body-part chunks.
    pub feature_dim: usize,
    pub feature_tokens: usize,
    /// Std. dev. of the per-identity offset shared by all its images.
    pub identity_noise: f64,
    /// Std. dev. of the per-image noise.
    pub image_noise: f64,
    /// Chance that an identity shows each optional attribute.
    pub optional_rate: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            identities: 32,
            images_per_identity: 8,
            feature_dim: 64,
            feature_tokens: 4,
            identity_noise: 0.3,
            image_noise: 0.15,
            optional_rate: 0.3,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.images_per_identity < 3 {
            return Err(Error::Config(
                "the toy benchmark needs ≥ 2 identities and ≥ 3 images each".into(),
            ));
        }
        if self.feature_tokens == 0 || self.feature_dim % self.feature_tokens != 0 {
            return Err(Error::Config("feature_dim must be a multiple of feature_tokens".into()));
        }
        if !(0.0..=1.0).contains(&self.optional_rate) || self.identity_noise < 0.0 || self.image_noise < 0.0 {
            return Err(Error::Config("noise levels must be ≥ 0 and optional_rate in [0, 1]".into()));
        }
        Ok(())
    }

    /// The last two images of each identity are the query and gallery
    /// items; the rest train.
    pub fn split_of(&self, image_index: usize) -> Split {
        match self.images_per_identity - image_index {
            2 => Split::Query,
            1 => Split::Gallery,
            _ => Split::Train,
        }
    }
}

/// Uncaptioned image records and the attributes behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBenchmark {
    pub images: DatasetManifest,
    pub truth: ScriptedTruth,
}

/// Body part whose feature chunk carries a category.
fn body_part(category: &str) -> usize {
    match category {
        "age" | "gender" | "hair_length" | "hat" | "glasses" => 0,
        "upper_clothes" | "bag" | "cellphone" | "smoke" => 1,
        "lower_clothes" | "gloves" | "umbrella" => 2,
        _ => 3,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn toy_benchmark(ontology: &AttributeOntology, config: &ToyConfig, seed: u64) -> Result<ToyBenchmark> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunk = config.feature_dim / config.feature_tokens;

    // One unit-scale signature per phrase, living in its body part's chunk.
    let mut signature: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for cat in ontology.categories() {
        let part = body_part(&cat.name) % config.feature_tokens;
        for phrase in &cat.phrases {
            let mut v = vec![0.0; config.feature_dim];
            let part_values = gaussian(&mut rng, chunk, 1.0 / (chunk as f64).sqrt());
            v[part * chunk..(part + 1) * chunk].copy_from_slice(&part_values);
            signature.insert((cat.name.clone(), phrase.surface.clone()), v);
        }
    }

    let mut records = Vec::with_capacity(config.identities * config.images_per_identity);
    let mut truth = ScriptedTruth::new();
    for id in 0..config.identities {
        let mut attrs = BTreeMap::new();
        for cat in ontology.categories() {
            let present = cat.kind == CategoryKind::Required || rng.random_bool(config.optional_rate);
            let surface = if present {
                cat.phrases[rng.random_range(0..cat.phrases.len())].surface.clone()
            } else {
                cat.null_phrase().expect("optional category").surface
            };
            attrs.insert(cat.name.clone(), surface);
        }
        let mut base = gaussian(&mut rng, config.feature_dim, config.identity_noise);
        for (cat, surface) in &attrs {
            if let Some(sig) = signature.get(&(cat.clone(), surface.clone())) {
                base.iter_mut().zip(sig).for_each(|(b, s)| *b += s);
            }
        }
        for j in 0..config.images_per_identity {
            let image_id = format!("id{id:03}_img{j}");
            let noise = gaussian(&mut rng, config.feature_dim, config.image_noise);
            let features = base.iter().zip(noise).map(|(b, n)| b + n).collect();
            truth.insert(image_id.clone(), attrs.clone());
            records.push(PersonRecord {
                image_id,
                image_ref: None,
                features: Some(features),
                caption: String::new(),
                identity: Some(id as u32),
                fills: None,
                split: Some(config.split_of(j)),
                template_id: None,
            });
        }
    }
    Ok(ToyBenchmark {
        images: DatasetManifest::new(records)?,
        truth,
    })
}

/// The scripted scorer for a benchmark's truth file.
pub fn toy_backend(ontology: &AttributeOntology, truth: &ScriptedTruth, seed: u64) -> Result<ScriptedBackend> {
    ScriptedBackend::new(Arc::new(MockBackend::new(seed, SCRIPT_DIMENSION)), ontology, truth)
}

/// Builds a benchmark and captions every image with the generator.
pub fn toy_dataset(
    ontology: &AttributeOntology,
    templates: &[CaptionTemplate],
    toy: &ToyConfig,
    generator: &GeneratorConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    let bench = toy_benchmark(ontology, toy, seed)?;
    let backend = toy_backend(ontology, &bench.truth, seed)?;
    let bank = PromptBank::build(ontology, &backend)?;
    let gen = CaptionGenerator {
        ontology,
        templates,
        backend: &backend,
        bank: &bank,
        config: generator,
    };
    caption_manifest(&gen, &bench.images, std::path::Path::new("."), seed, 1)
}

/// Encoder sizes that train in seconds on the toy benchmark: one attention
/// block over caption tokens and a linear map over the feature chunks.
pub fn toy_arch(config: &ToyConfig) -> ArchConfig {
    ArchConfig {
        text_layers: 1,
        visual_layers: 0,
        width: 64,
        heads: 4,
        mlp: 128,
        embed_dim: 64,
        feature_tokens: config.feature_tokens,
        ..ArchConfig::default()
    }
}

/// Pre-training settings for the toy benchmark. The full-scale rates and
/// batch sizes are far too small and too large for 192 training pairs.
pub fn toy_pretrain_config(config: &ToyConfig, beta: u8) -> PretrainConfig {
    PretrainConfig {
        arch: toy_arch(config),
        epochs: 20,
        batch_size: 32,
        lr: 3e-3,
        beta,
        temperature: Temperature::Learnable(10.0),
        log_every: 0,
        ..PretrainConfig::default()
    }
}

pub fn toy_finetune_config(config: &ToyConfig, gamma: u8) -> FinetuneConfig {
    FinetuneConfig {
        arch: toy_arch(config),
        epochs: 60,
        batch_size: 32,
        rates: GroupRates::uniform(3e-3),
        gamma,
        log_every: 0,
        ..FinetuneConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::default_templates;

    #[test]
    fn layout_and_splits() {
        let ont = AttributeOntology::default_ontology();
        let cfg = ToyConfig::default();
        let b = toy_benchmark(&ont, &cfg, 1).unwrap();
        assert_eq!(b.images.len(), 256);
        assert_eq!(b.images.split(Split::Query).len(), 32);
        assert_eq!(b.images.split(Split::Gallery).len(), 32);
        assert_eq!(b.images.split(Split::Train).len(), 192);
        assert_eq!(b.truth.len(), 256);
        assert!(b.truth.values().all(|a| a.len() == 14));
        assert_eq!(b, toy_benchmark(&ont, &cfg, 1).unwrap());
    }

    #[test]
    fn captions_name_the_true_required_attributes() {
        let ont = AttributeOntology::default_ontology();
        let toy = ToyConfig {
            identities: 4,
            images_per_identity: 3,
            ..ToyConfig::default()
        };
        let gen = GeneratorConfig {
            synonym_rate: 0.0,
            ..GeneratorConfig::default()
        };
        let bench = toy_benchmark(&ont, &toy, 5).unwrap();
        let m = toy_dataset(&ont, &default_templates(), &toy, &gen, 5).unwrap();
        for r in &m.records {
            let fills = r.fills.as_ref().unwrap();
            for cat in ont.required() {
                assert_eq!(fills[&cat.name], bench.truth[&r.image_id][&cat.name]);
            }
        }
    }
}
