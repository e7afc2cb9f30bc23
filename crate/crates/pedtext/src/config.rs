//! Run configuration: one JSON document holding every stage's settings.
//! Unknown keys are rejected at every level.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::generator::{default_templates, load_templates, CaptionTemplate, GeneratorConfig};
use crate::ontology::{load_ontology, AttributeOntology};
use crate::pretrain::{check_gate, PretrainConfig};
use crate::scorer::{MockBackend, PluginBackend, ScorerBackend, ScriptedBackend};
use crate::toy::{toy_finetune_config, toy_pretrain_config, ToyConfig, SCRIPT_DIMENSION};

/// Embedding width assumed for plugin backends unless configured.
pub const PLUGIN_DIMENSION: usize = 512;

/// Which scorer answers the conquer-stage queries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Mock {
        #[serde(default = "mock_dimension")]
        dimension: usize,
    },
    /// Images scored from a truth file of known attributes.
    Scripted {
        truth: PathBuf,
        #[serde(default = "script_dimension")]
        dimension: usize,
    },
    /// An external process speaking the line protocol on stdin/stdout.
    Plugin {
        command: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "plugin_dimension")]
        dimension: usize,
    },
}

fn mock_dimension() -> usize {
    MockBackend::DEFAULT_DIMENSION
}

fn script_dimension() -> usize {
    SCRIPT_DIMENSION
}

fn plugin_dimension() -> usize {
    PLUGIN_DIMENSION
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock {
            dimension: mock_dimension(),
        }
    }
}

/// Parses `mock`, `scripted:TRUTH` or `plugin:COMMAND [ARGS...]`.
impl FromStr for BackendConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match (kind, rest.trim()) {
            ("mock", "") => Ok(BackendConfig::default()),
            ("scripted", truth) if !truth.is_empty() => Ok(BackendConfig::Scripted {
                truth: truth.into(),
                dimension: script_dimension(),
            }),
            ("plugin", cmd) if !cmd.is_empty() => {
                let mut parts = cmd.split_whitespace().map(str::to_owned);
                Ok(BackendConfig::Plugin {
                    command: parts.next().expect("non-empty command"),
                    args: parts.collect(),
                    dimension: plugin_dimension(),
                })
            }
            _ => Err(Error::Config(format!(
                "backend must be mock, scripted:TRUTH or plugin:COMMAND, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for BackendConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendConfig::Mock { .. } => f.write_str("mock"),
            BackendConfig::Scripted { truth, .. } => write!(f, "scripted:{}", truth.display()),
            BackendConfig::Plugin { command, args, .. } => {
                write!(f, "plugin:{command}")?;
                args.iter().try_for_each(|a| write!(f, " {a}"))
            }
        }
    }
}

impl BackendConfig {
    /// Instantiates the backend. `seed` drives the mock text encoder that
    /// the mock and scripted backends share.
    pub fn build(&self, ontology: &AttributeOntology, seed: u64) -> Result<Box<dyn ScorerBackend>> {
        match self {
            BackendConfig::Mock { dimension } => Ok(Box::new(MockBackend::new(seed, *dimension))),
            BackendConfig::Scripted { truth, dimension } => {
                let truth = ScriptedBackend::load_truth(truth)?;
                let text = Arc::new(MockBackend::new(seed, *dimension));
                Ok(Box::new(ScriptedBackend::new(text, ontology, &truth)?))
            }
            BackendConfig::Plugin {
                command,
                args,
                dimension,
            } => Ok(Box::new(PluginBackend::spawn(command, args, *dimension)?)),
        }
    }

    pub fn set_dimension(&mut self, d: usize) {
        match self {
            BackendConfig::Mock { dimension }
            | BackendConfig::Scripted { dimension, .. }
            | BackendConfig::Plugin { dimension, .. } => *dimension = d,
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            BackendConfig::Mock { dimension }
            | BackendConfig::Scripted { dimension, .. }
            | BackendConfig::Plugin { dimension, .. } => *dimension,
        }
    }
}

/// Input and output locations. Every path given must exist when the
/// configuration is validated.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Ontology file; the shipped ontology when absent.
    pub ontology: Option<PathBuf>,
    /// Template file; the shipped pack when absent.
    pub templates: Option<PathBuf>,
    /// Directory of image files or an uncaptioned manifest to caption.
    pub images: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Second-domain manifest for cross-domain evaluation.
    pub manifest_b: Option<PathBuf>,
    /// Checkpoint to fine-tune from.
    pub init: Option<PathBuf>,
    /// Checkpoint to evaluate.
    pub checkpoint: Option<PathBuf>,
}

impl PathsConfig {
    fn entries(&self) -> [(&'static str, &Option<PathBuf>); 7] {
        [
            ("ontology", &self.ontology),
            ("templates", &self.templates),
            ("images", &self.images),
            ("manifest", &self.manifest),
            ("manifest_b", &self.manifest_b),
            ("init", &self.init),
            ("checkpoint", &self.checkpoint),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Caption-generation threads.
    pub workers: usize,
    pub paths: PathsConfig,
    pub backend: BackendConfig,
    pub generate: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            paths: PathsConfig::default(),
            backend: BackendConfig::default(),
            generate: GeneratorConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Settings for the synthetic benchmark: the toy training recipe with
    /// both gates on.
    pub fn toy() -> Self {
        let toy = ToyConfig::default();
        Self {
            pretrain: toy_pretrain_config(&toy, 1),
            finetune: toy_finetune_config(&toy, 1),
            toy,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks value ranges and gates without touching the file system.
    pub fn validate_values(&self) -> Result<()> {
        check_gate("beta", self.pretrain.beta)?;
        check_gate("gamma", self.finetune.gamma)?;
        if self.backend.dimension() == 0 {
            return Err(Error::Config("backend dimension must be positive".into()));
        }
        self.generate.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.toy.validate()
    }

    /// [`validate_values`](Self::validate_values) plus existence of every
    /// configured input path.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        for (name, path) in self.paths.entries() {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Validation(format!("paths.{name}: {} does not exist", p.display())));
                }
            }
        }
        if let BackendConfig::Scripted { truth, .. } = &self.backend {
            if !truth.exists() {
                return Err(Error::Validation(format!("backend.truth: {} does not exist", truth.display())));
            }
        }
        Ok(())
    }

    pub fn ontology(&self) -> Result<AttributeOntology> {
        match &self.paths.ontology {
            Some(p) => load_ontology(p),
            None => Ok(AttributeOntology::default_ontology()),
        }
    }

    pub fn templates(&self) -> Result<Vec<CaptionTemplate>> {
        match &self.paths.templates {
            Some(p) => load_templates(p),
            None => Ok(default_templates()),
        }
    }
}

/// Directory that relative image paths in `manifest` resolve against.
pub fn manifest_base(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}
