//! Dataset manifests, tokenization and batching.

mod batch;
mod image;
mod tokenizer;

pub use batch::{epoch_batches, BatchMode};
pub use image::{load_patch_grid, PatchGridSpec};
pub use tokenizer::{tokenize, words, TokenizedText, Vocabulary, MAX_TEXT_LEN};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// Where a record's image lives.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource<'a> {
    Path(&'a str),
    Features(&'a [f64]),
}

/// One line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonRecord {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fills: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<u32>,
}

impl PersonRecord {
    pub fn image(&self) -> Result<ImageSource<'_>> {
        match (&self.image_ref, &self.features) {
            (Some(p), None) => Ok(ImageSource::Path(p)),
            (None, Some(f)) => Ok(ImageSource::Features(f)),
            _ => Err(Error::Validation(format!(
                "record {} must have exactly one of image_ref and features",
                self.image_id
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<PersonRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<PersonRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::Validation(format!("duplicate image_id {}", r.image_id)));
            }
            r.image()?;
        }
        Ok(())
    }

    /// Records tagged with `split`. Untagged records count as training data.
    pub fn split(&self, split: Split) -> Vec<&PersonRecord> {
        self.records
            .iter()
            .filter(|r| r.split.unwrap_or(Split::Train) == split)
            .collect()
    }

    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            records: self.split(split).into_iter().cloned().collect(),
        }
    }

    fn identities(&self, split: Split) -> BTreeSet<u32> {
        self.split(split).iter().filter_map(|r| r.identity).collect()
    }

    /// Checks the evaluation splits: every query identity must appear in the
    /// gallery. With `disjoint_train`, training identities must also be absent
    /// from the evaluation splits.
    pub fn check_splits(&self, disjoint_train: bool) -> Result<()> {
        let query = self.identities(Split::Query);
        let gallery = self.identities(Split::Gallery);
        if let Some(q) = query.iter().find(|q| !gallery.contains(q)) {
            return Err(Error::Validation(format!(
                "query identity {q} has no gallery image"
            )));
        }
        if disjoint_train {
            let train = self.identities(Split::Train);
            if let Some(t) = train.iter().find(|t| query.contains(t) || gallery.contains(t)) {
                return Err(Error::Validation(format!(
                    "identity {t} appears in both training and evaluation splits"
                )));
            }
        }
        Ok(())
    }
}

/// Reads newline-delimited JSON records. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PersonRecord = serde_json::from_str(&line).map_err(|e| Error::Line {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    let m = DatasetManifest { records };
    m.validate().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(m)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
