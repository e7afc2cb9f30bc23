use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::ontology::OPTIONAL_CATEGORIES;

/// Optional-attribute occurrence counts over a caption corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Captions with fill metadata.
    pub caption_count: usize,
    /// Rows without fill metadata; excluded from every other count.
    pub unknown: usize,
    pub optional_counts: BTreeMap<String, usize>,
    pub total_optional: usize,
}

impl CorpusStats {
    /// Fraction of captions mentioning `category`.
    pub fn frequency(&self, category: &str) -> f64 {
        if self.caption_count == 0 {
            return 0.0;
        }
        self.optional_counts.get(category).copied().unwrap_or(0) as f64 / self.caption_count as f64
    }

    /// Share of all optional-attribute occurrences taken by `category`.
    pub fn share(&self, category: &str) -> f64 {
        if self.total_optional == 0 {
            return 0.0;
        }
        self.optional_counts.get(category).copied().unwrap_or(0) as f64 / self.total_optional as f64
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "captions: {}  (without fills: {})", self.caption_count, self.unknown)?;
        writeln!(f, "optional occurrences: {}", self.total_optional)?;
        writeln!(f, "{:<12} {:>8} {:>10} {:>8}", "attribute", "count", "per-caption", "share")?;
        for (name, count) in &self.optional_counts {
            writeln!(
                f,
                "{:<12} {:>8} {:>10.4} {:>8.4}",
                name,
                count,
                self.frequency(name),
                self.share(name)
            )?;
        }
        Ok(())
    }
}

pub fn corpus_stats(manifest: &DatasetManifest) -> CorpusStats {
    let mut counts: BTreeMap<String, usize> =
        OPTIONAL_CATEGORIES.iter().map(|c| ((*c).to_owned(), 0)).collect();
    let mut caption_count = 0;
    let mut unknown = 0;
    for r in &manifest.records {
        let Some(fills) = &r.fills else {
            unknown += 1;
            continue;
        };
        caption_count += 1;
        for slot in fills.keys() {
            if let Some(c) = counts.get_mut(slot) {
                *c += 1;
            }
        }
    }
    let total_optional = counts.values().sum();
    CorpusStats {
        caption_count,
        unknown,
        optional_counts: counts,
        total_optional,
    }
}
