//! Attribute vocabulary for describing pedestrians and the prompts derived
//! from it.
//!
//! Six categories are required (every person exhibits them) and eight are
//! optional. Each category lists candidate phrases, and each phrase may carry
//! synonyms used to diversify generated captions.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REQUIRED_CATEGORIES: [&str; 6] = [
    "age",
    "gender",
    "upper_clothes",
    "lower_clothes",
    "action",
    "hair_length",
];

pub const OPTIONAL_CATEGORIES: [&str; 8] = [
    "bag",
    "glasses",
    "smoke",
    "hat",
    "cellphone",
    "umbrella",
    "gloves",
    "vehicle",
];

const DEFAULT_ONTOLOGY: &str = include_str!("../assets/ontology.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryKind {
    Required,
    Optional,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributePhrase {
    pub surface: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

impl AttributePhrase {
    pub fn new(surface: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            synonyms: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeCategory {
    pub name: String,
    pub kind: CategoryKind,
    pub phrases: Vec<AttributePhrase>,
}

impl AttributeCategory {
    /// The phrase standing for "attribute absent". Only optional categories
    /// have one.
    pub fn null_phrase(&self) -> Option<AttributePhrase> {
        (self.kind == CategoryKind::Optional).then(|| AttributePhrase::new(format!("no {}", self.name)))
    }

    pub fn phrase(&self, surface: &str) -> Option<&AttributePhrase> {
        self.phrases.iter().find(|p| p.surface == surface)
    }

    /// Candidate phrases for selection: the listed phrases, followed by the
    /// null phrase for optional categories.
    pub fn candidates(&self) -> Vec<AttributePhrase> {
        let mut out = self.phrases.clone();
        out.extend(self.null_phrase());
        out
    }
}

/// Text fed to the scorer's text tower.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptText(String);

impl PromptText {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PromptText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Validated attribute vocabulary. Categories are kept in canonical order:
/// the required categories, then the optional ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeOntology {
    categories: Vec<AttributeCategory>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoryRecord {
    name: String,
    phrases: Vec<AttributePhrase>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OntologyFile {
    required: Vec<CategoryRecord>,
    optional: Vec<CategoryRecord>,
}

impl AttributeOntology {
    /// Builds and validates an ontology from its categories.
    pub fn new(categories: Vec<AttributeCategory>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &categories {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Validation(format!("duplicate category: {}", c.name)));
            }
            let expected = if REQUIRED_CATEGORIES.contains(&c.name.as_str()) {
                CategoryKind::Required
            } else if OPTIONAL_CATEGORIES.contains(&c.name.as_str()) {
                CategoryKind::Optional
            } else {
                return Err(Error::Validation(format!("unknown category: {}", c.name)));
            };
            if c.kind != expected {
                return Err(Error::Validation(format!(
                    "category {} must be {:?}, found {:?}",
                    c.name, expected, c.kind
                )));
            }
            validate_phrases(c)?;
        }
        for name in REQUIRED_CATEGORIES {
            if !seen.contains(name) {
                return Err(Error::Validation(format!("missing required category: {name}")));
            }
        }
        for name in OPTIONAL_CATEGORIES {
            if !seen.contains(name) {
                return Err(Error::Validation(format!("missing optional category: {name}")));
            }
        }
        let order = |name: &str| {
            REQUIRED_CATEGORIES
                .iter()
                .chain(OPTIONAL_CATEGORIES.iter())
                .position(|n| *n == name)
                .unwrap_or(usize::MAX)
        };
        let mut categories = categories;
        categories.sort_by_key(|c| order(&c.name));
        Ok(Self { categories })
    }

    /// The ontology shipped with the crate.
    pub fn default_ontology() -> Self {
        Self::from_json(DEFAULT_ONTOLOGY).expect("shipped ontology is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: OntologyFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    fn from_file(file: OntologyFile) -> Result<Self> {
        let to_cat = |kind| {
            move |r: CategoryRecord| AttributeCategory {
                name: r.name,
                kind,
                phrases: r.phrases,
            }
        };
        let mut categories: Vec<_> = file
            .required
            .into_iter()
            .map(to_cat(CategoryKind::Required))
            .collect();
        categories.extend(file.optional.into_iter().map(to_cat(CategoryKind::Optional)));
        Self::new(categories)
    }

    pub fn to_json(&self) -> String {
        let record = |c: &AttributeCategory| CategoryRecord {
            name: c.name.clone(),
            phrases: c.phrases.clone(),
        };
        let file = OntologyFile {
            required: self.required().map(record).collect(),
            optional: self.optional().map(record).collect(),
        };
        serde_json::to_string_pretty(&file).expect("ontology serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn categories(&self) -> &[AttributeCategory] {
        &self.categories
    }

    pub fn required(&self) -> impl Iterator<Item = &AttributeCategory> {
        self.categories.iter().filter(|c| c.kind == CategoryKind::Required)
    }

    pub fn optional(&self) -> impl Iterator<Item = &AttributeCategory> {
        self.categories.iter().filter(|c| c.kind == CategoryKind::Optional)
    }

    pub fn category(&self, name: &str) -> Option<&AttributeCategory> {
        self.categories.iter().find(|c| c.name == name)
    }
}

fn validate_phrases(c: &AttributeCategory) -> Result<()> {
    if c.phrases.is_empty() {
        return Err(Error::Validation(format!("category {} has no phrases", c.name)));
    }
    let mut surfaces = HashSet::new();
    for p in &c.phrases {
        if p.surface.trim().is_empty() {
            return Err(Error::Validation(format!("empty phrase in category {}", c.name)));
        }
        if !surfaces.insert(p.surface.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate phrase \"{}\" in category {}",
                p.surface, c.name
            )));
        }
        let mut syn = HashSet::new();
        for s in &p.synonyms {
            if s == &p.surface {
                return Err(Error::Validation(format!(
                    "phrase \"{}\" in category {} lists itself as a synonym",
                    p.surface, c.name
                )));
            }
            if !syn.insert(s.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate synonym \"{}\" for phrase \"{}\" in category {}",
                    s, p.surface, c.name
                )));
            }
        }
    }
    Ok(())
}

/// Reads and validates an ontology file.
pub fn load_ontology(path: &Path) -> Result<AttributeOntology> {
    let text = std::fs::read_to_string(path)?;
    let file: OntologyFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    AttributeOntology::from_file(file)
}

/// Turns a phrase into the scorer prompt for its category.
///
/// | category | pattern |
/// |---|---|
/// | age, gender | `A photo of a {phrase}` |
/// | upper_clothes, lower_clothes | `A photo of a person wearing {phrase}` |
/// | action | `A photo of a person {phrase}` |
/// | hair_length and every optional category | `A photo of a person with {phrase}` |
///
/// The optional null phrase (`no bag`, ...) is accepted as a member of its
/// category.
pub fn to_prompt(category: &AttributeCategory, phrase: &AttributePhrase) -> Result<PromptText> {
    let is_null = category
        .null_phrase()
        .is_some_and(|n| n.surface == phrase.surface);
    if !is_null && category.phrase(&phrase.surface).is_none() {
        return Err(Error::Contract(format!(
            "phrase \"{}\" is not in category {}",
            phrase.surface, category.name
        )));
    }
    let p = &phrase.surface;
    let text = match category.name.as_str() {
        "age" | "gender" => format!("A photo of a {p}"),
        "upper_clothes" | "lower_clothes" => format!("A photo of a person wearing {p}"),
        "action" => format!("A photo of a person {p}"),
        _ => format!("A photo of a person with {p}"),
    };
    Ok(PromptText(text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_ontology_has_fourteen_categories() {
        let o = AttributeOntology::default_ontology();
        assert_eq!(o.categories().len(), 14);
        assert_eq!(o.required().count(), 6);
        assert_eq!(o.optional().count(), 8);
        assert!(o.required().all(|c| c.phrases.len() >= 4));
        assert!(o.optional().all(|c| c.phrases.len() >= 2));
    }

    fn without(name: &str) -> String {
        let o = AttributeOntology::default_ontology();
        let mut v: serde_json::Value = serde_json::from_str(&o.to_json()).unwrap();
        for key in ["required", "optional"] {
            v[key]
                .as_array_mut()
                .unwrap()
                .retain(|c| c["name"] != name);
        }
        v.to_string()
    }

    #[test]
    fn missing_required_category_is_named() {
        let err = AttributeOntology::from_json(&without("hair_length")).unwrap_err();
        assert_eq!(err.to_string(), "validation error: missing required category: hair_length");
    }

    #[test]
    fn duplicate_phrase_is_reported() {
        let o = AttributeOntology::default_ontology();
        let mut v: serde_json::Value = serde_json::from_str(&o.to_json()).unwrap();
        let hair = v["required"]
            .as_array_mut()
            .unwrap()
            .iter_mut()
            .find(|c| c["name"] == "hair_length")
            .unwrap();
        hair["phrases"]
            .as_array_mut()
            .unwrap()
            .push(serde_json::json!({"surface": "long hair", "synonyms": []}));
        let err = AttributeOntology::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("duplicate phrase \"long hair\" in category hair_length"));
    }

    #[test]
    fn synonym_equal_to_surface_is_rejected() {
        let cat = AttributeCategory {
            name: "bag".into(),
            kind: CategoryKind::Optional,
            phrases: vec![AttributePhrase {
                surface: "a bag".into(),
                synonyms: vec!["a bag".into()],
            }],
        };
        assert!(validate_phrases(&cat).is_err());
    }

    #[test]
    fn prompt_patterns() {
        let o = AttributeOntology::default_ontology();
        let upper = o.category("upper_clothes").unwrap();
        let shirt = upper.phrase("a blue striped shirt").unwrap();
        assert_eq!(
            to_prompt(upper, shirt).unwrap().as_str(),
            "A photo of a person wearing a blue striped shirt"
        );
        let gender = o.category("gender").unwrap();
        let woman = gender.phrase("woman").unwrap();
        assert_eq!(to_prompt(gender, woman).unwrap().as_str(), "A photo of a woman");
        assert_eq!(to_prompt(gender, woman).unwrap(), to_prompt(gender, woman).unwrap());
        let bag = o.category("bag").unwrap();
        let none = bag.null_phrase().unwrap();
        assert_eq!(to_prompt(bag, &none).unwrap().as_str(), "A photo of a person with no bag");
    }

    #[test]
    fn foreign_phrase_is_a_contract_error() {
        let o = AttributeOntology::default_ontology();
        let gender = o.category("gender").unwrap();
        let err = to_prompt(gender, &AttributePhrase::new("long hair")).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(to_prompt(gender, &AttributePhrase::new("no gender")).is_err());
    }

    #[test]
    fn every_prompt_contains_its_phrase() {
        let o = AttributeOntology::default_ontology();
        for c in o.categories() {
            for p in c.candidates() {
                let prompt = to_prompt(c, &p).unwrap();
                assert!(prompt.as_str().starts_with("A photo of"));
                assert!(prompt.as_str().contains(&p.surface));
            }
        }
    }
}
