use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{OPTIONAL_CATEGORIES, REQUIRED_CATEGORIES};

const DEFAULT_TEMPLATES: &str = include_str!("../../assets/templates.tsv");
const ALT_TEMPLATES: &str = include_str!("../../assets/templates_alt.tsv");

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

/// A sentence pattern with `{category}` blanks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionTemplate {
    pub id: u32,
    pub pattern: String,
    pub slots: BTreeSet<String>,
    pieces: Vec<Piece>,
}

impl CaptionTemplate {
    /// Parses `pattern`. Every slot must name a known category and all six
    /// required categories must appear.
    pub fn parse(id: u32, pattern: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut slots = BTreeSet::new();
        let mut rest = pattern;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                pieces.push(Piece::Text(rest[..open].to_owned()));
            }
            let close = rest[open..].find('}').ok_or_else(|| {
                Error::Validation(format!("template {id}: unclosed '{{'"))
            })? + open;
            let name = &rest[open + 1..close];
            if !REQUIRED_CATEGORIES.contains(&name) && !OPTIONAL_CATEGORIES.contains(&name) {
                return Err(Error::Validation(format!(
                    "template {id}: unknown slot {{{name}}}"
                )));
            }
            slots.insert(name.to_owned());
            pieces.push(Piece::Slot(name.to_owned()));
            rest = &rest[close + 1..];
        }
        if rest.contains('}') {
            return Err(Error::Validation(format!("template {id}: stray '}}'")));
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_owned()));
        }
        if let Some(missing) = REQUIRED_CATEGORIES.iter().find(|r| !slots.contains(**r)) {
            return Err(Error::Validation(format!(
                "template {id}: required slot {{{missing}}} is missing"
            )));
        }
        Ok(Self {
            id,
            pattern: pattern.to_owned(),
            slots,
            pieces,
        })
    }

    pub fn optional_slots(&self) -> impl Iterator<Item = &str> {
        self.slots
            .iter()
            .map(String::as_str)
            .filter(|s| OPTIONAL_CATEGORIES.contains(s))
    }

    /// Substitutes every slot. Fails if a slot has no fill.
    pub fn render(&self, fills: &BTreeMap<String, String>) -> Result<String> {
        let mut out = String::with_capacity(self.pattern.len() + 64);
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(fills.get(s).ok_or_else(|| {
                    Error::Contract(format!("template {} needs a fill for {{{s}}}", self.id))
                })?),
            }
        }
        Ok(out)
    }

    /// Recovers the slot fills from text rendered with this template. Repeated
    /// slots must carry identical text.
    pub fn extract_fills(&self, text: &str) -> Option<BTreeMap<String, String>> {
        fn go(
            pieces: &[Piece],
            text: &str,
            fills: &mut BTreeMap<String, String>,
        ) -> bool {
            let Some((first, rest)) = pieces.split_first() else {
                return text.is_empty();
            };
            match first {
                Piece::Text(t) => text.strip_prefix(t.as_str()).is_some_and(|r| go(rest, r, fills)),
                Piece::Slot(s) => {
                    if let Some(v) = fills.get(s).cloned() {
                        return text.strip_prefix(v.as_str()).is_some_and(|r| go(rest, r, fills));
                    }
                    for end in (1..=text.len()).filter(|e| text.is_char_boundary(*e)) {
                        fills.insert(s.clone(), text[..end].to_owned());
                        if go(rest, &text[end..], fills) {
                            return true;
                        }
                    }
                    fills.remove(s);
                    false
                }
            }
        }
        let mut fills = BTreeMap::new();
        go(&self.pieces, text, &mut fills).then_some(fills)
    }
}

/// Parses `id<TAB>pattern` lines. Blank lines and lines starting with `#` are
/// skipped.
pub fn parse_templates(text: &str, origin: &Path) -> Result<Vec<CaptionTemplate>> {
    let mut out: Vec<CaptionTemplate> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_err = |message: String| Error::Line {
            path: origin.to_path_buf(),
            line: n + 1,
            message,
        };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, pattern) = line
            .split_once('\t')
            .ok_or_else(|| line_err("expected id<TAB>pattern".into()))?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| line_err(format!("bad template id {id:?}")))?;
        if out.iter().any(|t| t.id == id) {
            return Err(line_err(format!("duplicate template id {id}")));
        }
        out.push(CaptionTemplate::parse(id, pattern).map_err(|e| line_err(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("{}: no templates", origin.display())));
    }
    Ok(out)
}

pub fn load_templates(path: &Path) -> Result<Vec<CaptionTemplate>> {
    parse_templates(&std::fs::read_to_string(path)?, path)
}

/// The shipped template pack.
pub fn default_templates() -> Vec<CaptionTemplate> {
    parse_templates(DEFAULT_TEMPLATES, Path::new("templates.tsv")).expect("shipped templates parse")
}

/// A second, stylistically different pack for domain-shift experiments.
pub fn alt_templates() -> Vec<CaptionTemplate> {
    parse_templates(ALT_TEMPLATES, Path::new("templates_alt.tsv")).expect("shipped templates parse")
}

/// A generated sentence together with the template and slot text behind it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoCaption {
    pub image_id: String,
    pub template_id: u32,
    pub text: String,
    pub fills: BTreeMap<String, String>,
}
