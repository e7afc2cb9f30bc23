use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fixed token length of every encoded caption.
pub const MAX_TEXT_LEN: usize = 100;

/// Word-level vocabulary. Ids 0..4 are `[PAD]`, `[UNK]`, `[CLS]`, `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const CLS: u32 = 2;
    pub const MASK: u32 = 3;
    pub const SPECIALS: [&'static str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != Self::SPECIALS {
            return Err(Error::Validation(
                "vocabulary must start with [PAD], [UNK], [CLS], [MASK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials followed by every word of `texts` in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words_seen = BTreeSet::new();
        for t in texts {
            words_seen.extend(words(t));
        }
        let tokens = Self::SPECIALS
            .iter()
            .map(|s| (*s).to_owned())
            .chain(words_seen.into_iter().filter(|w| !Self::SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// First id that is not a special token.
    pub fn first_regular(&self) -> u32 {
        Self::SPECIALS.len() as u32
    }

    /// Hex SHA-256 of the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One token per line; the line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned).collect()).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Lowercased word tokens. Letters, digits, `-` and `'` form words; any
/// other non-space character becomes a token of its own.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '-' || ch == '\'' {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// `[CLS]` followed by word ids, truncated or `[PAD]`-filled to a fixed
/// length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
}

impl TokenizedText {
    /// Number of leading non-pad tokens.
    pub fn content_len(&self) -> usize {
        self.ids.iter().take_while(|&&i| i != Vocabulary::PAD).count()
    }

    pub fn content(&self) -> &[u32] {
        &self.ids[..self.content_len()]
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenizedText {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(Vocabulary::CLS);
    ids.extend(words(text).iter().map(|w| vocab.id(w)));
    ids.truncate(max_len);
    ids.resize(max_len, Vocabulary::PAD);
    TokenizedText { ids }
}
