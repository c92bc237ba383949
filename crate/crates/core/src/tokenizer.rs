//! Corpus-derived surface-token vocabulary with reserved special tokens.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEP: u32 = 4;

/// Surface forms of the reserved ids, indexed by id.
pub const RESERVED_TOKENS: [&str; 5] = ["<PAD>", "<UNK>", "<BOS>", "<EOS>", "<SEP>"];

/// Token budget for classifier inputs.
pub const CLASSIFIER_BUDGET: usize = 300;
/// Token budget for summarizer (encoder) inputs.
pub const SOURCE_BUDGET: usize = 512;
/// Token budget for generated/target summaries.
pub const TARGET_BUDGET: usize = 400;
/// Minimum generated summary length.
pub const MIN_TARGET_LEN: usize = 8;

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

/// Splits on whitespace, then peels leading and trailing punctuation
/// characters off each piece as single-character tokens. Reserved markers
/// such as `<SEP>` survive as whole tokens.
pub fn surface_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        if RESERVED_TOKENS.contains(&piece) {
            out.push(piece);
            continue;
        }
        let mut start = 0;
        let mut end = piece.len();
        let mut leading = Vec::new();
        for (i, c) in piece.char_indices() {
            if !is_punct(c) {
                break;
            }
            leading.push(&piece[i..i + c.len_utf8()]);
            start = i + c.len_utf8();
        }
        let mut trailing = Vec::new();
        if start < end {
            for (i, c) in piece[start..].char_indices().rev() {
                if !is_punct(c) {
                    break;
                }
                trailing.push(&piece[start + i..start + i + c.len_utf8()]);
                end = start + i;
            }
        }
        out.extend(leading);
        if start < end {
            out.push(&piece[start..end]);
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Ordered token list; ids 0..5 are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_size: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    reserved: BTreeMap<String, u32>,
    max_size: usize,
}

/// A bounded token-id sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocab {
    /// Builds a vocabulary from the most frequent surface tokens, ties broken
    /// lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty corpus".into()));
        }
        if max_size < RESERVED_TOKENS.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "max_size {max_size} cannot hold the {} reserved tokens plus one learned token",
                RESERVED_TOKENS.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for tok in surface_tokens(text.as_ref()) {
                if !RESERVED_TOKENS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut learned: Vec<(&str, usize)> = counts.into_iter().collect();
        learned.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        learned.truncate(max_size - RESERVED_TOKENS.len());
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(learned.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens, max_size))
    }

    fn from_tokens(tokens: Vec<String>, max_size: usize) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    /// Learned (non-reserved) tokens in id order.
    pub fn learned(&self) -> &[String] {
        &self.tokens[RESERVED_TOKENS.len()..]
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    /// Encodes `text`, truncating from the right so the result fits `budget`.
    /// With `add_bos_eos` the sequence is wrapped and EOS stays the last id.
    pub fn encode(&self, text: &str, budget: usize, add_bos_eos: bool) -> TokenSeq {
        let mut ids: Vec<u32> = surface_tokens(text)
            .into_iter()
            .map(|t| self.id_or_unk(t))
            .collect();
        let room = if add_bos_eos {
            budget.saturating_sub(2)
        } else {
            budget
        };
        let truncated = ids.len() > room;
        ids.truncate(room);
        if add_bos_eos {
            if budget >= 2 {
                ids.insert(0, BOS);
                ids.push(EOS);
            } else {
                // budget < 2 cannot hold the wrapper
                ids.clear();
            }
        }
        TokenSeq { ids, truncated }
    }

    /// Joins surface forms with single spaces, dropping PAD/BOS/EOS/SEP.
    /// UNK is kept as the `<UNK>` placeholder.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?;
            if matches!(id, PAD | BOS | EOS | SEP) {
                continue;
            }
            parts.push(tok);
        }
        Ok(parts.join(" "))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            reserved: RESERVED_TOKENS
                .iter()
                .enumerate()
                .map(|(i, t)| (t.to_string(), i as u32))
                .collect(),
            max_size: self.max_size,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Vocab> {
        let file: VocabFile = serde_json::from_str(s)?;
        for (i, t) in RESERVED_TOKENS.iter().enumerate() {
            if file.tokens.get(i).map(String::as_str) != Some(*t)
                || file.reserved.get(*t) != Some(&(i as u32))
            {
                return Err(Error::InvalidArgument(format!(
                    "vocab file does not reserve {t} at id {i}"
                )));
            }
        }
        let vocab = Self::from_tokens(file.tokens, file.max_size);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::InvalidArgument("vocab file has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
