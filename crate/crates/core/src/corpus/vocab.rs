use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

/// Reserved tokens, in id order.
pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_RESERVED: usize = RESERVED_TOKENS.len();

/// Token ↔ id table. Ids are dense in `[0, len)` and the reserved tokens
/// always occupy ids 0–4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    longest_token: usize,
}

impl Vocab {
    /// Reserved tokens, then every distinct character, then whole words by
    /// descending frequency (ties broken lexicographically) until
    /// `target_size` entries exist or the words run out.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, target_size: usize) -> Result<Self> {
        let mut freq: HashMap<String, u64> = HashMap::new();
        let mut chars = BTreeSet::new();
        for line in lines {
            for word in line.to_lowercase().split_whitespace() {
                chars.extend(word.chars());
                *freq.entry(word.to_string()).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let minimum = NUM_RESERVED + chars.len();
        if target_size < minimum {
            return Err(Error::Config(format!(
                "vocabulary size {target_size} is below the minimum {minimum} \
                 (reserved tokens plus {} distinct characters)",
                chars.len()
            )));
        }
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        let mut words: Vec<(String, u64)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let single: BTreeSet<String> = chars.iter().map(|c| c.to_string()).collect();
        for (word, _) in words {
            if tokens.len() >= target_size {
                break;
            }
            if !single.contains(&word) {
                tokens.push(word);
            }
        }
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r) {
            return Err(Error::Data("vocabulary does not start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let longest_token = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self {
            tokens,
            index,
            longest_token,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < NUM_RESERVED
    }

    /// Lowercases, splits on whitespace, looks each word up whole and
    /// otherwise falls back to greedy longest-prefix pieces. Characters with
    /// no entry become `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.to_lowercase().split_whitespace() {
            if let Some(id) = self.id(word) {
                ids.push(id);
                continue;
            }
            let chars: Vec<(usize, char)> = word.char_indices().collect();
            let mut i = 0;
            while i < chars.len() {
                let start = chars[i].0;
                let longest = (chars.len() - i).min(self.longest_token);
                let piece = (1..=longest).rev().find_map(|len| {
                    let end = chars.get(i + len).map_or(word.len(), |c| c.0);
                    self.id(&word[start..end]).map(|id| (id, len))
                });
                match piece {
                    Some((id, len)) => {
                        ids.push(id);
                        i += len;
                    }
                    None => {
                        ids.push(UNK);
                        i += 1;
                    }
                }
            }
        }
        ids
    }
}
