use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ids framed by `BOS … EOS`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || ids[ids.len() - 1] != EOS {
            return Err(Error::InvalidArgument(
                "token sequence must start with BOS and end with EOS".into(),
            ));
        }
        Ok(TokenSequence(ids))
    }

    /// Wraps content tokens with BOS/EOS.
    pub fn from_content(content: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(content);
        ids.push(EOS);
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    /// Full length including BOS and EOS.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Content length T (without BOS/EOS).
    pub fn content_len(&self) -> usize {
        self.0.len() - 2
    }

    pub fn content(&self) -> &[u32] {
        &self.0[1..self.0.len() - 1]
    }
}

/// Lowercase whitespace tokenizer; `.` and `,` become separate tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch == '.' || ch == ',' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

impl Vocab {
    /// Specials first, then every word of `texts` in sorted order.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let words: BTreeSet<String> = texts.iter().flat_map(|t| split_words(t.as_ref())).collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                words
                    .into_iter()
                    .filter(|w| !SPECIALS.contains(&w.as_str())),
            )
            .collect();
        Vocab::from_tokens(tokens).expect("specials are distinct")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Format(
                "vocabulary must begin with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let content: Vec<u32> = split_words(text).iter().map(|w| self.id(w)).collect();
        TokenSequence::from_content(&content)
    }

    /// Joins content tokens with spaces, attaching `.`/`,` to the previous word.
    pub fn decode(&self, seq: &[u32]) -> String {
        let mut out = String::new();
        for &id in seq {
            if id == BOS || id == PAD {
                continue;
            }
            if id == EOS {
                break;
            }
            let tok = self.tokens.get(id as usize).map_or("<unk>", String::as_str);
            if !(out.is_empty() || tok == "." || tok == ",") {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}
