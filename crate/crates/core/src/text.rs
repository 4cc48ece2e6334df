//! Whitespace tokenizer, frequency-ranked vocabulary and padded token rows.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for w in words {
            if index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Self { index, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; line `i` holds id `i + 2`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = body.lines().map(str::to_string).collect();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    index: i,
                    message: "vocabulary entries must be single non-empty tokens".into(),
                });
            }
        }
        let vocab = Self::from_tokens(words.iter().cloned());
        if vocab.len() != words.len() + RESERVED.len() {
            return Err(Error::invalid(format!("{}: duplicate vocabulary entries", path.display())));
        }
        Ok(vocab)
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Keeps the `max_size - 2` most frequent lowercased tokens; ties go to
/// the lexicographically smaller token.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if max_size < 2 {
        return Err(Error::config("max_size", format!("{} < 2", max_size)));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for w in words(text.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Ok(Vocab::from_tokens(ranked.into_iter().map(|(w, _)| w)))
}

/// A fixed-length row of token ids; `mask[i]` marks real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.real_len()]
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let mut ids: Vec<usize> = words(text).take(max_len).map(|w| vocab.id(&w)).collect();
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    TokenSeq { ids, mask }
}

pub fn batch_texts<S: AsRef<str>>(texts: &[S], vocab: &Vocab, max_len: usize) -> Result<Vec<TokenSeq>> {
    if texts.is_empty() {
        return Err(Error::invalid("cannot batch an empty list of texts"));
    }
    Ok(texts.iter().map(|t| tokenize(t.as_ref(), vocab, max_len)).collect())
}
