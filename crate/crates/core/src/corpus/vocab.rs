use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 3;
const RESERVED_TOKENS: [&str; RESERVED] = ["[PAD]", "[UNK]", "[MASK]"];

/// Lowercased word-level tokens. Runs of alphanumerics form words; every other
/// non-space character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Bijective token-string to id map with reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Most frequent `cap` words of `text` (ties broken lexicographically),
    /// after the reserved ids.
    pub fn build(text: &str, cap: usize) -> Result<Self> {
        Self::build_from_tokens(tokenize(text), cap)
    }

    pub fn build_from_documents<S: AsRef<str>>(docs: &[S], cap: usize) -> Result<Self> {
        Self::build_from_tokens(docs.iter().flat_map(|d| tokenize(d.as_ref())), cap)
    }

    fn build_from_tokens(tokens: impl IntoIterator<Item = String>, cap: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        ensure!(
            !counts.is_empty(),
            InvalidArgument,
            "cannot build a vocabulary from an empty corpus"
        );
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    /// Vocabulary with the given words after the reserved ids, in order.
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn import(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if lines.get(i) != Some(r) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        Ok(Self::from_tokens(lines[RESERVED..].iter().map(|s| s.to_string())))
    }
}
