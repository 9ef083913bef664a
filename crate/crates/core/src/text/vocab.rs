use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Character vocabulary. Ids `0..5` are the reserved specials; characters
/// follow in descending frequency, ties by ascending codepoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<char, usize> = HashMap::new();
        let mut lines = 0usize;
        for line in corpus {
            lines += 1;
            for c in line.as_ref().chars() {
                *counts.entry(c).or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut chars: Vec<(char, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_count).collect();
        chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        if chars.is_empty() {
            warn!("min_count {min_count} excludes every character; vocabulary holds only reserved tokens");
        }
        Ok(Self::from_chars(chars.into_iter().map(|(c, _)| c)))
    }

    fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for c in chars {
            index.insert(c, tokens.len());
            tokens.push(c.to_string());
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Inverse of [`Vocab::encode`] for ids of ordinary characters; special
    /// ids render as their bracketed names.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("[UNK]")).collect()
    }

    pub fn is_reserved(id: usize) -> bool {
        id < NUM_RESERVED
    }

    /// One token per line; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.strip_suffix('\n').unwrap_or(text).split('\n').collect();
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != RESERVED {
            return Err(Error::data("vocab file must start with the five reserved tokens"));
        }
        let mut chars = Vec::new();
        for (n, line) in lines[NUM_RESERVED..].iter().enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::data(format!(
                        "vocab line {} is not a single character",
                        n + NUM_RESERVED + 1
                    )))
                }
            }
        }
        Ok(Self::from_chars(chars))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}
