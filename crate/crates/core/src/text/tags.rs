use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// BIO tag inventory: id 0 is `O`, then `B-t`, `I-t` for each entity type `t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    types: Vec<String>,
}

impl TagSet {
    pub fn new<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Self {
        Self {
            types: types.into_iter().map(Into::into).collect(),
        }
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn len(&self) -> usize {
        1 + 2 * self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn begin(&self, type_index: usize) -> usize {
        1 + 2 * type_index
    }

    pub fn inside(&self, type_index: usize) -> usize {
        2 + 2 * type_index
    }

    pub fn name(&self, id: usize) -> String {
        match id {
            0 => "O".to_string(),
            i if i < self.len() => {
                let prefix = if i % 2 == 1 { "B" } else { "I" };
                format!("{prefix}-{}", self.types[(i - 1) / 2])
            }
            _ => format!("<{id}>"),
        }
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        if name == "O" {
            return Ok(0);
        }
        let (prefix, ty) = name
            .split_once('-')
            .ok_or_else(|| Error::data(format!("malformed BIO tag {name:?}")))?;
        let t = self
            .types
            .iter()
            .position(|x| x == ty)
            .ok_or_else(|| Error::data(format!("unknown entity type in tag {name:?}")))?;
        match prefix {
            "B" => Ok(self.begin(t)),
            "I" => Ok(self.inside(t)),
            _ => Err(Error::data(format!("malformed BIO tag {name:?}"))),
        }
    }

    pub fn names(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.name(i)).collect()
    }

    pub fn ids<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.id(n.as_ref())).collect()
    }

    /// True when every `I-t` continues a `B-t` or `I-t`.
    pub fn is_valid_bio(&self, ids: &[usize]) -> bool {
        let mut prev = 0usize;
        for &id in ids {
            if id != 0 && id % 2 == 0 && !(prev != 0 && (prev - 1) / 2 == (id - 1) / 2) {
                return false;
            }
            prev = id;
        }
        true
    }
}
