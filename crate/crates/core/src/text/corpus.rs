//! In-memory examples and the line-oriented corpus file formats.
//!
//! Classification: `name TAB tag TAB poi [TAB label]`.
//! NER: `text [TAB space-separated BIO tags]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::pack::{pack_classification_input, pack_ner_input, PackedExample};
use crate::text::tags::TagSet;
use crate::text::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Ner,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Input {
    Fields { name: String, tag: String, poi: String },
    Text { text: String },
}

impl Input {
    pub fn task(&self) -> TaskKind {
        match self {
            Input::Fields { .. } => TaskKind::Classification,
            Input::Text { .. } => TaskKind::Ner,
        }
    }

    /// All characters the model sees, for vocabulary construction.
    pub fn surface(&self) -> String {
        match self {
            Input::Fields { name, tag, poi } => format!("{name}{tag}{poi}"),
            Input::Text { text } => text.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Tags(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub input: Input,
    pub label: Option<Label>,
}

impl Example {
    pub fn unlabeled(&self) -> Self {
        Self {
            label: None,
            ..self.clone()
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Some(Label::Class(c)) => Some(c),
            _ => None,
        }
    }

    pub fn tags(&self) -> Option<&[usize]> {
        match &self.label {
            Some(Label::Tags(t)) => Some(t),
            _ => None,
        }
    }

    pub fn pack(&self, vocab: &Vocab, max_len: usize) -> Result<PackedExample> {
        match (&self.input, &self.label) {
            (Input::Fields { name, tag, poi }, None) => pack_classification_input(name, tag, poi, None, vocab, max_len),
            (Input::Fields { name, tag, poi }, Some(Label::Class(c))) => {
                pack_classification_input(name, tag, poi, Some(*c), vocab, max_len)
            }
            (Input::Text { text }, None) => pack_ner_input(text, None, vocab, max_len),
            (Input::Text { text }, Some(Label::Tags(t))) => pack_ner_input(text, Some(t), vocab, max_len),
            _ => Err(Error::data(format!("example {} pairs its input with the wrong label kind", self.id))),
        }
    }
}

pub fn write_corpus(examples: &[Example], tags: Option<&TagSet>) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        match (&ex.input, &ex.label) {
            (Input::Fields { name, tag, poi }, label) => {
                for f in [name, tag, poi] {
                    if f.contains(['\t', '\n']) {
                        return Err(Error::data(format!("example {} has a field with TAB or newline", ex.id)));
                    }
                }
                out.push_str(&format!("{name}\t{tag}\t{poi}"));
                if let Some(Label::Class(c)) = label {
                    out.push_str(&format!("\t{c}"));
                }
            }
            (Input::Text { text }, label) => {
                if text.contains(['\t', '\n']) {
                    return Err(Error::data(format!("example {} has text with TAB or newline", ex.id)));
                }
                out.push_str(text);
                if let Some(Label::Tags(t)) = label {
                    let set = tags.ok_or_else(|| Error::data("writing NER tags needs a tag set"))?;
                    out.push('\t');
                    out.push_str(&set.names(t).join(" "));
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses a corpus file; example ids are 0-based line numbers plus `first_id`.
pub fn read_corpus(text: &str, task: TaskKind, tags: Option<&TagSet>, first_id: u64) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let id = first_id + n as u64;
        let bad = |msg: &str| Error::data(format!("line {}: {msg}", n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        let ex = match task {
            TaskKind::Classification => {
                if !(3..=4).contains(&cols.len()) {
                    return Err(bad("expected name, tag, poi and an optional label"));
                }
                let label = match cols.get(3) {
                    Some(s) if !s.is_empty() => {
                        Some(Label::Class(s.trim().parse().map_err(|_| bad("label is not an integer"))?))
                    }
                    _ => None,
                };
                Example {
                    id,
                    input: Input::Fields {
                        name: cols[0].into(),
                        tag: cols[1].into(),
                        poi: cols[2].into(),
                    },
                    label,
                }
            }
            TaskKind::Ner => {
                if !(1..=2).contains(&cols.len()) {
                    return Err(bad("expected text and optional tags"));
                }
                let text = cols[0].to_string();
                let label = match cols.get(1) {
                    Some(s) if !s.is_empty() => {
                        let set = tags.ok_or_else(|| bad("tagged NER corpus needs a tag set"))?;
                        let names: Vec<&str> = s.split(' ').collect();
                        let ids = set.ids(&names).map_err(|e| bad(&e.to_string()))?;
                        if ids.len() != text.chars().count() {
                            return Err(bad("tag count differs from character count"));
                        }
                        Some(Label::Tags(ids))
                    }
                    _ => None,
                };
                Example {
                    id,
                    input: Input::Text { text },
                    label,
                }
            }
        };
        out.push(ex);
    }
    Ok(out)
}
