//! Pseudo-label records: teacher predictions over the unlabeled pool, and
//! their JSONL file form `{id, <input fields>, label, logits, confidence}`.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::framework::config::NerConfidence;
use crate::framework::data::TaskData;
use crate::framework::train::{
    align_tags, align_token_logits, decode_tags, predict_class_logits, predict_emissions, Provenance, Target, TrainItem,
};
use crate::tensor::argmax;
use crate::text::{Example, Input, Label, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Logits {
    Class(Vec<f32>),
    /// One row of tag scores per character.
    Tokens(Vec<Vec<f32>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: u64,
    #[serde(flatten)]
    pub input: Input,
    pub label: Label,
    pub logits: Logits,
    pub confidence: f64,
}

/// Largest softmax probability of a logit row.
pub fn max_prob(row: &[f32]) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    1.0 / row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>()
}

impl PseudoLabelRecord {
    /// Class id of a classification record.
    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Tags(_) => None,
        }
    }

    /// Checks the record's internal consistency: confidence range, label
    /// matching the logits' argmax, one tag per logit row.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::data(format!("pseudo-label record {}: {m}", self.id)));
        if !(0.0..=1.0).contains(&self.confidence) {
            return bad(format!("confidence {} outside [0, 1]", self.confidence));
        }
        match (&self.label, &self.logits) {
            (Label::Class(c), Logits::Class(l)) => {
                if l.is_empty() || argmax(l) != *c {
                    return bad(format!("label {c} is not the argmax of its logits"));
                }
            }
            (Label::Tags(t), Logits::Tokens(rows)) => {
                if t.len() != rows.len() {
                    return bad(format!("{} tags for {} logit rows", t.len(), rows.len()));
                }
            }
            _ => return bad("label and logits kinds differ".into()),
        }
        Ok(())
    }

    fn example(&self) -> Example {
        Example {
            id: self.id,
            input: self.input.clone(),
            label: None,
        }
    }
}

/// Runs the teacher in eval mode over `pool`, one record per example.
/// Classification labels are the logits' argmax; NER labels are the Viterbi
/// path of the emissions under the teacher's transition scores.
pub fn pseudo_label(
    teacher: &EncoderModel<f32>,
    data: &TaskData,
    pool: &[Example],
    confidence: NerConfidence,
    batch_size: usize,
) -> Result<Vec<PseudoLabelRecord>> {
    let packed = data.pack_unlabeled(pool)?;
    match data.task {
        TaskKind::Classification => {
            let logits = predict_class_logits(teacher, &packed, batch_size)?;
            Ok(pool
                .iter()
                .zip(logits)
                .map(|(ex, l)| PseudoLabelRecord {
                    id: ex.id,
                    input: ex.input.clone(),
                    label: Label::Class(argmax(&l)),
                    confidence: max_prob(&l),
                    logits: Logits::Class(l),
                })
                .collect())
        }
        TaskKind::Ner => {
            let emissions = predict_emissions(teacher, &packed, batch_size)?;
            pool.iter()
                .zip(emissions)
                .map(|(ex, rows)| {
                    let tags = decode_tags(teacher, &rows)?;
                    let probs: Vec<f64> = rows.iter().map(|r| max_prob(r)).collect();
                    let conf = if probs.is_empty() {
                        0.0
                    } else {
                        match confidence {
                            NerConfidence::MeanTokenMax => probs.iter().sum::<f64>() / probs.len() as f64,
                            NerConfidence::MinTokenMax => probs.iter().copied().fold(1.0, f64::min),
                        }
                    };
                    Ok(PseudoLabelRecord {
                        id: ex.id,
                        input: ex.input.clone(),
                        label: Label::Tags(tags),
                        confidence: conf.clamp(0.0, 1.0),
                        logits: Logits::Tokens(rows),
                    })
                })
                .collect()
        }
    }
}

/// Training items from records: soft targets (the stored logits) when
/// `soft`, the stored hard labels otherwise.
pub fn pseudo_items(data: &TaskData, records: &[PseudoLabelRecord], soft: bool) -> Result<Vec<TrainItem>> {
    let k = data.num_tags();
    records
        .iter()
        .map(|r| {
            let packed = r.example().pack(&data.vocab, data.max_len)?;
            let target = match (&r.label, &r.logits, soft) {
                (_, Logits::Class(l), true) => Target::ClassLogits(l.clone()),
                (_, Logits::Tokens(rows), true) => Target::TokenLogits(align_token_logits(&packed, rows, k)?),
                (Label::Class(c), _, false) => Target::Class(*c),
                (Label::Tags(t), _, false) => Target::Tags(align_tags(&packed, t)),
            };
            Ok(TrainItem {
                packed,
                target,
                provenance: Provenance::Pseudo,
            })
        })
        .collect()
}

pub fn to_jsonl(records: &[PseudoLabelRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<PseudoLabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let r: PseudoLabelRecord =
                serde_json::from_str(l).map_err(|e| Error::data(format!("pseudo-label line {}: {e}", n + 1)))?;
            r.validate()?;
            Ok(r)
        })
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records)?.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    parse_jsonl(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
