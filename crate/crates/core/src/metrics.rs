//! Exact-match accuracy and CoNLL-style span F1.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::data(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::data("accuracy of an empty set is undefined"));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// A typed span over token positions `start..end` (end exclusive).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub ty: String,
    pub start: usize,
    pub end: usize,
}

fn parse_tag(tag: &str) -> Result<Option<(char, &str)>> {
    if tag == "O" {
        return Ok(None);
    }
    match tag.split_once('-') {
        Some(("B", ty)) if !ty.is_empty() => Ok(Some(('B', ty))),
        Some(("I", ty)) if !ty.is_empty() => Ok(Some(('I', ty))),
        _ => Err(Error::data(format!("malformed BIO tag {tag:?}"))),
    }
}

/// Maximal spans of a BIO sequence. An `I-t` that does not continue a `t`
/// span opens a new span when `strict` is false and is ignored when true.
pub fn extract_spans<S: AsRef<str>>(tags: &[S], strict: bool) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        let parsed = parse_tag(tag.as_ref())?;
        let continues = matches!((&open, parsed), (Some(s), Some(('I', ty))) if s.ty == ty);
        if continues {
            continue;
        }
        if let Some(mut s) = open.take() {
            s.end = i;
            spans.push(s);
        }
        open = match parsed {
            Some(('B', ty)) => Some(Span { ty: ty.into(), start: i, end: i }),
            Some((_, ty)) if !strict => Some(Span { ty: ty.into(), start: i, end: i }),
            _ => None,
        };
    }
    if let Some(mut s) = open {
        s.end = tags.len();
        spans.push(s);
    }
    Ok(spans)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Corpus-level span F1; a predicted span counts only when its type and both
/// boundaries match a gold span. No spans on either side scores 1.
pub fn conll_score<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>], strict: bool) -> Result<SpanScore> {
    if pred.len() != gold.len() {
        return Err(Error::data(format!("{} predicted sequences for {} gold", pred.len(), gold.len())));
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (k, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::data(format!(
                "sequence {k}: {} predicted tags for {} gold",
                p.len(),
                g.len()
            )));
        }
        let ps: BTreeSet<Span> = extract_spans(p, strict)?.into_iter().collect();
        let gs: BTreeSet<Span> = extract_spans(g, false)?.into_iter().collect();
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    if np == 0 && ng == 0 {
        return Ok(SpanScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            true_positives: 0,
            predicted: 0,
            gold: 0,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (precision, recall) = (ratio(tp, np), ratio(tp, ng));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SpanScore {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted: np,
        gold: ng,
    })
}

pub fn conll_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>], strict: bool) -> Result<f64> {
    Ok(conll_score(pred, gold, strict)?.f1)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
