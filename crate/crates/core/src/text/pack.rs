use crate::error::{Error, Result};
use crate::text::vocab::{Vocab, CLS, PAD, SEP};

/// Tag value at positions that carry no tag ([CLS], [SEP], padding).
pub const IGNORE_TAG: i64 = -1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    None,
    Class(usize),
    /// One entry per position; [`IGNORE_TAG`] outside the text.
    Tags(Vec<i64>),
}

/// Model-ready input: fixed length, real tokens first, then padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedExample {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
    pub payload: Payload,
}

impl PackedExample {
    fn from_ids(mut ids: Vec<usize>, max_len: usize, payload: Payload) -> Self {
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; real];
        attention_mask.resize(max_len, 0);
        Self {
            token_ids: ids,
            attention_mask,
            segment_ids: vec![0; max_len],
            payload,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m != 0).count()
    }

    /// For `[CLS] text [SEP]` layouts: 0/1 per position marking text characters.
    pub fn text_mask(&self) -> Vec<u8> {
        let n = self.real_len().saturating_sub(2);
        (0..self.len()).map(|p| u8::from(p >= 1 && p <= n)).collect()
    }
}

/// Character lengths after fitting three fields into `budget` characters by
/// repeatedly dropping the last character of the longest field; among equally
/// long fields the later one is cut first.
pub fn truncated_lengths(lengths: [usize; 3], budget: usize) -> [usize; 3] {
    let mut l = lengths;
    while l.iter().sum::<usize>() > budget {
        let max = *l.iter().max().unwrap();
        let victim = (0..3).rev().find(|&i| l[i] == max).unwrap();
        l[victim] -= 1;
    }
    l
}

/// `[CLS] name [SEP] tag [SEP] poi [SEP]`, padded to `max_len`.
pub fn pack_classification_input(
    name: &str,
    tag: &str,
    poi: &str,
    label: Option<usize>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<PackedExample> {
    if max_len < 8 {
        return Err(Error::contract(format!("max_len {max_len} below the minimum of 8")));
    }
    let fields = [vocab.encode(name), vocab.encode(tag), vocab.encode(poi)];
    let keep = truncated_lengths([fields[0].len(), fields[1].len(), fields[2].len()], max_len - 4);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    for (field, &n) in fields.iter().zip(&keep) {
        ids.extend_from_slice(&field[..n]);
        ids.push(SEP);
    }
    let payload = label.map_or(Payload::None, Payload::Class);
    Ok(PackedExample::from_ids(ids, max_len, payload))
}

/// `[CLS] text [SEP]`, padded; tags align with characters and the tail is
/// cut together with its tags when the text is too long.
pub fn pack_ner_input(text: &str, tags: Option<&[usize]>, vocab: &Vocab, max_len: usize) -> Result<PackedExample> {
    if max_len < 3 {
        return Err(Error::contract(format!("max_len {max_len} cannot hold [CLS] and [SEP]")));
    }
    let chars = vocab.encode(text);
    if let Some(t) = tags {
        if t.len() != chars.len() {
            return Err(Error::data(format!(
                "{} tags for {} characters in {text:?}",
                t.len(),
                chars.len()
            )));
        }
    }
    let n = chars.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(&chars[..n]);
    ids.push(SEP);
    let payload = match tags {
        Some(t) => {
            let mut aligned = vec![IGNORE_TAG; max_len];
            for (slot, &tag) in aligned[1..=n].iter_mut().zip(t) {
                *slot = tag as i64;
            }
            Payload::Tags(aligned)
        }
        None => Payload::None,
    };
    Ok(PackedExample::from_ids(ids, max_len, payload))
}
