use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::pack::PackedExample;
use crate::text::vocab::{Vocab, MASK, NUM_RESERVED};

/// Label value at positions the MLM loss ignores.
pub const NO_LABEL: i64 = -1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    /// Probability that a maskable position is selected.
    pub rate: f64,
    /// Of selected positions: fraction replaced by `[MASK]`.
    pub mask_fraction: f64,
    /// Of selected positions: fraction replaced by a random character; the
    /// remainder keeps its original token.
    pub random_fraction: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_fraction: 0.8,
            random_fraction: 0.1,
        }
    }
}

impl MaskingConfig {
    /// Every selected position becomes `[MASK]`.
    pub fn mask_only(rate: f64) -> Self {
        Self {
            rate,
            mask_fraction: 1.0,
            random_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::config(format!("mask rate {} outside [0, 1)", self.rate)));
        }
        if self.mask_fraction < 0.0 || self.random_fraction < 0.0 || self.mask_fraction + self.random_fraction > 1.0 {
            return Err(Error::config("mask/random fractions must be non-negative and sum to at most 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Vec<Vec<usize>>,
    /// Original id at selected positions, [`NO_LABEL`] elsewhere.
    pub mlm_labels: Vec<Vec<i64>>,
    /// `(example, position)` of every selected position.
    pub mask_positions: Vec<(usize, usize)>,
}

/// Selects each real, non-special position with probability `config.rate`
/// and corrupts it with the 80/10/10 rule. Call once per epoch for dynamic
/// masking.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    batch: &[PackedExample],
    vocab: &Vocab,
    rng: &mut R,
    config: &MaskingConfig,
) -> Result<MaskedBatch> {
    config.validate()?;
    let mut out = MaskedBatch::default();
    let random_range = NUM_RESERVED..vocab.len();
    for (e, ex) in batch.iter().enumerate() {
        let mut ids = ex.token_ids.clone();
        let mut labels = vec![NO_LABEL; ids.len()];
        for p in 0..ids.len() {
            if ex.attention_mask[p] == 0 || Vocab::is_reserved(ids[p]) {
                continue;
            }
            if rng.gen::<f64>() >= config.rate {
                continue;
            }
            labels[p] = ids[p] as i64;
            out.mask_positions.push((e, p));
            let r = rng.gen::<f64>();
            if r < config.mask_fraction {
                ids[p] = MASK;
            } else if r < config.mask_fraction + config.random_fraction && !random_range.is_empty() {
                ids[p] = rng.gen_range(random_range.clone());
            }
        }
        out.input_ids.push(ids);
        out.mlm_labels.push(labels);
    }
    Ok(out)
}
