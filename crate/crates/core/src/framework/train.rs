//! The shared training loop and batched inference.

use std::collections::BTreeMap;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{Batch, EncoderModel};
use crate::error::{Error, Result};
use crate::objectives::{classification_ce_loss, crf, crf_nll, kl_logits_loss, mlm_loss, token_kl_loss};
use crate::optim::{AdamConfig, AdamState};
use crate::rng;
use crate::text::{apply_mlm_mask, MaskingConfig, PackedExample, Vocab, IGNORE_TAG, NO_LABEL};

/// Where a training example came from; every batch records the tags it saw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Labeled,
    Pseudo,
    Unlabeled,
}

/// Supervision attached to one packed example.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    None,
    Class(usize),
    /// Gold tag per packed position, [`IGNORE_TAG`] outside the text.
    Tags(Vec<i64>),
    ClassLogits(Vec<f32>),
    /// `[max_len, num_tags]` teacher emissions; only text positions are read.
    TokenLogits(Vec<f32>),
}

impl Target {
    fn kind(&self) -> u8 {
        match self {
            Target::None => 0,
            Target::Class(_) => 1,
            Target::Tags(_) => 2,
            Target::ClassLogits(_) => 3,
            Target::TokenLogits(_) => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub packed: PackedExample,
    pub target: Target,
    pub provenance: Provenance,
}

/// Steps, batch size and optimizer settings of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    /// Passes over the stage's data; fractional values stop mid-epoch.
    pub epochs: f64,
    /// Lower bound on optimizer steps, for small data sets.
    pub min_steps: Option<u64>,
    /// Upper bound on optimizer steps.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of the steps spent warming up.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `null` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            epochs: 3.0,
            min_steps: None,
            max_steps: None,
            batch_size: 32,
            lr: 2e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

impl StageSchedule {
    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.epochs >= 0.0 && self.epochs.is_finite()) {
            return Err(Error::config(format!("{what}: epochs must be a non-negative number")));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{what}: batch_size must be at least 1")));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) || self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "{what}: need lr > 0, warmup_fraction in [0, 1] and weight_decay >= 0"
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        let per_epoch = n.div_ceil(self.batch_size) as f64;
        let steps = (self.epochs * per_epoch).ceil() as u64;
        let steps = self.min_steps.map_or(steps, |m| steps.max(m));
        self.max_steps.map_or(steps, |m| steps.min(m))
    }
}

/// Which loss terms a stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objective {
    /// Add the masked-LM term.
    pub mlm: bool,
    /// Feed MLM-corrupted input instead of the original ids.
    pub mask_input: bool,
    /// Add the task term implied by the items' targets.
    pub task: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    /// Loss after each step's forward pass.
    pub losses: Vec<f32>,
    /// Examples seen per provenance tag, summed over batches.
    pub provenance: BTreeMap<Provenance, u64>,
    /// Steps whose batch contained at least one example of the tag.
    pub batches_with: BTreeMap<Provenance, u64>,
}

impl TrainReport {
    /// Mean loss over the first and last `fraction` of steps.
    pub fn loss_trend(&self, fraction: f64) -> Option<(f32, f32)> {
        let n = self.losses.len();
        let k = ((n as f64 * fraction).ceil() as usize).max(1);
        if n < 2 * k {
            return None;
        }
        let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
        Some((mean(&self.losses[..k]), mean(&self.losses[n - k..])))
    }
}

/// Everything the loop needs besides the model and data.
pub struct TrainContext<'a> {
    pub vocab: &'a Vocab,
    pub masking: &'a MaskingConfig,
    pub temperature: f64,
    pub seed: u64,
    /// Distinguishes the RNG streams of different stages.
    pub label: &'a str,
}

fn adam_config(s: &StageSchedule, total: u64) -> AdamConfig {
    AdamConfig {
        lr: s.lr,
        weight_decay: s.weight_decay,
        warmup_steps: (total as f64 * s.warmup_fraction).round() as u64,
        clip_norm: s.clip_norm,
        ..AdamConfig::default()
    }
}

/// Trains `model` in place. All randomness (order, masking, dropout) comes
/// from streams derived from `ctx.seed` and `ctx.label`.
pub fn train(
    model: &mut EncoderModel<f32>,
    items: &[TrainItem],
    objective: Objective,
    schedule: &StageSchedule,
    ctx: &TrainContext,
) -> Result<TrainReport> {
    schedule.validate(ctx.label)?;
    if objective.mlm && !objective.mask_input {
        return Err(Error::config("the MLM term needs masked input"));
    }
    if !objective.mlm && !objective.task {
        return Err(Error::config("a stage needs at least one loss term"));
    }
    let total = schedule.total_steps(items.len());
    let mut report = TrainReport::default();
    if total == 0 {
        return Ok(report);
    }
    if let Some(first) = items.first() {
        if items.iter().any(|it| it.target.kind() != first.target.kind()) {
            return Err(Error::contract("items of one stage must share a target kind"));
        }
    }
    let mut adam = AdamState::new(adam_config(schedule, total), total, &model.params);
    let mut order_rng = rng::stream(ctx.seed, &format!("{}/order", ctx.label));
    let mut mask_rng = rng::stream(ctx.seed, &format!("{}/mask", ctx.label));
    let mut drop_rng = rng::stream(ctx.seed, &format!("{}/dropout", ctx.label));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut tape = Tape::new();
    'epochs: loop {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(schedule.batch_size) {
            if report.steps == total {
                break 'epochs;
            }
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let mut tags = std::collections::BTreeSet::new();
            for it in &batch {
                *report.provenance.entry(it.provenance).or_default() += 1;
                tags.insert(it.provenance);
            }
            for t in tags {
                *report.batches_with.entry(t).or_default() += 1;
            }
            tape.clear();
            let loss = batch_loss(model, &mut tape, &batch, objective, ctx, &mut mask_rng, &mut drop_rng)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::contract(format!(
                    "{}: non-finite loss at step {}",
                    ctx.label,
                    report.steps + 1
                )));
            }
            tape.backward(loss)?;
            model.params.accumulate_grads(&tape);
            adam.step(&mut model.params);
            report.losses.push(value);
            report.steps += 1;
        }
    }
    debug!(
        "{}: {} steps, loss {:.4} -> {:.4}",
        ctx.label,
        report.steps,
        report.losses.first().copied().unwrap_or(f32::NAN),
        report.losses.last().copied().unwrap_or(f32::NAN)
    );
    Ok(report)
}

fn batch_loss(
    model: &EncoderModel<f32>,
    tape: &mut Tape<f32>,
    batch: &[&TrainItem],
    objective: Objective,
    ctx: &TrainContext,
    mask_rng: &mut rng::Rng,
    drop_rng: &mut rng::Rng,
) -> Result<Var> {
    let packed: Vec<PackedExample> = batch.iter().map(|it| it.packed.clone()).collect();
    let (ids, mlm_labels) = if objective.mask_input {
        let m = apply_mlm_mask(&packed, ctx.vocab, mask_rng, ctx.masking)?;
        (m.input_ids, Some(m.mlm_labels))
    } else {
        (packed.iter().map(|p| p.token_ids.clone()).collect(), None)
    };
    let rows: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    let masks: Vec<&[u8]> = packed.iter().map(|p| p.attention_mask.as_slice()).collect();
    let b = Batch::from_rows(&rows, &masks)?;
    let s = b.seq;
    let hidden = model.forward(tape, &b, true, drop_rng)?;
    let mut terms = Vec::new();
    if objective.task {
        terms.push(task_loss(model, tape, &hidden, batch, s, ctx.temperature)?);
    }
    if objective.mlm {
        let labels: Vec<i64> = mlm_labels
            .expect("masked input")
            .iter()
            .flat_map(|l| l[..s].iter().copied())
            .collect();
        let logits = model.mlm_logits(tape, &hidden)?;
        terms.push(mlm_loss(tape, logits, &labels)?);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

fn task_loss(
    model: &EncoderModel<f32>,
    tape: &mut Tape<f32>,
    hidden: &crate::encoder::Hidden,
    batch: &[&TrainItem],
    s: usize,
    temperature: f64,
) -> Result<Var> {
    let k = model.config.num_tags;
    match &batch[0].target {
        Target::None => Err(Error::contract("task loss requested for items without targets")),
        Target::Class(_) => {
            let labels: Vec<usize> = batch
                .iter()
                .map(|it| match it.target {
                    Target::Class(c) => c,
                    _ => unreachable!("uniform target kind"),
                })
                .collect();
            let logits = model.cls_logits(tape, hidden)?;
            classification_ce_loss(tape, logits, &labels)
        }
        Target::ClassLogits(_) => {
            let teacher: Vec<f32> = batch
                .iter()
                .flat_map(|it| match &it.target {
                    Target::ClassLogits(l) => l.iter().copied(),
                    _ => unreachable!("uniform target kind"),
                })
                .collect();
            let logits = model.cls_logits(tape, hidden)?;
            kl_logits_loss(tape, &teacher, logits, temperature)
        }
        Target::Tags(_) => {
            let tags: Vec<i64> = batch
                .iter()
                .flat_map(|it| match &it.target {
                    Target::Tags(t) => t[..s].iter().copied(),
                    _ => unreachable!("uniform target kind"),
                })
                .collect();
            let mask: Vec<u8> = tags.iter().map(|&t| u8::from(t != IGNORE_TAG)).collect();
            let em = model.token_logits(tape, hidden)?;
            let vars = model.crf_vars(tape);
            crf_nll(tape, em, vars, &tags, &mask)
        }
        Target::TokenLogits(_) => {
            let mut teacher = Vec::with_capacity(batch.len() * s * k);
            let mut mask = Vec::with_capacity(batch.len() * s);
            for it in batch {
                let Target::TokenLogits(l) = &it.target else {
                    unreachable!("uniform target kind")
                };
                teacher.extend_from_slice(&l[..s * k]);
                mask.extend_from_slice(&it.packed.text_mask()[..s]);
            }
            let em = model.token_logits(tape, hidden)?;
            token_kl_loss(tape, &teacher, em, &mask, temperature)
        }
    }
}

fn forward_eval(
    model: &EncoderModel<f32>,
    packed: &[&PackedExample],
    tape: &mut Tape<f32>,
) -> Result<(crate::encoder::Hidden, usize)> {
    let rows: Vec<&[usize]> = packed.iter().map(|p| p.token_ids.as_slice()).collect();
    let masks: Vec<&[u8]> = packed.iter().map(|p| p.attention_mask.as_slice()).collect();
    let b = Batch::from_rows(&rows, &masks)?;
    // eval mode draws nothing from the stream
    let mut unused = rng::stream(0, "eval");
    let h = model.forward(tape, &b, false, &mut unused)?;
    Ok((h, b.seq))
}

/// Eval-mode classification logits, one vector per example.
pub fn predict_class_logits(model: &EncoderModel<f32>, packed: &[PackedExample], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let c = model.config.num_classes;
    let mut out = Vec::with_capacity(packed.len());
    let mut tape = Tape::new();
    for chunk in packed.chunks(batch_size.max(1)) {
        tape.clear();
        let refs: Vec<&PackedExample> = chunk.iter().collect();
        let (h, _) = forward_eval(model, &refs, &mut tape)?;
        let logits = model.cls_logits(&mut tape, &h)?;
        out.extend(tape.value(logits).chunks(c).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Eval-mode emission scores of the text positions, `[n_chars][num_tags]`
/// per example.
pub fn predict_emissions(model: &EncoderModel<f32>, packed: &[PackedExample], batch_size: usize) -> Result<Vec<Vec<Vec<f32>>>> {
    let k = model.config.num_tags;
    let mut out = Vec::with_capacity(packed.len());
    let mut tape = Tape::new();
    for chunk in packed.chunks(batch_size.max(1)) {
        tape.clear();
        let refs: Vec<&PackedExample> = chunk.iter().collect();
        let (h, s) = forward_eval(model, &refs, &mut tape)?;
        let em = model.token_logits(&mut tape, &h)?;
        let values = tape.value(em);
        for (i, p) in chunk.iter().enumerate() {
            let text = p.text_mask();
            let rows = (0..s)
                .filter(|&pos| text[pos] != 0)
                .map(|pos| values[(i * s + pos) * k..(i * s + pos + 1) * k].to_vec())
                .collect();
            out.push(rows);
        }
    }
    Ok(out)
}

/// Viterbi tags for per-character emissions under the model's CRF scores.
pub fn decode_tags(model: &EncoderModel<f32>, emissions: &[Vec<f32>]) -> Result<Vec<usize>> {
    if emissions.is_empty() {
        return Ok(Vec::new());
    }
    let (t, s, e) = model.crf_scores();
    let params = crf::CrfParams::new(t, s, e)?;
    let flat: Vec<f32> = emissions.iter().flatten().copied().collect();
    crf::viterbi(&flat, &params)
}

/// Target-free items for masked-LM training.
pub fn unlabeled_items(packed: Vec<PackedExample>) -> Vec<TrainItem> {
    packed
        .into_iter()
        .map(|p| TrainItem {
            packed: p,
            target: Target::None,
            provenance: Provenance::Unlabeled,
        })
        .collect()
}

/// Aligns per-character teacher emissions to packed positions.
pub fn align_token_logits(packed: &PackedExample, rows: &[Vec<f32>], k: usize) -> Result<Vec<f32>> {
    let text = packed.text_mask();
    let n = text.iter().filter(|&&m| m != 0).count();
    if rows.len() < n || rows.iter().any(|r| r.len() != k) {
        return Err(Error::data(format!(
            "{} logit rows of width {k} for {n} text positions",
            rows.len()
        )));
    }
    let mut out = vec![0.0; packed.len() * k];
    for pos in 1..=n {
        out[pos * k..(pos + 1) * k].copy_from_slice(&rows[pos - 1]);
    }
    Ok(out)
}

/// Tag ids aligned to packed positions, [`NO_LABEL`] outside the text.
pub fn align_tags(packed: &PackedExample, tags: &[usize]) -> Vec<i64> {
    let text = packed.text_mask();
    let mut out = vec![NO_LABEL; packed.len()];
    let mut it = tags.iter();
    for (slot, &m) in out.iter_mut().zip(&text) {
        if m != 0 {
            if let Some(&t) = it.next() {
                *slot = t as i64;
            }
        }
    }
    out
}
