//! The five lineage steps, classic self-training, and evaluation. These are
//! plain functions of their inputs; caching lives in the pipeline runner.

use std::collections::BTreeMap;

use log::warn;

use crate::encoder::{init_model, EncoderModel};
use crate::error::{Error, Result};
use crate::framework::config::{check_variant_pairing, InputVariant, PipelineConfig};
use crate::framework::data::TaskData;
use crate::framework::pseudo::{pseudo_items, pseudo_label, PseudoLabelRecord};
use crate::framework::train::{
    decode_tags, predict_class_logits, predict_emissions, train, unlabeled_items, Objective, Provenance, StageSchedule,
    TrainContext, TrainItem, TrainReport,
};
use crate::metrics::{accuracy, conll_f1};
use crate::objectives::LossVariant;
use crate::report::MetricName;
use crate::rng;
use crate::tensor::argmax;
use crate::text::{Example, TaskKind};

/// RNG label shared by every supervised fine-tuning run, so runs that see
/// the same items in the same order are identical.
const FINETUNE: &str = "finetune";

fn context<'a>(cfg: &'a PipelineConfig, data: &'a TaskData, label: &'a str) -> TrainContext<'a> {
    TrainContext {
        vocab: &data.vocab,
        masking: &cfg.masking,
        temperature: cfg.temperature,
        seed: cfg.seed,
        label,
    }
}

/// The initialization shared by steps 1 and 4 and the from-scratch baseline.
pub fn initial_model(cfg: &PipelineConfig, data: &TaskData) -> Result<EncoderModel<f32>> {
    init_model(&data.encoder_config(cfg), cfg.seed)
}

/// Step 1: masked-LM training on the unlabeled pool from the seed's
/// initialization (Model-A).
pub fn step1_domain_pretrain(
    cfg: &PipelineConfig,
    data: &TaskData,
    pool: &[Example],
) -> Result<(EncoderModel<f32>, TrainReport)> {
    if pool.is_empty() {
        return Err(Error::data("domain pre-training needs a non-empty unlabeled pool"));
    }
    let mut model = initial_model(cfg, data)?;
    let items = unlabeled_items(data.pack_unlabeled(pool)?);
    let objective = Objective {
        mlm: true,
        mask_input: true,
        task: false,
    };
    let report = train(&mut model, &items, objective, &cfg.domain_pretrain, &context(cfg, data, "domain-pretrain"))?;
    Ok((model, report))
}

/// Task-loss-only training of a copy of `base`.
pub fn finetune_items(
    cfg: &PipelineConfig,
    data: &TaskData,
    base: &EncoderModel<f32>,
    items: &[TrainItem],
    schedule: &StageSchedule,
) -> Result<(EncoderModel<f32>, TrainReport)> {
    let mut model = base.clone();
    let objective = Objective {
        mlm: false,
        mask_input: false,
        task: true,
    };
    let report = train(&mut model, items, objective, schedule, &context(cfg, data, FINETUNE))?;
    Ok((model, report))
}

/// Step 2: fine-tune on the gold-labeled set (Model-B from Model-A).
pub fn step2_finetune(
    cfg: &PipelineConfig,
    data: &TaskData,
    base: &EncoderModel<f32>,
    labeled: &[Example],
) -> Result<(EncoderModel<f32>, TrainReport)> {
    let items = data.labeled_items(labeled)?;
    finetune_items(cfg, data, base, &items, &cfg.finetune)
}

/// Step 3: the teacher's predictions over the pool.
pub fn step3_pseudo_label(
    cfg: &PipelineConfig,
    data: &TaskData,
    teacher: &EncoderModel<f32>,
    pool: &[Example],
) -> Result<Vec<PseudoLabelRecord>> {
    pseudo_label(teacher, data, pool, cfg.ner_confidence, cfg.eval_batch_size)
}

/// Step 4: train the seed's fresh initialization on every pseudo-label
/// record with the variant's loss (Model-C).
pub fn step4_task_specific_pretrain(
    cfg: &PipelineConfig,
    data: &TaskData,
    records: &[PseudoLabelRecord],
    loss: LossVariant,
    input: InputVariant,
) -> Result<(EncoderModel<f32>, TrainReport)> {
    check_variant_pairing(loss, input)?;
    if records.is_empty() {
        return Err(Error::data("task-specific pre-training needs pseudo-label records"));
    }
    let mut model = initial_model(cfg, data)?;
    let items = pseudo_items(data, records, loss.uses_logits())?;
    let objective = Objective {
        mlm: loss.uses_mlm(),
        mask_input: input == InputVariant::Masked,
        task: true,
    };
    let report = train(&mut model, &items, objective, &cfg.task_pretrain, &context(cfg, data, "task-pretrain"))?;
    Ok((model, report))
}

/// Step 5: fine-tune Model-C on gold labels only (Model-D). Items of any
/// other provenance are refused.
pub fn step5_final_finetune(
    cfg: &PipelineConfig,
    data: &TaskData,
    base: &EncoderModel<f32>,
    items: &[TrainItem],
) -> Result<(EncoderModel<f32>, TrainReport)> {
    if let Some(it) = items.iter().find(|it| it.provenance != Provenance::Labeled) {
        return Err(Error::contract(format!(
            "final fine-tuning accepts gold-labeled data only, got {:?} items",
            it.provenance
        )));
    }
    finetune_items(cfg, data, base, items, &cfg.final_finetune)
}

/// Indices of records with confidence ≥ `threshold`, at most `cap` per
/// bucket (the class for classification, one bucket for NER), drawn
/// uniformly within each bucket. Returned in record order.
pub fn select_confident(records: &[PseudoLabelRecord], threshold: f64, cap: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.confidence >= threshold {
            buckets.entry(r.class().unwrap_or(0)).or_default().push(i);
        }
    }
    let mut r = rng::stream(seed, &format!("classic-st/select/{round}"));
    let mut out = Vec::new();
    for members in buckets.values() {
        if members.len() <= cap {
            out.extend_from_slice(members);
        } else {
            out.extend(rand::seq::index::sample(&mut r, members.len(), cap).iter().map(|j| members[j]));
        }
    }
    out.sort_unstable();
    out
}

/// Per-bucket cap `ceil(target / buckets)`.
pub fn per_class_cap(cfg: &PipelineConfig, data: &TaskData, pool_size: usize) -> usize {
    let target = cfg.self_training.target_size.unwrap_or(pool_size);
    let buckets = match data.task {
        TaskKind::Classification => data.num_classes,
        TaskKind::Ner => 1,
    };
    target.div_ceil(buckets)
}

#[derive(Clone, Debug)]
pub struct ClassicStOutcome {
    pub model: EncoderModel<f32>,
    pub report: TrainReport,
    /// Ids of the pseudo-labeled examples the last student trained on.
    pub selected: Vec<u64>,
}

/// Algorithm-1 self-training: teacher = fine-tune(base, L); S = confident,
/// class-balanced teacher predictions; student = fine-tune(base, S ∪ L);
/// repeated with the student as teacher. `records`, when given, replace the
/// first round's teacher predictions.
pub fn classic_self_training(
    cfg: &PipelineConfig,
    data: &TaskData,
    base: &EncoderModel<f32>,
    labeled: &[Example],
    pool: &[Example],
    records: Option<&[PseudoLabelRecord]>,
) -> Result<ClassicStOutcome> {
    let st = &cfg.self_training;
    if !(st.threshold > 0.0 && st.threshold <= 1.0) {
        return Err(Error::config(format!("threshold {} outside (0, 1]", st.threshold)));
    }
    let gold = data.labeled_items(labeled)?;
    let mut given = records.map(<[PseudoLabelRecord]>::to_vec);
    let mut teacher: Option<EncoderModel<f32>> = None;
    let mut last = None;
    for round in 0..st.iterations.max(1) {
        let recs = match given.take() {
            Some(r) => r,
            None => {
                let t = match teacher.take() {
                    Some(t) => t,
                    None => step2_finetune(cfg, data, base, labeled)?.0,
                };
                step3_pseudo_label(cfg, data, &t, pool)?
            }
        };
        let cap = per_class_cap(cfg, data, recs.len());
        let chosen = select_confident(&recs, st.threshold, cap, cfg.seed, round);
        if chosen.is_empty() {
            warn!(
                "no pseudo-label reaches confidence {}; the student trains on the labeled set alone",
                st.threshold
            );
        }
        let selected: Vec<PseudoLabelRecord> = chosen.iter().map(|&i| recs[i].clone()).collect();
        let mut items = gold.clone();
        items.extend(pseudo_items(data, &selected, false)?);
        let (model, report) = finetune_items(cfg, data, base, &items, &cfg.finetune)?;
        teacher = Some(model.clone());
        last = Some(ClassicStOutcome {
            model,
            report,
            selected: selected.iter().map(|r| r.id).collect(),
        });
    }
    Ok(last.expect("at least one round"))
}

/// Test metric of a model: accuracy for classification, span F1 for NER.
pub fn evaluate(model: &EncoderModel<f32>, data: &TaskData, examples: &[Example], batch_size: usize) -> Result<(MetricName, f64)> {
    let packed = data.pack_unlabeled(examples)?;
    match data.task {
        TaskKind::Classification => {
            let gold: Vec<usize> = examples
                .iter()
                .map(|e| e.class().ok_or_else(|| Error::data(format!("test example {} has no class", e.id))))
                .collect::<Result<_>>()?;
            let pred: Vec<usize> = predict_class_logits(model, &packed, batch_size)?.iter().map(|l| argmax(l)).collect();
            Ok((MetricName::Accuracy, accuracy(&pred, &gold)?))
        }
        TaskKind::Ner => {
            let tags = data.tags.as_ref().expect("NER data carries a tag set");
            let emissions = predict_emissions(model, &packed, batch_size)?;
            let mut pred = Vec::with_capacity(examples.len());
            let mut gold = Vec::with_capacity(examples.len());
            for (e, em) in examples.iter().zip(&emissions) {
                let g = e.tags().ok_or_else(|| Error::data(format!("test example {} has no tags", e.id)))?;
                let mut p = decode_tags(model, em)?;
                // characters cut by truncation are predicted as O
                p.resize(g.len(), 0);
                pred.push(tags.names(&p));
                gold.push(tags.names(g));
            }
            Ok((MetricName::SpanF1, conll_f1(&pred, &gold, false)?))
        }
    }
}
