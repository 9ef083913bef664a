//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use selftrain::autodiff::{Tape, Var};
use selftrain::encoder::{init_model, Batch, EncoderConfig, EncoderModel};
use selftrain::framework::config::PipelineConfig;
use selftrain::objectives::{classification_ce_loss, crf_nll, kl_logits_loss, mlm_loss, token_kl_loss};
use selftrain::rng;

// ---------------------------------------------------------------- CRF

/// `log Σ exp(score(y))` and the best path (first in lexicographic order
/// among ties) by enumerating all `k^n` paths.
pub fn crf_brute(em: &[f64], k: usize, trans: &[f64], start: &[f64], end: &[f64]) -> (f64, Vec<usize>) {
    let n = em.len() / k;
    let mut scores = Vec::new();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let total = k.pow(n as u32);
    for code in 0..total {
        // most significant digit first, so codes run in lexicographic order
        let mut path = vec![0; n];
        let mut c = code;
        for t in (0..n).rev() {
            path[t] = c % k;
            c /= k;
        }
        let mut s = start[path[0]] + end[path[n - 1]];
        for t in 0..n {
            s += em[t * k + path[t]];
            if t > 0 {
                s += trans[path[t - 1] * k + path[t]];
            }
        }
        scores.push(s);
        if best.as_ref().map_or(true, |(b, _)| s > *b) {
            best = Some((s, path));
        }
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    (lz, best.unwrap().1)
}

// ---------------------------------------------------------------- gradients

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mlm,
    ClassificationCe,
    KlLogits,
    TokenKl,
    CrfNll,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Mlm,
        LossKind::ClassificationCe,
        LossKind::KlLogits,
        LossKind::TokenKl,
        LossKind::CrfNll,
    ];
}

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 16,
        heads: 2,
        ffn_mult: 2,
        max_seq_len: 8,
        vocab_size: 12,
        num_classes: 3,
        num_tags: 5,
        dropout: 0.1,
        ..EncoderConfig::default()
    }
}

/// Two rows of six positions; the second row has two padding positions.
fn grad_batch() -> Batch {
    let ids = [2, 6, 7, 8, 9, 3, 2, 10, 11, 3, 0, 0];
    let mask = [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0];
    Batch::from_rows(&[&ids[..6], &ids[6..]], &[&mask[..6], &mask[6..]]).unwrap()
}

fn loss_on(model: &EncoderModel<f64>, tape: &mut Tape<f64>, kind: LossKind) -> Var {
    let batch = grad_batch();
    let mut r = rng::stream(0, "unused");
    let hidden = model.forward(tape, &batch, false, &mut r).unwrap();
    let (s, k) = (batch.seq, model.config.num_tags);
    match kind {
        LossKind::Mlm => {
            let logits = model.mlm_logits(tape, &hidden).unwrap();
            let labels = [-1, 6, -1, 8, -1, -1, -1, 4, 11, -1, -1, -1];
            mlm_loss(tape, logits, &labels).unwrap()
        }
        LossKind::ClassificationCe => {
            let logits = model.cls_logits(tape, &hidden).unwrap();
            classification_ce_loss(tape, logits, &[2, 0]).unwrap()
        }
        LossKind::KlLogits => {
            let logits = model.cls_logits(tape, &hidden).unwrap();
            kl_logits_loss(tape, &[1.5, -0.5, 0.25, -1.0, 0.0, 2.0], logits, 1.0).unwrap()
        }
        LossKind::TokenKl => {
            let em = model.token_logits(tape, &hidden).unwrap();
            let teacher: Vec<f64> = (0..2 * s * k).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.3).collect();
            let mask = [0, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0];
            token_kl_loss(tape, &teacher, em, &mask, 1.0).unwrap()
        }
        LossKind::CrfNll => {
            let em = model.token_logits(tape, &hidden).unwrap();
            let vars = model.crf_vars(tape);
            let tags = [-1, 0, 1, 2, 0, -1, -1, 3, 4, -1, -1, -1];
            let mask: Vec<u8> = tags.iter().map(|&t| u8::from(t >= 0)).collect();
            crf_nll(tape, em, vars, &tags, &mask).unwrap()
        }
    }
}

/// Largest elementwise relative error between the analytic gradient of the
/// whole model and central finite differences. Errors are relative to
/// `max(|analytic|, |numeric|, 1e-3)` so parameters the loss does not touch
/// (gradient exactly 0 on both sides) count as exact.
pub fn encoder_gradient_error(kind: LossKind, seed: u64) -> (f64, usize) {
    let mut model: EncoderModel<f64> = init_model(&tiny_encoder_config(), seed).unwrap();
    // break the symmetry of the zero-initialized biases and LayerNorm shifts
    let mut r = rng::stream(seed, "perturb");
    for i in 0..model.params.len() {
        for v in model.params.get_mut(i).data_mut() {
            *v += rand::Rng::gen_range(&mut r, -0.05..0.05);
        }
    }
    let mut tape = Tape::new();
    let loss = loss_on(&model, &mut tape, kind);
    tape.backward(loss).unwrap();
    let mut analytic: Vec<Vec<f64>> = (0..model.params.len()).map(|i| vec![0.0; model.params.get(i).numel()]).collect();
    for (i, g) in tape.param_grads() {
        for (a, &x) in analytic[i].iter_mut().zip(g) {
            *a += x;
        }
    }
    let eval = |m: &EncoderModel<f64>| {
        let mut t = Tape::new();
        let l = loss_on(m, &mut t, kind);
        t.scalar(l)
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..model.params.len() {
        for j in 0..model.params.get(i).numel() {
            let orig = model.params.get(i).data()[j];
            model.params.get_mut(i).data_mut()[j] = orig + h;
            let up = eval(&model);
            model.params.get_mut(i).data_mut()[j] = orig - h;
            let down = eval(&model);
            model.params.get_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

// ---------------------------------------------------------------- spans

/// A typed span `(type, start, end)` with `end` exclusive.
pub type SpanT = (&'static str, usize, usize);

/// Corpus-level F1 from hand-listed span sets.
pub fn f1_from_sets(pred: &[Vec<SpanT>], gold: &[Vec<SpanT>]) -> f64 {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        tp += p.iter().filter(|s| g.contains(s)).count();
        np += p.len();
        ng += g.len();
    }
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let (pr, rc) = (tp as f64 / np as f64, tp as f64 / ng as f64);
    2.0 * pr * rc / (pr + rc)
}

pub fn seq(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Crafted span-F1 cases: predicted tags, gold tags, and the span sets read
/// off by hand (malformed BIO repaired by opening a span at a stray `I-`).
pub fn span_cases() -> Vec<(&'static str, &'static str, Vec<SpanT>, Vec<SpanT>)> {
    vec![
        ("B-A I-A O", "B-A I-A O", vec![("A", 0, 2)], vec![("A", 0, 2)]),
        ("O O O", "O O O", vec![], vec![]),
        ("B-A O O", "O O O", vec![("A", 0, 1)], vec![]),
        ("O O O", "B-A O O", vec![], vec![("A", 0, 1)]),
        ("B-A I-A O", "B-A O O", vec![("A", 0, 2)], vec![("A", 0, 1)]),
        ("B-A O B-B", "B-A O B-B", vec![("A", 0, 1), ("B", 2, 3)], vec![("A", 0, 1), ("B", 2, 3)]),
        ("B-A O B-A", "B-A O B-B", vec![("A", 0, 1), ("A", 2, 3)], vec![("A", 0, 1), ("B", 2, 3)]),
        ("I-A I-A O", "B-A I-A O", vec![("A", 0, 2)], vec![("A", 0, 2)]),
        ("O I-A I-A", "O B-A I-A", vec![("A", 1, 3)], vec![("A", 1, 3)]),
        ("B-A I-B O", "B-A I-A O", vec![("A", 0, 1), ("B", 1, 2)], vec![("A", 0, 2)]),
        ("B-A B-A", "B-A I-A", vec![("A", 0, 1), ("A", 1, 2)], vec![("A", 0, 2)]),
        ("I-B O I-B", "B-B O B-B", vec![("B", 0, 1), ("B", 2, 3)], vec![("B", 0, 1), ("B", 2, 3)]),
        ("B-A I-A I-A I-A", "B-A I-A B-A I-A", vec![("A", 0, 4)], vec![("A", 0, 2), ("A", 2, 4)]),
        ("O B-C I-C I-C O", "O B-C I-C I-C O", vec![("C", 1, 4)], vec![("C", 1, 4)]),
        ("B-A I-A", "O O", vec![("A", 0, 2)], vec![]),
        ("O B-A I-B I-B", "O B-A B-B I-B", vec![("A", 1, 2), ("B", 2, 4)], vec![("A", 1, 2), ("B", 2, 4)]),
        ("B-A O I-A", "B-A I-A I-A", vec![("A", 0, 1), ("A", 2, 3)], vec![("A", 0, 3)]),
        ("B-B I-B O B-A", "B-B I-B O O", vec![("B", 0, 2), ("A", 3, 4)], vec![("B", 0, 2)]),
        ("I-A", "I-A", vec![("A", 0, 1)], vec![("A", 0, 1)]),
        ("B-A I-A O B-B I-B B-C", "B-A I-A O B-B O B-C", vec![("A", 0, 2), ("B", 3, 5), ("C", 5, 6)], vec![
            ("A", 0, 2),
            ("B", 3, 4),
            ("C", 5, 6),
        ]),
    ]
}

/// Accuracy cases: predictions, gold, and the hit count read off by hand.
pub fn accuracy_cases() -> Vec<(Vec<usize>, Vec<usize>, usize)> {
    vec![
        (vec![0], vec![0], 1),
        (vec![1], vec![0], 0),
        (vec![0, 1, 2], vec![0, 1, 2], 3),
        (vec![0, 1, 2], vec![2, 1, 0], 1),
        (vec![0, 0, 0, 0], vec![0, 1, 0, 1], 2),
        (vec![3, 3, 3], vec![1, 2, 0], 0),
        (vec![5, 4, 3, 2, 1], vec![5, 4, 3, 2, 0], 4),
        (vec![7; 10], vec![7; 10], 10),
        (vec![1, 2], vec![2, 1], 0),
        (vec![0, 1, 0, 1, 0, 1], vec![0, 1, 1, 1, 0, 0], 4),
        (vec![2, 2, 2, 1], vec![2, 2, 2, 2], 3),
        (vec![9, 8, 7], vec![9, 0, 7], 2),
        (vec![0, 0], vec![0, 0], 2),
        (vec![1, 0, 1], vec![0, 0, 0], 1),
        (vec![4, 4, 4, 4, 4, 4, 4, 4], vec![4, 4, 4, 4, 0, 0, 0, 0], 4),
        (vec![6, 5], vec![5, 6], 0),
        (vec![3, 1, 4, 1, 5, 9, 2, 6], vec![3, 1, 4, 1, 5, 9, 2, 7], 7),
        (vec![0, 1, 2, 3, 4, 5, 6, 7], vec![7, 6, 5, 4, 3, 2, 1, 0], 0),
        (vec![1, 1, 1], vec![1, 0, 1], 2),
        (vec![2, 0, 2, 0, 2], vec![2, 0, 2, 0, 1], 4),
    ]
}

// ---------------------------------------------------------------- configs

/// A pipeline small enough to run in seconds.
pub fn tiny_pipeline_config() -> PipelineConfig {
    let text = r#"{
        "task": "classification",
        "model": {"num_layers": 1, "hidden": 16, "heads": 2, "max_seq_len": 24},
        "data": {"synthetic": {"num_classes": 3, "labeled_train": 80, "test": 40, "unlabeled_pool": 120},
                 "labeled_size": 40},
        "domain_pretrain": {"epochs": 1, "batch_size": 16},
        "finetune": {"epochs": 2, "min_steps": 0, "batch_size": 16},
        "task_pretrain": {"epochs": 1, "batch_size": 16},
        "final_finetune": {"epochs": 2, "min_steps": 0, "batch_size": 16},
        "grid": {"labeled_sizes": [40], "seeds": [0]}
    }"#;
    selftrain::framework::config::parse_config(text).unwrap()
}

pub fn tiny_ner_config() -> PipelineConfig {
    let mut cfg = tiny_pipeline_config();
    cfg.task = selftrain::text::TaskKind::Ner;
    cfg
}

// ---------------------------------------------------------------- masking

#[derive(Clone, Copy, Debug, Default)]
pub struct MaskStats {
    pub maskable: usize,
    pub selected: usize,
    pub to_mask: usize,
    pub to_random: usize,
    pub kept: usize,
    /// Selected positions holding a reserved token (must stay 0).
    pub reserved_selected: usize,
}

/// Masks a synthetic batch with the default rule and counts outcomes.
/// Texts contain characters outside the vocabulary, so `[UNK]` occurs.
pub fn masking_stats(seed: u64, examples: usize) -> MaskStats {
    use rand::Rng;
    use selftrain::text::vocab::{MASK, NUM_RESERVED};
    use selftrain::text::{apply_mlm_mask, pack_classification_input, MaskingConfig, Vocab, NO_LABEL};

    let vocab = Vocab::build(["abcdefghijklmnopqrstuvwxyz0123456789"], 1).unwrap();
    let mut r = rng::stream(seed, "texts");
    let mut text = |len: usize| -> String {
        (0..len)
            .map(|_| {
                let i = r.gen_range(0..40u8);
                if i < 36 {
                    b"abcdefghijklmnopqrstuvwxyz0123456789"[i as usize] as char
                } else {
                    '#'
                }
            })
            .collect()
    };
    let packed: Vec<_> = (0..examples)
        .map(|_| {
            let (a, b, c) = (text(12), text(4), text(6));
            pack_classification_input(&a, &b, &c, None, &vocab, 32).unwrap()
        })
        .collect();
    let out = apply_mlm_mask(&packed, &vocab, &mut rng::stream(seed, "mask"), &MaskingConfig::default()).unwrap();
    let mut st = MaskStats::default();
    for (e, p) in packed.iter().enumerate() {
        for (i, &id) in p.token_ids.iter().enumerate() {
            let selected = out.mlm_labels[e][i] != NO_LABEL;
            if id < NUM_RESERVED {
                st.reserved_selected += usize::from(selected);
                continue;
            }
            st.maskable += 1;
            if !selected {
                continue;
            }
            st.selected += 1;
            match out.input_ids[e][i] {
                MASK => st.to_mask += 1,
                x if x == id => st.kept += 1,
                _ => st.to_random += 1,
            }
        }
    }
    st
}
