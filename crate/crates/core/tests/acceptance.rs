//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (unbuffered, so the line shows without `--nocapture`) and then asserts.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use selftrain::autodiff::Tape;
use selftrain::checkpoint;
use selftrain::framework::config::{parse_config, GridAxis, InputVariant, PipelineConfig};
use selftrain::framework::pipeline::{lineage_table, variant_table, Runner};
use selftrain::framework::store::StageTag;
use selftrain::framework::train::Provenance;
use selftrain::metrics::{accuracy, conll_f1, mean_std};
use selftrain::objectives::crf::{log_partition, viterbi, CrfParams};
use selftrain::objectives::{kl_logits_loss, LossVariant};
use selftrain::report::{render_ablation_table, Axis, MetricName, MetricsRecord, Selector};
use selftrain::rng;

fn say(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "\n{text}");
}

fn verdict(n: u32, what: &str, pass: bool, detail: &str) -> bool {
    say(&format!(
        "acceptance {n} {what}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    ));
    pass
}

#[test]
fn gradients_of_every_loss_match_finite_differences() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for kind in LossKind::ALL {
        let (err, n) = encoder_gradient_error(kind, 7);
        worst = worst.max(err);
        details.push(format!("{kind:?} {err:.1e} over {n}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-5 && secs < 120.0;
    assert!(verdict(1, "gradient correctness", pass, &format!("{}; {secs:.1}s", details.join(", "))));
}

#[test]
fn crf_matches_path_enumeration() {
    let t0 = Instant::now();
    let mut r = rng::stream(0, "crf-acceptance");
    let (mut cases, mut z_err, mut path_misses) = (0, 0.0f64, 0);
    for i in 0..400 {
        let (n, k) = (r.gen_range(1..=4), r.gen_range(1..=4));
        // every other instance uses small integers so exact ties occur
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| if i % 2 == 0 { r.gen_range(-3.0..3.0) } else { f64::from(r.gen_range(-2i32..=2)) })
                .collect()
        };
        let (em, tr, st, en) = (draw(n * k), draw(k * k), draw(k), draw(k));
        let crf = CrfParams::new(&tr, &st, &en).unwrap();
        let (lz, best) = crf_brute(&em, k, &tr, &st, &en);
        z_err = z_err.max((log_partition(&em, &crf).unwrap() - lz).abs());
        path_misses += usize::from(viterbi(&em, &crf).unwrap() != best);
        cases += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = cases >= 200 && z_err < 1e-6 && path_misses == 0 && secs < 60.0;
    assert!(verdict(
        2,
        "CRF oracle equivalence",
        pass,
        &format!("{cases} cases, max |logZ err| {z_err:.1e}, {path_misses} Viterbi mismatches; {secs:.2}s")
    ));
}

fn kl(teacher: &[f64], student: &[f64]) -> f64 {
    let mut t = Tape::new();
    let s = t.constant(&[1, student.len()], student.to_vec());
    let l = kl_logits_loss(&mut t, teacher, s, 1.0).unwrap();
    t.scalar(l)
}

#[test]
fn kl_divergence_properties() {
    let mut r = rng::stream(0, "kl-acceptance");
    let (mut self_max, mut min_kl, mut shift_err) = (0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..1000 {
        let k = r.gen_range(2..10);
        let a: Vec<f64> = (0..k).map(|_| r.gen_range(-8.0..8.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| r.gen_range(-8.0..8.0)).collect();
        self_max = self_max.max(kl(&a, &a).abs());
        let d = kl(&a, &b);
        min_kl = min_kl.min(d);
        let c = r.gen_range(-50.0..50.0);
        let a2: Vec<f64> = a.iter().map(|x| x + c).collect();
        let b2: Vec<f64> = b.iter().map(|x| x - c).collect();
        shift_err = shift_err.max((kl(&a2, &b2) - d).abs());
    }
    let pass = self_max == 0.0 && min_kl >= -1e-9 && shift_err < 1e-6;
    assert!(verdict(
        3,
        "KL properties",
        pass,
        &format!("max KL(t,t) {self_max:e}, min KL {min_kl:.2e} over 1000 pairs, max shift error {shift_err:.1e}")
    ));
}

#[test]
fn masking_statistics() {
    let st = masking_stats(0, 6000);
    let s = st.selected as f64;
    let rate = s / st.maskable as f64;
    let (m, rnd, keep) = (st.to_mask as f64 / s, st.to_random as f64 / s, st.kept as f64 / s);
    let pass = st.maskable >= 100_000
        && (rate - 0.15).abs() <= 0.01
        && (m - 0.8).abs() <= 0.02
        && (rnd - 0.1).abs() <= 0.02
        && (keep - 0.1).abs() <= 0.02
        && st.reserved_selected == 0;
    assert!(verdict(
        4,
        "masking statistics",
        pass,
        &format!(
            "{} maskable, rate {rate:.4}, split {m:.3}/{rnd:.3}/{keep:.3}, {} reserved selected",
            st.maskable, st.reserved_selected
        )
    ));
}

#[test]
fn pipeline_structural_invariants() {
    let mut cfg = tiny_pipeline_config();
    cfg.self_training.threshold = 1.0;
    let mut runner = Runner::new(None);
    let d = runner.model_d(&cfg).unwrap();
    let report = d.report.as_ref().unwrap();
    let pseudo_in_d = report.provenance.get(&Provenance::Pseudo).copied().unwrap_or(0);
    let a = runner.model_a(&cfg).unwrap();
    let c = runner.model_c(&cfg).unwrap();
    let same_init = a.meta.init_digest.is_some() && a.meta.init_digest == c.meta.init_digest;
    let base = runner.baseline(&cfg).unwrap();
    let st = runner.classic_st(&cfg, selftrain::framework::config::Baseline::ClassicStBase).unwrap();
    let same_metric = base.metrics[0].value == st.metrics[0].value && base.model().unwrap() == st.model().unwrap();
    let pass = pseudo_in_d == 0 && report.steps > 0 && same_init && same_metric;
    assert!(verdict(
        5,
        "pipeline structural invariants",
        pass,
        &format!(
            "{pseudo_in_d} pseudo examples in {} Model-D steps; A/C init digests equal: {same_init}; empty-S self-training == fine-tune: {same_metric} ({:.4} vs {:.4})",
            report.steps, st.metrics[0].value, base.metrics[0].value
        )
    ));
}

/// Desk-scale classification setting shared by the two trend checks.
fn desk_config() -> PipelineConfig {
    parse_config(
        r#"{
        "task": "classification",
        "model": {"num_layers": 2, "hidden": 32, "heads": 4, "max_seq_len": 32},
        "data": {"synthetic": {"num_classes": 8, "labeled_train": 10000, "unlabeled_pool": 50000, "test": 5000}},
        "baselines": ["fine_tune"],
        "grid": {"labeled_sizes": [500, 10000], "seeds": [0, 1, 2, 3, 4]}
    }"#,
    )
    .unwrap()
}

fn values(records: &[MetricsRecord], sel: &Selector) -> Vec<f64> {
    let mut v: Vec<(u64, f64)> = records.iter().filter(|r| sel.matches(r)).map(|r| (r.seed, r.value)).collect();
    v.sort_by_key(|x| x.0);
    v.into_iter().map(|x| x.1).collect()
}

fn at(stage: &str, n: usize) -> Selector {
    Selector {
        labeled_size: Some(n),
        ..Selector::stage(stage)
    }
}

fn pct((m, s): (f64, f64)) -> String {
    format!("{:.2} ± {:.2}", m * 100.0, s * 100.0)
}

#[test]
fn directional_trends_on_synthetic_classification() {
    let cfg = desk_config();
    let mut runner = Runner::new(None);

    let t0 = Instant::now();
    let trend = runner.grid(&cfg, &[GridAxis::LabeledSize, GridAxis::Lineage]).unwrap();
    let elapsed = t0.elapsed();
    say(&lineage_table(&trend.records, true));
    let stats = |stage: &str, n: usize| mean_std(&values(&trend.records, &at(stage, n)));
    let (d5, b5, base5) = (stats("D", 500), stats("B", 500), stats("baseline", 500));
    let (d10, b10, base10) = (stats("D", 10000), stats("B", 10000), stats("baseline", 10000));
    let runs = values(&trend.records, &at("D", 500)).len() + values(&trend.records, &at("D", 10000)).len();
    let spread = d5.1.max(base5.1);
    let (gap5, gap10) = (d5.0 - base5.0, d10.0 - base10.0);
    let trend_pass = runs == 10
        && gap5 > spread
        && d5.0 >= b5.0
        && d10.0 >= b10.0
        && gap5 > gap10
        && elapsed <= Duration::from_secs(45 * 60);
    let trend_ok = verdict(
        6,
        "labeled-size trend",
        trend_pass,
        &format!(
            "500: D {} / B {} / fine-tune {}, gap {:+.2} vs spread {:.2}; 10000: D {} / B {} / fine-tune {}, gap {:+.2}; {:.0}s",
            pct(d5),
            pct(b5),
            pct(base5),
            gap5 * 100.0,
            spread * 100.0,
            pct(d10),
            pct(b10),
            pct(base10),
            gap10 * 100.0,
            elapsed.as_secs_f64()
        ),
    );

    let mut vcfg = cfg.clone();
    vcfg.data.labeled_size = Some(500);
    vcfg.grid.loss_variants = vec![LossVariant::LabelCeOnly, LossVariant::LogitsKlOnly, LossVariant::LogitsKlPlusMlm];
    vcfg.grid.input_variants = InputVariant::ALL.to_vec();
    let t1 = Instant::now();
    let grid = runner.grid(&vcfg, &[GridAxis::Loss, GridAxis::Input]).unwrap();
    let table = variant_table(&grid.records, true);
    say(&table);
    let variant = |loss: LossVariant, input: InputVariant| {
        mean_std(&values(
            &grid.records,
            &Selector::stage("D").with("loss", loss.name()).with("input", input.name()),
        ))
    };
    let logits = variant(LossVariant::LogitsKlOnly, InputVariant::NoMask);
    let label = variant(LossVariant::LabelCeOnly, InputVariant::NoMask);
    let masked_mlm = variant(LossVariant::LogitsKlPlusMlm, InputVariant::Masked);
    let finding = |better: bool| if better { "holds" } else { "reversed (finding)" };
    let legal = grid.cells.len() == 25 && grid.skipped.len() == 5 && table.lines().count() == 2 + 5;
    let variants_ok = verdict(
        7,
        "loss/input ablation grid",
        legal,
        &format!(
            "{} cells run, {} skipped; logits {} vs label {}: {}; NoMask {} vs Masked+MLM {}: {}; C stages trained {}; {:.0}s",
            grid.cells.len(),
            grid.skipped.len(),
            pct(logits),
            pct(label),
            finding(logits.0 >= label.0),
            pct(logits),
            pct(masked_mlm),
            finding(logits.0 >= masked_mlm.0),
            runner.executed(StageTag::C),
            t1.elapsed().as_secs_f64()
        ),
    );
    assert!(variants_ok, "ablation grid incomplete");
    assert!(trend_ok, "labeled-size trend not reproduced");
}

#[test]
fn metrics_match_oracles() {
    let spans = span_cases();
    let span_ok = spans.iter().all(|(p, g, ps, gs)| {
        (conll_f1(&[seq(p)], &[seq(g)], false).unwrap() - f1_from_sets(&[ps.clone()], &[gs.clone()])).abs() < 1e-12
    });
    let accs = accuracy_cases();
    let acc_ok = accs.iter().all(|(p, g, hits)| accuracy(p, g).unwrap() == *hits as f64 / g.len() as f64);
    let pass = span_ok && acc_ok && spans.len() == 20 && accs.len() == 20;
    assert!(verdict(
        8,
        "metrics oracles",
        pass,
        &format!("{} span-F1 cases: {span_ok}; {} accuracy cases: {acc_ok}", spans.len(), accs.len())
    ));
}

const PUBLISHED: [(&str, [f64; 4]); 7] = [
    ("BERT-Base-3layer baseline", [87.0, 89.2, 90.8, 88.6]),
    ("BERT-Base-12layer baseline", [87.5, 89.4, 91.0, 88.7]),
    ("Classic Self-training upon BERT-Base-3layer", [88.0, 89.8, 91.0, 89.0]),
    ("Model-B", [88.2, 90.1, 91.7, 88.8]),
    ("Classic Self-training upon Model-A", [89.3, 90.4, 91.6, 89.2]),
    ("Classic Self-training upon Model-C", [90.2, 90.9, 91.7, 89.4]),
    ("Our Method (Model-D)", [90.6, 91.1, 91.9, 89.6]),
];

fn published_table() -> String {
    let sizes = [100_000, 400_000, 2_000_000];
    let mut records = Vec::new();
    for (i, (_, vals)) in PUBLISHED.iter().enumerate() {
        for (j, &v) in vals.iter().enumerate() {
            let (metric, labeled_size) = if j < 3 { (MetricName::Accuracy, Some(sizes[j])) } else { (MetricName::SpanF1, None) };
            records.push(MetricsRecord {
                run_id: format!("row{i}-col{j}"),
                stage: format!("row{i}"),
                variant: Default::default(),
                labeled_size,
                metric,
                value: v / 100.0,
                seed: 0,
                timestamp: None,
            });
        }
    }
    let rows: Vec<Axis> = PUBLISHED.iter().enumerate().map(|(i, (t, _))| Axis::new(*t, Selector::stage(&format!("row{i}")))).collect();
    let mut cols: Vec<Axis> = ["100K data", "400K data", "2000K data"]
        .iter()
        .zip(sizes)
        .map(|(t, n)| {
            Axis::new(*t, Selector {
                labeled_size: Some(n),
                metric: Some(MetricName::Accuracy),
                ..Selector::default()
            })
        })
        .collect();
    cols.push(Axis::new("Test F1", Selector {
        metric: Some(MetricName::SpanF1),
        ..Selector::default()
    }));
    render_ablation_table(&records, &rows, &cols, false)
}

#[test]
fn determinism_and_persistence() {
    let cfg = tiny_pipeline_config();
    let json = || {
        let out = Runner::new(None).pipeline(&cfg).unwrap();
        out.records.iter().map(|r| r.to_json_line().unwrap()).collect::<Vec<_>>().join("\n")
    };
    let rerun_ok = json() == json();

    let data = selftrain::framework::data::TaskData::load(&cfg).unwrap();
    let model = Runner::new(None).model_b(&cfg).unwrap();
    let model = model.model().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    checkpoint::save(&model.params, &path).unwrap();
    let mut loaded = selftrain::framework::stages::initial_model(&cfg, &data).unwrap();
    loaded.params.load_from(checkpoint::load(&path).unwrap()).unwrap();
    let bitwise = model
        .params
        .tensors()
        .iter()
        .zip(loaded.params.tensors())
        .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let table = published_table();
    let row_ok = table.contains("| Our Method (Model-D) | 90.6 | 91.1 | 91.9 | 89.6 |");
    let pass = rerun_ok && bitwise && row_ok;
    assert!(verdict(
        9,
        "determinism and persistence",
        pass,
        &format!("rerun metrics identical: {rerun_ok}; checkpoint round-trip bitwise: {bitwise}; summary row verbatim: {row_ok}")
    ));
}
