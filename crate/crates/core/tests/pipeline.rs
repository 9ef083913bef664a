mod common;

use common::{tiny_ner_config, tiny_pipeline_config};
use selftrain::framework::config::{Baseline, GridAxis, InputVariant};
use selftrain::framework::data::TaskData;
use selftrain::framework::pipeline::{lineage_table, Runner};
use selftrain::framework::stages::step5_final_finetune;
use selftrain::framework::store::{ArtifactStore, StageTag};
use selftrain::framework::train::{Provenance, Target, TrainItem};
use selftrain::objectives::LossVariant;
use selftrain::report::MetricName;

fn bits(m: &selftrain::encoder::EncoderModel<f32>) -> Vec<Vec<u32>> {
    m.params.tensors().iter().map(|t| t.data().iter().map(|x| x.to_bits()).collect()).collect()
}

#[test]
fn final_finetune_sees_no_pseudo_labels() {
    let cfg = tiny_pipeline_config();
    let mut runner = Runner::new(None);
    let d = runner.model_d(&cfg).unwrap();
    let report = d.report.as_ref().unwrap();
    assert!(report.steps > 0);
    assert_eq!(report.batches_with.get(&Provenance::Pseudo).copied().unwrap_or(0), 0);
    assert_eq!(report.provenance.get(&Provenance::Pseudo).copied().unwrap_or(0), 0);
    assert!(report.provenance[&Provenance::Labeled] > 0);
    // the step-4 run did train on pseudo-labels
    let c = runner.model_c(&cfg).unwrap();
    assert!(c.report.as_ref().unwrap().provenance[&Provenance::Pseudo] > 0);
}

#[test]
fn final_finetune_refuses_pseudo_items() {
    let cfg = tiny_pipeline_config();
    let data = TaskData::load(&cfg).unwrap();
    let model = selftrain::framework::stages::initial_model(&cfg, &data).unwrap();
    let packed = data.pack(&data.train[..2]).unwrap();
    let items: Vec<TrainItem> = packed
        .into_iter()
        .enumerate()
        .map(|(i, p)| TrainItem {
            packed: p,
            target: Target::Class(0),
            provenance: if i == 0 { Provenance::Labeled } else { Provenance::Pseudo },
        })
        .collect();
    assert!(step5_final_finetune(&cfg, &data, &model, &items).is_err());
}

#[test]
fn step1_and_step4_start_from_the_same_initialization() {
    let cfg = tiny_pipeline_config();
    let mut runner = Runner::new(None);
    let a = runner.model_a(&cfg).unwrap();
    let c = runner.model_c(&cfg).unwrap();
    assert!(a.meta.init_digest.is_some());
    assert_eq!(a.meta.init_digest, c.meta.init_digest);
    let mut other = cfg.clone();
    other.seed = 1;
    let a1 = Runner::new(None).model_a(&other).unwrap();
    assert_ne!(a.meta.init_digest, a1.meta.init_digest);
}

#[test]
fn self_training_with_nothing_selected_equals_fine_tuning() {
    let mut cfg = tiny_pipeline_config();
    cfg.self_training.threshold = 1.0;
    let mut runner = Runner::new(None);
    let base = runner.baseline(&cfg).unwrap();
    let st = runner.classic_st(&cfg, Baseline::ClassicStBase).unwrap();
    assert_eq!(base.metrics[0].value, st.metrics[0].value);
    assert_eq!(bits(base.model().unwrap()), bits(st.model().unwrap()));
}

#[test]
fn reruns_produce_identical_metrics_json() {
    let cfg = tiny_pipeline_config();
    let json = |cfg| {
        let out = Runner::new(None).pipeline(cfg).unwrap();
        out.records.iter().map(|r| r.to_json_line().unwrap()).collect::<Vec<_>>().join("\n")
    };
    let first = json(&cfg);
    assert!(!first.contains("timestamp"));
    assert_eq!(first, json(&cfg));
}

#[test]
fn stored_artifacts_resume_without_retraining() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path().join("artifacts")).unwrap();
    let cfg = tiny_pipeline_config();
    let first = Runner::new(Some(&store)).pipeline(&cfg).unwrap();
    let mut again = Runner::new(Some(&store));
    let second = again.pipeline(&cfg).unwrap();
    for tag in [StageTag::A, StageTag::B, StageTag::Pseudo, StageTag::C, StageTag::D] {
        assert_eq!(again.executed(tag), 0, "{tag} retrained");
    }
    assert_eq!(first.records, second.records);
    let d = first.get(StageTag::D).unwrap();
    let (loaded, _) = store.load_model(d.id()).unwrap();
    assert_eq!(bits(&loaded), bits(d.model().unwrap()));
    let pseudo = store.load(first.get(StageTag::Pseudo).unwrap().id()).unwrap();
    assert_eq!(pseudo.records().unwrap().len(), 120);
}

#[test]
fn grid_runs_legal_cells_and_shares_upstream_stages() {
    let cfg = tiny_pipeline_config();
    let mut runner = Runner::new(None);
    let out = runner.grid(&cfg, &[GridAxis::Loss, GridAxis::Input]).unwrap();
    assert_eq!(out.cells.len(), 3);
    assert_eq!(out.skipped.len(), 1);
    let skip = &out.skipped[0].cell;
    assert_eq!((skip.loss, skip.input), (LossVariant::LogitsKlPlusMlm, InputVariant::NoMask));
    assert!(out.skipped[0].reason.contains("NoMask"));
    assert_eq!(runner.executed(StageTag::A), 1);
    assert_eq!(runner.executed(StageTag::B), 1);
    assert_eq!(runner.executed(StageTag::Pseudo), 1);
    assert_eq!(runner.executed(StageTag::C), 3);
    assert_eq!(runner.executed(StageTag::D), 3);
    let d_rows = out.records.iter().filter(|r| r.stage == "D").count();
    assert_eq!(d_rows, 3);
}

#[test]
fn ner_pipeline_reports_span_f1() {
    let mut cfg = tiny_ner_config();
    cfg.baselines = vec![Baseline::FineTune, Baseline::ClassicStModelC];
    let out = Runner::new(None).pipeline(&cfg).unwrap();
    assert!(out.records.iter().all(|r| r.metric == MetricName::SpanF1));
    assert!(out.records.iter().any(|r| r.stage == "D"));
    assert!(out.records.iter().any(|r| r.stage == "classic-ST"));
    let table = lineage_table(&out.records, false);
    assert!(table.contains("Our Method (Model-D)"));
}
