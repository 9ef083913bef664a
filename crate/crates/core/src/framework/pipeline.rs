//! The Model-A/B/C/D lineage, its baselines and the ablation grid, with
//! stage results cached by content hash in memory and in the store.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use log::info;
use serde_json::{json, Value};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::framework::config::{check_variant_pairing, hash_json, Baseline, GridAxis, InputVariant, PipelineConfig};
use crate::framework::data::TaskData;
use crate::framework::pseudo::PseudoLabelRecord;
use crate::framework::stages::{
    classic_self_training, evaluate, initial_model, step1_domain_pretrain, step2_finetune, step3_pseudo_label,
    step4_task_specific_pretrain, step5_final_finetune,
};
use crate::framework::store::{ArtifactMeta, ArtifactStore, StageArtifact, StageTag};
use crate::framework::train::TrainReport;
use crate::encoder::EncoderModel;
use crate::objectives::LossVariant;
use crate::report::{render_ablation_table, Axis, MetricsRecord, Selector};
use crate::text::Example;

/// Executes stages on demand, reusing any artifact whose hash was seen in
/// this session or is already in the store.
pub struct Runner<'s> {
    store: Option<&'s ArtifactStore>,
    artifacts: HashMap<String, StageArtifact>,
    data: HashMap<String, Arc<TaskData>>,
    /// Stages actually executed (not served from a cache), by tag.
    pub executed: BTreeMap<StageTag, usize>,
}

fn sha_digest(model: &EncoderModel<f32>) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(checkpoint::encode(&model.params)))
}

fn data_key(cfg: &PipelineConfig) -> Value {
    let mut data = serde_json::to_value(&cfg.data).expect("config serializes");
    if let Value::Object(m) = &mut data {
        m.remove("labeled_size");
    }
    json!({ "task": cfg.task, "data": data, "max_seq_len": cfg.model.max_seq_len })
}

/// What a model initialized from the config seed depends on.
fn init_key(cfg: &PipelineConfig) -> Value {
    json!({ "data": data_key(cfg), "model": cfg.model, "seed": cfg.seed })
}

fn meta(stage: StageTag, parents: &[&StageArtifact], config: Value) -> ArtifactMeta {
    let parent_hashes: Vec<&str> = parents.iter().map(|p| p.meta.hash.as_str()).collect();
    let hash = hash_json(&json!({ "stage": stage, "parents": parent_hashes, "config": config }));
    ArtifactMeta::new(stage, hash, parents.iter().map(|p| p.meta.id.clone()).collect(), config)
}

/// Everything a lineage run produced.
#[derive(Clone, Debug, Default)]
pub struct PipelineOutcome {
    pub artifacts: Vec<StageArtifact>,
    pub records: Vec<MetricsRecord>,
}

impl PipelineOutcome {
    pub fn get(&self, stage: StageTag) -> Option<&StageArtifact> {
        self.artifacts.iter().find(|a| a.meta.stage == stage)
    }
}

/// One combination of the grid's axes.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GridCell {
    pub seed: u64,
    pub labeled_size: Option<usize>,
    pub loss: LossVariant,
    pub input: InputVariant,
}

impl std::fmt::Display for GridCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let size = self.labeled_size.map_or("all".to_string(), |n| n.to_string());
        write!(f, "seed={} labeled={size} loss={} input={}", self.seed, self.loss.name(), self.input.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedCell {
    pub cell: GridCell,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct GridOutcome {
    /// Cells that produced a Model-D record.
    pub cells: Vec<GridCell>,
    pub skipped: Vec<SkippedCell>,
    /// Model-D records of the cells plus Model-B and baseline rows, unique
    /// by run id.
    pub records: Vec<MetricsRecord>,
}

impl<'s> Runner<'s> {
    pub fn new(store: Option<&'s ArtifactStore>) -> Self {
        Self {
            store,
            artifacts: HashMap::new(),
            data: HashMap::new(),
            executed: BTreeMap::new(),
        }
    }

    pub fn executed(&self, stage: StageTag) -> usize {
        self.executed.get(&stage).copied().unwrap_or(0)
    }

    pub fn data(&mut self, cfg: &PipelineConfig) -> Result<Arc<TaskData>> {
        let key = hash_json(&data_key(cfg));
        if let Some(d) = self.data.get(&key) {
            return Ok(d.clone());
        }
        let d = Arc::new(TaskData::load(cfg)?);
        self.data.insert(key, d.clone());
        Ok(d)
    }

    fn cached(&mut self, meta: &ArtifactMeta) -> Result<Option<StageArtifact>> {
        if let Some(a) = self.artifacts.get(&meta.id) {
            return Ok(Some(a.clone()));
        }
        if let Some(store) = self.store {
            if store.contains(&meta.id) {
                let a = store.load(&meta.id)?;
                info!("{}: reusing stored artifact", meta.id);
                self.artifacts.insert(meta.id.clone(), a.clone());
                return Ok(Some(a));
            }
        }
        Ok(None)
    }

    fn finish(
        &mut self,
        mut meta: ArtifactMeta,
        data: &TaskData,
        model: Option<EncoderModel<f32>>,
        records: Option<Vec<PseudoLabelRecord>>,
        metrics: Vec<MetricsRecord>,
        report: Option<TrainReport>,
    ) -> Result<StageArtifact> {
        meta.encoder = model.as_ref().map(|m| m.config.clone());
        let art = StageArtifact {
            meta,
            model: model.map(Arc::new),
            records: records.map(Arc::new),
            metrics,
            report,
        };
        if let Some(store) = self.store {
            store.save(&art, Some(&data.vocab))?;
        }
        *self.executed.entry(art.meta.stage).or_default() += 1;
        info!("{}: done", art.meta.id);
        self.artifacts.insert(art.meta.id.clone(), art.clone());
        Ok(art)
    }

    fn labeled(&mut self, cfg: &PipelineConfig) -> Result<(Arc<TaskData>, Vec<Example>)> {
        let data = self.data(cfg)?;
        let labeled = data.labeled(cfg.data.labeled_size, cfg.seed)?;
        Ok((data, labeled))
    }

    fn record(
        &self,
        cfg: &PipelineConfig,
        art_meta: &ArtifactMeta,
        model: &EncoderModel<f32>,
        data: &TaskData,
        labeled_size: usize,
        variant: &[(&str, String)],
    ) -> Result<MetricsRecord> {
        let (metric, value) = evaluate(model, data, &data.test, cfg.eval_batch_size)?;
        let mut r = MetricsRecord {
            run_id: art_meta.id.clone(),
            stage: art_meta.stage.as_str().to_string(),
            variant: BTreeMap::new(),
            labeled_size: Some(labeled_size),
            metric,
            value,
            seed: cfg.seed,
            timestamp: None,
        };
        for (k, v) in variant {
            r = r.with_variant(k, v.clone());
        }
        if !cfg.deterministic {
            r.timestamp = Some(
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs())
                    .to_string(),
            );
        }
        Ok(r)
    }

    pub fn model_a(&mut self, cfg: &PipelineConfig) -> Result<StageArtifact> {
        let config = json!({ "init": init_key(cfg), "masking": cfg.masking, "schedule": cfg.domain_pretrain });
        let mut m = meta(StageTag::A, &[], config);
        if let Some(a) = self.cached(&m)? {
            return Ok(a);
        }
        let stage = || -> Result<_> {
            let data = self.data(cfg)?;
            m.init_digest = Some(sha_digest(&initial_model(cfg, &data)?));
            let (model, report) = step1_domain_pretrain(cfg, &data, &data.pool)?;
            self.finish(m, &data, Some(model), None, Vec::new(), Some(report))
        };
        stage().map_err(|e| e.in_stage("A"))
    }

    pub fn model_b(&mut self, cfg: &PipelineConfig) -> Result<StageArtifact> {
        let a = self.model_a(cfg)?;
        let config = json!({ "labeled_size": cfg.data.labeled_size, "schedule": cfg.finetune });
        let m = meta(StageTag::B, &[&a], config);
        if let Some(b) = self.cached(&m)? {
            return Ok(b);
        }
        let stage = || -> Result<_> {
            let (data, labeled) = self.labeled(cfg)?;
            let (model, report) = step2_finetune(cfg, &data, a.model()?, &labeled)?;
            let rec = self.record(cfg, &m, &model, &data, labeled.len(), &[])?;
            self.finish(m, &data, Some(model), None, vec![rec], Some(report))
        };
        stage().map_err(|e| e.in_stage("B"))
    }

    pub fn pseudo(&mut self, cfg: &PipelineConfig) -> Result<StageArtifact> {
        let b = self.model_b(cfg)?;
        let config = json!({ "confidence": cfg.ner_confidence });
        let m = meta(StageTag::Pseudo, &[&b], config);
        if let Some(p) = self.cached(&m)? {
            return Ok(p);
        }
        let stage = || -> Result<_> {
            let data = self.data(cfg)?;
            let records = step3_pseudo_label(cfg, &data, b.model()?, &data.pool)?;
            self.finish(m, &data, None, Some(records), Vec::new(), None)
        };
        stage().map_err(|e| e.in_stage("pseudo"))
    }

    fn variant_tags(loss: LossVariant, input: InputVariant) -> [(&'static str, String); 2] {
        [("input", input.name().to_string()), ("loss", loss.name().to_string())]
    }

    pub fn model_c(&mut self, cfg: &PipelineConfig) -> Result<StageArtifact> {
        check_variant_pairing(cfg.loss_variant, cfg.input_variant).map_err(|e| e.in_stage("C"))?;
        let p = self.pseudo(cfg)?;
        let config = json!({
            "init": init_key(cfg),
            "loss": cfg.loss_variant,
            "input": cfg.input_variant,
            "masking": cfg.masking,
            "temperature": cfg.temperature,
            "schedule": cfg.task_pretrain,
        });
        let mut m = meta(StageTag::C, &[&p], config);
        if let Some(c) = self.cached(&m)? {
            return Ok(c);
        }
        let stage = || -> Result<_> {
            let (data, labeled) = self.labeled(cfg)?;
            m.init_digest = Some(sha_digest(&initial_model(cfg, &data)?));
            let (model, report) =
                step4_task_specific_pretrain(cfg, &data, p.records()?, cfg.loss_variant, cfg.input_variant)?;
            let tags = Self::variant_tags(cfg.loss_variant, cfg.input_variant);
            let rec = self.record(cfg, &m, &model, &data, labeled.len(), &tags)?;
            self.finish(m, &data, Some(model), None, vec![rec], Some(report))
        };
        stage().map_err(|e| e.in_stage("C"))
    }

    pub fn model_d(&mut self, cfg: &PipelineConfig) -> Result<StageArtifact> {
        let c = self.model_c(cfg)?;
        let config = json!({ "labeled_size": cfg.data.labeled_size, "schedule": cfg.final_finetune });
        let m = meta(StageTag::D, &[&c], config);
        if let Some(d) = self.cached(&m)? {
            return Ok(d);
        }
        let stage = || -> Result<_> {
            let (data, labeled) = self.labeled(cfg)?;
            let items = data.labeled_items(&labeled)?;
            let (model, report) = step5_final_finetune(cfg, &data, c.model()?, &items)?;
            let tags = Self::variant_tags(cfg.loss_variant, cfg.input_variant);
            let rec = self.record(cfg, &m, &model, &data, labeled.len(), &tags)?;
            self.finish(m, &data, Some(model), None, vec![rec], Some(report))
        };
        stage().map_err(|e| e.in_stage("D"))
    }

    /// Fine-tuning from the seed's random initialization.
    pub fn baseline(&mut self, cfg: &PipelineConfig) -> Result<StageArtifact> {
        let config = json!({ "init": init_key(cfg), "labeled_size": cfg.data.labeled_size, "schedule": cfg.finetune });
        let m = meta(StageTag::Baseline, &[], config);
        if let Some(b) = self.cached(&m)? {
            return Ok(b);
        }
        let stage = || -> Result<_> {
            let (data, labeled) = self.labeled(cfg)?;
            let init = initial_model(cfg, &data)?;
            let (model, report) = step2_finetune(cfg, &data, &init, &labeled)?;
            let rec = self.record(cfg, &m, &model, &data, labeled.len(), &[("upon", "random".into())])?;
            self.finish(m, &data, Some(model), None, vec![rec], Some(report))
        };
        stage().map_err(|e| e.in_stage("baseline"))
    }

    /// Classic self-training upon random init, Model-A or Model-C. Upon A
    /// and C the step-3 records of Model-B serve as the first round's
    /// teacher predictions.
    pub fn classic_st(&mut self, cfg: &PipelineConfig, upon: Baseline) -> Result<StageArtifact> {
        let (parents, name): (Vec<StageArtifact>, &str) = match upon {
            Baseline::FineTune => return self.baseline(cfg),
            Baseline::ClassicStBase => (Vec::new(), "random"),
            Baseline::ClassicStModelA => (vec![self.model_a(cfg)?, self.pseudo(cfg)?], "Model-A"),
            Baseline::ClassicStModelC => (vec![self.model_c(cfg)?, self.pseudo(cfg)?], "Model-C"),
        };
        let config = json!({
            "init": init_key(cfg),
            "upon": name,
            "labeled_size": cfg.data.labeled_size,
            "self_training": cfg.self_training,
            "schedule": cfg.finetune,
            "confidence": cfg.ner_confidence,
        });
        let refs: Vec<&StageArtifact> = parents.iter().collect();
        let m = meta(StageTag::ClassicSt, &refs, config);
        if let Some(a) = self.cached(&m)? {
            return Ok(a);
        }
        let stage = || -> Result<_> {
            let (data, labeled) = self.labeled(cfg)?;
            let init;
            let (base, records) = match parents.as_slice() {
                [] => {
                    init = initial_model(cfg, &data)?;
                    (&init, None)
                }
                [base, pseudo] => (base.model()?, Some(pseudo.records()?)),
                _ => unreachable!("parents are built above"),
            };
            let out = classic_self_training(cfg, &data, base, &labeled, &data.pool, records)?;
            let rec = self.record(cfg, &m, &out.model, &data, labeled.len(), &[("upon", name.into())])?;
            self.finish(m, &data, Some(out.model), None, vec![rec], Some(out.report))
        };
        stage().map_err(|e| e.in_stage("classic-ST"))
    }

    /// Steps 1–5 in order, then the configured baselines.
    pub fn pipeline(&mut self, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
        cfg.validate()?;
        let mut artifacts = vec![
            self.model_a(cfg)?,
            self.model_b(cfg)?,
            self.pseudo(cfg)?,
            self.model_c(cfg)?,
            self.model_d(cfg)?,
        ];
        for b in cfg.baselines() {
            artifacts.push(self.classic_st(cfg, b)?);
        }
        let records = artifacts.iter().flat_map(|a| a.metrics.iter().cloned()).collect();
        Ok(PipelineOutcome { artifacts, records })
    }

    /// Runs every cell of the requested axes; axes not requested keep the
    /// config's value. Illegal loss/input pairs are skipped with a reason.
    pub fn grid(&mut self, cfg: &PipelineConfig, axes: &[GridAxis]) -> Result<GridOutcome> {
        cfg.validate_except_pairing()?;
        let has = |a: GridAxis| axes.contains(&a);
        let losses = if has(GridAxis::Loss) { cfg.grid.loss_variants.clone() } else { vec![cfg.loss_variant] };
        let inputs = if has(GridAxis::Input) { cfg.grid.input_variants.clone() } else { vec![cfg.input_variant] };
        if has(GridAxis::LabeledSize) && !cfg.data.uses_files() {
            if let Some(&n) = cfg.grid.labeled_sizes.iter().find(|&&n| n > cfg.data.synthetic.labeled_train) {
                return Err(Error::config(format!("grid labeled size {n} exceeds the labeled corpus")));
            }
        }
        let sizes: Vec<Option<usize>> = if has(GridAxis::LabeledSize) && !cfg.grid.labeled_sizes.is_empty() {
            cfg.grid.labeled_sizes.iter().map(|&n| Some(n)).collect()
        } else {
            vec![cfg.data.labeled_size]
        };
        let baselines = if has(GridAxis::Lineage) {
            let b = cfg.baselines();
            if b.is_empty() { Baseline::ALL.to_vec() } else { b }
        } else {
            Vec::new()
        };
        let mut out = GridOutcome::default();
        let mut seen = BTreeSet::new();
        let mut keep = |out: &mut GridOutcome, art: &StageArtifact| {
            for r in &art.metrics {
                if seen.insert(r.run_id.clone()) {
                    out.records.push(r.clone());
                }
            }
        };
        for seed in cfg.seeds() {
            for &size in &sizes {
                let mut base_cfg = cfg.clone();
                base_cfg.seed = seed;
                base_cfg.data.labeled_size = size;
                for &loss in &losses {
                    for &input in &inputs {
                        let cell = GridCell {
                            seed,
                            labeled_size: size,
                            loss,
                            input,
                        };
                        if let Err(e) = check_variant_pairing(loss, input) {
                            info!("skipping {cell}: {e}");
                            out.skipped.push(SkippedCell {
                                cell,
                                reason: e.to_string(),
                            });
                            continue;
                        }
                        let mut c = base_cfg.clone();
                        c.loss_variant = loss;
                        c.input_variant = input;
                        let b = self.model_b(&c)?;
                        keep(&mut out, &b);
                        let d = self.model_d(&c)?;
                        keep(&mut out, &d);
                        out.cells.push(cell);
                    }
                }
                for &bl in &baselines {
                    if bl == Baseline::ClassicStModelC
                        && check_variant_pairing(base_cfg.loss_variant, base_cfg.input_variant).is_err()
                    {
                        continue;
                    }
                    let art = self.classic_st(&base_cfg, bl)?;
                    keep(&mut out, &art);
                }
            }
        }
        Ok(out)
    }
}

pub fn run_full_pipeline(cfg: &PipelineConfig, store: Option<&ArtifactStore>) -> Result<PipelineOutcome> {
    Runner::new(store).pipeline(cfg)
}

pub fn run_ablation_grid(cfg: &PipelineConfig, axes: &[GridAxis], store: Option<&ArtifactStore>) -> Result<GridOutcome> {
    Runner::new(store).grid(cfg, axes)
}

/// Labeled-size columns present in the records, ascending.
pub fn size_columns(records: &[MetricsRecord]) -> Vec<Axis> {
    let sizes: BTreeSet<usize> = records.iter().filter_map(|r| r.labeled_size).collect();
    sizes
        .into_iter()
        .map(|n| {
            Axis::new(
                format!("{n} labeled"),
                Selector {
                    labeled_size: Some(n),
                    ..Selector::default()
                },
            )
        })
        .collect()
}

/// Rows of the lineage summary: baselines first, then the lineage models.
pub fn lineage_rows() -> Vec<Axis> {
    vec![
        Axis::new("Fine-tune only", Selector::stage("baseline")),
        Axis::new("Classic ST upon base", Selector::stage("classic-ST").with("upon", "random")),
        Axis::new("Classic ST upon Model-A", Selector::stage("classic-ST").with("upon", "Model-A")),
        Axis::new("Classic ST upon Model-C", Selector::stage("classic-ST").with("upon", "Model-C")),
        Axis::new("Model-B", Selector::stage("B")),
        Axis::new("Model-C", Selector::stage("C")),
        Axis::new("Our Method (Model-D)", Selector::stage("D")),
    ]
}

/// One Model-D row per loss/input combination.
pub fn variant_rows() -> Vec<Axis> {
    let mut rows = Vec::new();
    for loss in LossVariant::ALL {
        for input in InputVariant::ALL {
            if check_variant_pairing(loss, input).is_ok() {
                rows.push(Axis::new(
                    format!("{} / {}", loss.name(), input.name()),
                    Selector::stage("D").with("loss", loss.name()).with("input", input.name()),
                ));
            }
        }
    }
    rows
}

pub fn lineage_table(records: &[MetricsRecord], show_std: bool) -> String {
    render_ablation_table(records, &lineage_rows(), &size_columns(records), show_std)
}

pub fn variant_table(records: &[MetricsRecord], show_std: bool) -> String {
    render_ablation_table(records, &variant_rows(), &size_columns(records), show_std)
}
