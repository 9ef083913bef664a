//! Experiment configuration: JSON with documented defaults, cross-field
//! validation and a canonical content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::framework::train::StageSchedule;
use crate::objectives::LossVariant;
use crate::synth::GeneratorSpec;
use crate::text::{MaskingConfig, TaskKind};

/// Whether task-specific pre-training sees MLM-corrupted or original input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InputVariant {
    Masked,
    NoMask,
}

impl InputVariant {
    pub const ALL: [InputVariant; 2] = [InputVariant::Masked, InputVariant::NoMask];

    pub fn name(self) -> &'static str {
        match self {
            InputVariant::Masked => "Masked",
            InputVariant::NoMask => "NoMask",
        }
    }
}

/// The rule behind `NoMask ⇒ no MLM term`; also used to skip grid cells.
pub fn check_variant_pairing(loss: LossVariant, input: InputVariant) -> Result<()> {
    if input == InputVariant::NoMask && loss.uses_mlm() {
        return Err(Error::config(format!(
            "input_variant NoMask cannot be paired with {}: the MLM term needs masked positions",
            loss.name()
        )));
    }
    Ok(())
}

/// Encoder shape; vocabulary, class and tag counts come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub tie_mlm: bool,
    pub pooler: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            num_layers: e.num_layers,
            hidden: e.hidden,
            heads: e.heads,
            ffn_mult: e.ffn_mult,
            max_seq_len: e.max_seq_len,
            dropout: e.dropout,
            layer_norm_eps: e.layer_norm_eps,
            tie_mlm: e.tie_mlm,
            pooler: e.pooler,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, vocab_size: usize, num_classes: usize, num_tags: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            max_seq_len: self.max_seq_len,
            vocab_size,
            num_classes,
            num_tags,
            dropout: self.dropout,
            layer_norm_eps: self.layer_norm_eps,
            tie_mlm: self.tie_mlm,
            pooler: self.pooler,
        }
    }
}

/// Where examples come from: the synthetic generator, or corpus files
/// (all three paths together).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: GeneratorSpec,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    /// Entity types of file-based NER corpora.
    pub tag_types: Vec<String>,
    /// Class count of file-based classification corpora.
    pub num_classes: Option<usize>,
    /// Subsample of the labeled training set to fine-tune on; all of it
    /// when absent.
    pub labeled_size: Option<usize>,
    pub vocab_min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: GeneratorSpec::default(),
            train: None,
            test: None,
            pool: None,
            tag_types: Vec::new(),
            num_classes: None,
            labeled_size: None,
            vocab_min_count: 1,
        }
    }
}

impl DataConfig {
    pub fn uses_files(&self) -> bool {
        self.train.is_some() || self.test.is_some() || self.pool.is_some()
    }
}

/// NER pseudo-label confidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NerConfidence {
    /// Mean over tokens of the per-token max softmax probability.
    MeanTokenMax,
    /// Minimum over tokens of the same quantity.
    MinTokenMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicStConfig {
    /// Confidence threshold τ in (0, 1].
    pub threshold: f64,
    /// Target size of the selected set; the per-class cap is
    /// `ceil(target / num_classes)`. Defaults to the pool size.
    pub target_size: Option<usize>,
    pub iterations: usize,
}

impl Default for ClassicStConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            target_size: None,
            iterations: 1,
        }
    }
}

/// The comparison rows evaluated next to the main lineage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Fine-tune from random initialization on the labeled set only.
    FineTune,
    /// Classic self-training starting from random initialization.
    ClassicStBase,
    ClassicStModelA,
    ClassicStModelC,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [
        Baseline::FineTune,
        Baseline::ClassicStBase,
        Baseline::ClassicStModelA,
        Baseline::ClassicStModelC,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    Loss,
    Input,
    LabeledSize,
    /// Adds the baseline rows to every labeled-size / seed combination.
    Lineage,
}

impl std::str::FromStr for GridAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "loss" => Ok(GridAxis::Loss),
            "input" => Ok(GridAxis::Input),
            "labeled_size" | "size" => Ok(GridAxis::LabeledSize),
            "lineage" => Ok(GridAxis::Lineage),
            other => Err(Error::config(format!(
                "unknown grid axis {other:?} (expected loss, input, size or lineage)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub loss_variants: Vec<LossVariant>,
    pub input_variants: Vec<InputVariant>,
    pub labeled_sizes: Vec<usize>,
    /// Seeds every cell runs under; the top-level seed alone when empty.
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            loss_variants: vec![LossVariant::LogitsKlPlusMlm, LossVariant::LogitsKlOnly],
            input_variants: InputVariant::ALL.to_vec(),
            labeled_sizes: vec![500, 2000, 10_000],
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub masking: MaskingConfig,
    pub loss_variant: LossVariant,
    pub input_variant: InputVariant,
    /// Softmax temperature of the KL losses.
    pub temperature: f64,
    pub ner_confidence: NerConfidence,
    pub self_training: ClassicStConfig,
    pub domain_pretrain: StageSchedule,
    pub finetune: StageSchedule,
    pub task_pretrain: StageSchedule,
    pub final_finetune: StageSchedule,
    /// Evaluate every baseline row.
    pub ablation: bool,
    /// Baseline rows to evaluate when `ablation` is off.
    pub baselines: Vec<Baseline>,
    pub eval_batch_size: usize,
    pub grid: GridConfig,
    /// Refuse any wall-clock-derived state (timestamps) in outputs.
    pub deterministic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let finetune = StageSchedule {
            epochs: 3.0,
            min_steps: Some(500),
            ..StageSchedule::default()
        };
        Self {
            task: TaskKind::Classification,
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            masking: MaskingConfig::default(),
            loss_variant: LossVariant::LogitsKlOnly,
            input_variant: InputVariant::NoMask,
            temperature: 1.0,
            ner_confidence: NerConfidence::MeanTokenMax,
            self_training: ClassicStConfig::default(),
            domain_pretrain: StageSchedule {
                epochs: 1.0,
                ..StageSchedule::default()
            },
            finetune: finetune.clone(),
            task_pretrain: StageSchedule {
                epochs: 1.0,
                ..StageSchedule::default()
            },
            final_finetune: finetune,
            ablation: false,
            baselines: Vec::new(),
            eval_batch_size: 256,
            grid: GridConfig::default(),
            deterministic: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_variant_pairing(self.loss_variant, self.input_variant)?;
        self.validate_except_pairing()
    }

    /// Every rule but the loss/input pairing, which the grid checks per cell.
    pub fn validate_except_pairing(&self) -> Result<()> {
        let m = &self.model;
        if m.heads == 0 || m.hidden % m.heads != 0 {
            return Err(Error::config(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                m.hidden, m.heads
            )));
        }
        self.model.encoder(8, 2, 3).validate()?;
        let t = self.self_training.threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::config(format!("self_training.threshold τ = {t} must lie in (0, 1]")));
        }
        if self.self_training.iterations == 0 {
            return Err(Error::config("self_training.iterations must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size must be at least 1"));
        }
        self.masking.validate()?;
        for (name, s) in [
            ("domain_pretrain", &self.domain_pretrain),
            ("finetune", &self.finetune),
            ("task_pretrain", &self.task_pretrain),
            ("final_finetune", &self.final_finetune),
        ] {
            s.validate(name)?;
        }
        let d = &self.data;
        if d.uses_files() {
            if d.train.is_none() || d.test.is_none() || d.pool.is_none() {
                return Err(Error::config("data.train, data.test and data.pool must be given together"));
            }
            match self.task {
                TaskKind::Ner if d.tag_types.is_empty() => {
                    return Err(Error::config("file-based NER data needs data.tag_types"))
                }
                TaskKind::Classification if d.num_classes.map_or(true, |c| c < 2) => {
                    return Err(Error::config("file-based classification data needs data.num_classes >= 2"))
                }
                _ => {}
            }
        } else {
            d.synthetic.validate()?;
            if let Some(n) = d.labeled_size {
                if n == 0 || n > d.synthetic.labeled_train {
                    return Err(Error::config(format!(
                        "data.labeled_size {n} must be in 1..={}",
                        d.synthetic.labeled_train
                    )));
                }
            }
        }
        if self.grid.labeled_sizes.contains(&0) {
            return Err(Error::config("grid labeled sizes must be positive"));
        }
        Ok(())
    }

    /// Stable digest of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.grid.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.grid.seeds.clone()
        }
    }

    pub fn baselines(&self) -> Vec<Baseline> {
        if self.ablation {
            Baseline::ALL.to_vec()
        } else {
            let mut b = self.baselines.clone();
            b.sort();
            b.dedup();
            b
        }
    }
}

/// SHA-256 of the compact JSON text; `serde_json` maps keep keys sorted,
/// so equal values hash equally regardless of input key order.
pub fn hash_json(value: &serde_json::Value) -> String {
    let text = serde_json::to_string(value).expect("json value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let config: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
