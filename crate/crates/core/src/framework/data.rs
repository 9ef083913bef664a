//! Corpus loading and the packing shared by all stages.

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::framework::config::PipelineConfig;
use crate::framework::train::{Provenance, Target, TrainItem};
use crate::synth::{generate_classification_corpus, generate_ner_corpus, split_labeled_unlabeled};
use crate::text::corpus::read_corpus;
use crate::text::{Example, PackedExample, Payload, TagSet, TaskKind, Vocab};

/// Labeled training corpus, test set and unlabeled pool of one task, with
/// the vocabulary built from training and pool text.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task: TaskKind,
    pub vocab: Vocab,
    pub tags: Option<TagSet>,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub pool: Vec<Example>,
    pub max_len: usize,
}

fn read_file(path: &std::path::Path, task: TaskKind, tags: Option<&TagSet>, first_id: u64) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_corpus(&text, task, tags, first_id)
}

impl TaskData {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let d = &config.data;
        let (tags, num_classes, train, test, pool) = if d.uses_files() {
            let tags = (config.task == TaskKind::Ner).then(|| TagSet::new(d.tag_types.iter().cloned()));
            let path = |p: &Option<std::path::PathBuf>| p.clone().expect("validated");
            let test = read_file(&path(&d.test), config.task, tags.as_ref(), 0)?;
            let train = read_file(&path(&d.train), config.task, tags.as_ref(), test.len() as u64)?;
            let first_pool = (test.len() + train.len()) as u64;
            let pool: Vec<Example> = read_file(&path(&d.pool), config.task, tags.as_ref(), first_pool)?
                .iter()
                .map(Example::unlabeled)
                .collect();
            (tags, d.num_classes.unwrap_or(1), train, test, pool)
        } else {
            let spec = &d.synthetic;
            let (tags, corpus) = match config.task {
                TaskKind::Classification => (None, generate_classification_corpus(spec)?),
                TaskKind::Ner => (Some(spec.tag_set()), generate_ner_corpus(spec)?),
            };
            (tags, spec.num_classes, corpus.train, corpus.test, corpus.pool)
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::data("training and test sets must be non-empty"));
        }
        if let Some(c) = train.iter().chain(&test).filter_map(Example::class).find(|&c| c >= num_classes) {
            return Err(Error::data(format!("class {c} outside the {num_classes} configured classes")));
        }
        let vocab = Vocab::build(train.iter().chain(&pool).map(|e| e.input.surface()), d.vocab_min_count)?;
        Ok(Self {
            task: config.task,
            vocab,
            tags,
            num_classes,
            train,
            test,
            pool,
            max_len: config.model.max_seq_len,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.tags.as_ref().map_or(1, TagSet::len)
    }

    pub fn encoder_config(&self, config: &PipelineConfig) -> EncoderConfig {
        config.model.encoder(self.vocab.len(), self.num_classes, self.num_tags())
    }

    /// The first-stage labeled subset for `size` (all of `train` when
    /// `None`), drawn with `seed`.
    pub fn labeled(&self, size: Option<usize>, seed: u64) -> Result<Vec<Example>> {
        match size {
            None => Ok(self.train.clone()),
            Some(n) => Ok(split_labeled_unlabeled(&self.train, n, seed)?.0),
        }
    }

    pub fn pack(&self, examples: &[Example]) -> Result<Vec<PackedExample>> {
        examples.iter().map(|e| e.pack(&self.vocab, self.max_len)).collect()
    }

    pub fn pack_unlabeled(&self, examples: &[Example]) -> Result<Vec<PackedExample>> {
        examples.iter().map(|e| e.unlabeled().pack(&self.vocab, self.max_len)).collect()
    }

    /// Gold-labeled training items; errors when an example's label does not
    /// fit the task.
    pub fn labeled_items(&self, examples: &[Example]) -> Result<Vec<TrainItem>> {
        examples
            .iter()
            .map(|e| {
                if e.input.task() != self.task {
                    return Err(Error::data(format!("example {} does not belong to a {:?} task", e.id, self.task)));
                }
                let packed = e.pack(&self.vocab, self.max_len)?;
                let target = match &packed.payload {
                    Payload::Class(c) => Target::Class(*c),
                    Payload::Tags(t) => Target::Tags(t.clone()),
                    Payload::None => return Err(Error::data(format!("example {} has no gold label", e.id))),
                };
                Ok(TrainItem {
                    packed,
                    target,
                    provenance: Provenance::Labeled,
                })
            })
            .collect()
    }
}
