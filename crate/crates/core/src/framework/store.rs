//! Stage artifacts and the hash-keyed, write-once artifact store.
//!
//! Each artifact is a directory `<root>/<id>` holding `config.json` (the
//! stage's config snapshot and lineage), `metrics.json`, and depending on
//! the stage `checkpoint.bin` + `vocab.txt`, `pseudo.jsonl` and
//! `train.json`. A directory only appears once complete.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::{init_model, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::framework::pseudo::{self, PseudoLabelRecord};
use crate::framework::train::TrainReport;
use crate::report::MetricsRecord;
use crate::text::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageTag {
    A,
    B,
    #[serde(rename = "pseudo")]
    Pseudo,
    C,
    D,
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "classic-ST")]
    ClassicSt,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::A => "A",
            StageTag::B => "B",
            StageTag::Pseudo => "pseudo",
            StageTag::C => "C",
            StageTag::D => "D",
            StageTag::Baseline => "baseline",
            StageTag::ClassicSt => "classic-ST",
        }
    }
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub stage: StageTag,
    /// `<stage>-<first 16 hex digits of hash>`.
    pub id: String,
    pub hash: String,
    /// Ids of the artifacts this one was derived from.
    pub parents: Vec<String>,
    /// The config subtree that, with the parents, determines the artifact.
    pub config: serde_json::Value,
    pub encoder: Option<EncoderConfig>,
    /// SHA-256 of the initial checkpoint for stages trained from scratch.
    pub init_digest: Option<String>,
}

impl ArtifactMeta {
    pub fn new(stage: StageTag, hash: String, parents: Vec<String>, config: serde_json::Value) -> Self {
        Self {
            stage,
            id: format!("{}-{}", stage.as_str(), &hash[..16]),
            hash,
            parents,
            config,
            encoder: None,
            init_digest: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageArtifact {
    pub meta: ArtifactMeta,
    pub model: Option<Arc<EncoderModel<f32>>>,
    pub records: Option<Arc<Vec<PseudoLabelRecord>>>,
    pub metrics: Vec<MetricsRecord>,
    pub report: Option<TrainReport>,
}

impl StageArtifact {
    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn model(&self) -> Result<&EncoderModel<f32>> {
        self.model
            .as_deref()
            .ok_or_else(|| Error::contract(format!("artifact {} holds no model", self.meta.id)))
    }

    pub fn records(&self) -> Result<&[PseudoLabelRecord]> {
        self.records
            .as_deref()
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("artifact {} holds no pseudo-labels", self.meta.id)))
    }
}

pub struct ArtifactStore {
    root: PathBuf,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.dir(id).join("config.json").is_file()
    }

    /// Ids of every complete artifact, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') && self.contains(&name) {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Persists the artifact unless one with the same id already exists;
    /// files are staged in a hidden directory and moved into place.
    pub fn save(&self, artifact: &StageArtifact, vocab: Option<&Vocab>) -> Result<PathBuf> {
        let id = artifact.id();
        let dest = self.dir(id);
        if self.contains(id) {
            return Ok(dest);
        }
        let tmp = self.root.join(format!(".tmp-{id}-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        if let Some(model) = &artifact.model {
            checkpoint::save(&model.params, &tmp.join("checkpoint.bin"))?;
        }
        if let (Some(v), Some(_)) = (vocab, &artifact.model) {
            v.save(&tmp.join("vocab.txt"))?;
        }
        if let Some(records) = &artifact.records {
            pseudo::write_jsonl(&tmp.join("pseudo.jsonl"), records)?;
        }
        if let Some(report) = &artifact.report {
            write(&tmp.join("train.json"), &serde_json::to_vec(report)?)?;
        }
        write(&tmp.join("metrics.json"), &serde_json::to_vec_pretty(&artifact.metrics)?)?;
        write(&tmp.join("config.json"), &serde_json::to_vec_pretty(&artifact.meta)?)?;
        if let Err(e) = std::fs::rename(&tmp, &dest) {
            let _ = std::fs::remove_dir_all(&tmp);
            if !self.contains(id) {
                return Err(Error::io(&dest, e));
            }
        }
        Ok(dest)
    }

    pub fn load(&self, id: &str) -> Result<StageArtifact> {
        let dir = self.dir(id);
        let meta: ArtifactMeta = serde_json::from_str(&read_text(&dir.join("config.json"))?)?;
        let metrics: Vec<MetricsRecord> = serde_json::from_str(&read_text(&dir.join("metrics.json"))?)?;
        let model = match &meta.encoder {
            Some(cfg) if dir.join("checkpoint.bin").is_file() => Some(Arc::new(load_model(cfg, &dir.join("checkpoint.bin"))?)),
            _ => None,
        };
        let records = if dir.join("pseudo.jsonl").is_file() {
            Some(Arc::new(pseudo::read_jsonl(&dir.join("pseudo.jsonl"))?))
        } else {
            None
        };
        let report = if dir.join("train.json").is_file() {
            Some(serde_json::from_str(&read_text(&dir.join("train.json"))?)?)
        } else {
            None
        };
        Ok(StageArtifact {
            meta,
            model,
            records,
            metrics,
            report,
        })
    }

    /// A stored model together with the vocabulary it was trained with.
    pub fn load_model(&self, id: &str) -> Result<(EncoderModel<f32>, Vocab)> {
        let dir = self.dir(id);
        let meta: ArtifactMeta = serde_json::from_str(&read_text(&dir.join("config.json"))?)?;
        let cfg = meta
            .encoder
            .ok_or_else(|| Error::contract(format!("artifact {id} holds no model")))?;
        Ok((load_model(&cfg, &dir.join("checkpoint.bin"))?, Vocab::load(&dir.join("vocab.txt"))?))
    }
}

/// Rebuilds a model from a checkpoint file; every parameter must be present.
pub fn load_model(config: &EncoderConfig, path: &Path) -> Result<EncoderModel<f32>> {
    let mut model = init_model::<f32>(config, 0)?;
    model.params.load_from(checkpoint::load(path)?)?;
    Ok(model)
}
