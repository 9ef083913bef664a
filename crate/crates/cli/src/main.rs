//! `selftrain` command-line entry point.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use selftrain::framework::config::{load_config, Baseline, GridAxis, PipelineConfig};
use selftrain::framework::data::TaskData;
use selftrain::framework::pipeline::{lineage_table, size_columns, variant_table, Runner};
use selftrain::framework::stages::evaluate;
use selftrain::framework::store::{ArtifactStore, StageArtifact};
use selftrain::report::{self, Axis, MetricsRecord, Selector};
use selftrain::text::corpus::write_corpus;

#[derive(Parser, Debug)]
#[command(name = "selftrain", version, about = "Self-training as pre-training for small text encoders")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (JSON); documented defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed (and any grid seed list).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for artifacts, metrics and manifests.
    #[arg(long, global = true, value_name = "DIR", env = "SELFTRAIN_OUT", default_value = "runs")]
    out: PathBuf,
    /// Keep outputs free of wall-clock state; `--deterministic false` adds timestamps.
    #[arg(long, global = true, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true",
          default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,
    /// Worker threads. Training is single-threaded; values above 1 are ignored.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus (train/test/pool files, vocab, generator spec).
    GenData,
    /// Step 1: masked-LM pre-training on the pool (Model-A).
    Pretrain,
    /// Step 2: fine-tune Model-A on the labeled set (Model-B).
    Finetune,
    /// Step 3: pseudo-label the pool with Model-B.
    PseudoLabel,
    /// Step 4: task-specific pre-training on pseudo-labels (Model-C).
    Tsp,
    /// Classic self-training baseline.
    SelfTrain {
        #[arg(long, value_enum, default_value_t = Upon::Base)]
        upon: Upon,
    },
    /// Steps 1 to 5, then the configured baselines; prints the summary table.
    Pipeline {
        /// Also evaluate every baseline row.
        #[arg(long)]
        ablation: bool,
    },
    /// Cartesian product of the given axes (loss, input, size, lineage).
    Grid {
        #[arg(long, value_delimiter = ',', default_value = "loss,input")]
        axes: Vec<GridAxis>,
    },
    /// Test metric of a stored model artifact.
    Eval {
        #[arg(long, value_name = "ID")]
        artifact: String,
    },
    /// Render a table from a metrics JSONL file.
    Report {
        #[arg(long, value_enum, default_value_t = Table::Ablation)]
        table: Table,
        /// Metrics file; defaults to `<out>/metrics.jsonl`.
        #[arg(long = "in", value_name = "PATH")]
        input: Option<PathBuf>,
        /// Stage tag of the baseline row for delta tables.
        #[arg(long, default_value = "baseline")]
        baseline: String,
        /// Append the cross-seed standard deviation to each cell.
        #[arg(long)]
        std: bool,
        /// Also write the table to this file.
        #[arg(long, value_name = "PATH")]
        save: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Upon {
    Base,
    ModelA,
    ModelC,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Table {
    /// Lineage and baseline rows by labeled size.
    Ablation,
    /// Model-D rows by loss / input variant.
    Variants,
    /// Lineage rows as differences from the baseline row.
    Delta,
}

/// What a command resolved and produced; one file per config hash.
#[derive(Serialize)]
struct RunManifest<'a> {
    config_hash: String,
    config: &'a PipelineConfig,
    artifact_dir: PathBuf,
    /// Completed stage artifacts by id.
    stages: BTreeMap<String, bool>,
}

struct Session {
    config: PipelineConfig,
    out: PathBuf,
    store: ArtifactStore,
}

impl Session {
    fn open(g: &Global) -> Result<Self> {
        let mut config = match &g.config {
            Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = g.seed {
            config.seed = seed;
            config.grid.seeds.clear();
        }
        config.deterministic = g.deterministic;
        if g.threads != 1 {
            warn!("--threads {} ignored: training runs single-threaded for reproducibility", g.threads);
        }
        std::fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
        let store = ArtifactStore::open(g.out.join("artifacts"))?;
        Ok(Self {
            config,
            out: g.out.clone(),
            store,
        })
    }

    fn metrics_path(&self) -> PathBuf {
        self.out.join("metrics.jsonl")
    }

    /// Appends records not already present (by run id and metric).
    fn append_metrics(&self, records: &[MetricsRecord]) -> Result<()> {
        let path = self.metrics_path();
        let existing = if path.exists() { report::read_jsonl(&path)? } else { Vec::new() };
        let seen: BTreeSet<_> = existing.iter().map(|r| (r.run_id.clone(), r.metric)).collect();
        let fresh: Vec<MetricsRecord> = records
            .iter()
            .filter(|r| !seen.contains(&(r.run_id.clone(), r.metric)))
            .cloned()
            .collect();
        report::append_jsonl(&path, &fresh)?;
        Ok(())
    }

    fn write_manifest(&self, artifacts: &[&StageArtifact]) -> Result<()> {
        let hash = self.config.hash();
        let manifest = RunManifest {
            config_hash: hash.clone(),
            config: &self.config,
            artifact_dir: self.store.root().to_path_buf(),
            stages: artifacts.iter().map(|a| (a.meta.id.clone(), self.store.contains(&a.meta.id))).collect(),
        };
        let path = self.out.join(format!("manifest-{}.json", &hash[..16]));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn finish_stage(&self, art: &StageArtifact) -> Result<()> {
        self.append_metrics(&art.metrics)?;
        self.write_manifest(&[art])?;
        println!("{}\t{}", art.meta.id, self.store.dir(&art.meta.id).display());
        for r in &art.metrics {
            println!("{:?}\t{:.4}", r.metric, r.value);
        }
        Ok(())
    }
}

fn gen_data(s: &Session) -> Result<()> {
    let data = TaskData::load(&s.config)?;
    let dir = s.out.join("data");
    std::fs::create_dir_all(&dir)?;
    for (name, examples) in [("train", &data.train), ("test", &data.test), ("pool", &data.pool)] {
        let path = dir.join(format!("{name}.tsv"));
        std::fs::write(&path, write_corpus(examples, data.tags.as_ref())?).with_context(|| format!("writing {}", path.display()))?;
    }
    data.vocab.save(&dir.join("vocab.txt"))?;
    std::fs::write(dir.join("generator.json"), serde_json::to_string_pretty(&s.config.data.synthetic)?)?;
    println!(
        "{}: {} train, {} test, {} pool, vocabulary {}",
        dir.display(),
        data.train.len(),
        data.test.len(),
        data.pool.len(),
        data.vocab.len()
    );
    Ok(())
}

fn read_report_input(s: &Session, input: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    let path = input.map_or_else(|| s.metrics_path(), Path::to_path_buf);
    report::read_jsonl(&path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let s = Session::open(&cli.global)?;
    let mut runner = Runner::new(Some(&s.store));
    let cfg = &s.config;
    match cli.command {
        Command::GenData => gen_data(&s)?,
        Command::Pretrain => s.finish_stage(&runner.model_a(cfg)?)?,
        Command::Finetune => s.finish_stage(&runner.model_b(cfg)?)?,
        Command::PseudoLabel => {
            let p = runner.pseudo(cfg)?;
            s.finish_stage(&p)?;
            println!("{} records in {}", p.records()?.len(), s.store.dir(p.id()).join("pseudo.jsonl").display());
        }
        Command::Tsp => s.finish_stage(&runner.model_c(cfg)?)?,
        Command::SelfTrain { upon } => {
            let b = match upon {
                Upon::Base => Baseline::ClassicStBase,
                Upon::ModelA => Baseline::ClassicStModelA,
                Upon::ModelC => Baseline::ClassicStModelC,
            };
            s.finish_stage(&runner.classic_st(cfg, b)?)?;
        }
        Command::Pipeline { ablation } => {
            let mut cfg = cfg.clone();
            cfg.ablation |= ablation;
            let out = runner.pipeline(&cfg)?;
            s.append_metrics(&out.records)?;
            s.write_manifest(&out.artifacts.iter().collect::<Vec<_>>())?;
            for a in &out.artifacts {
                info!("{} -> {}", a.meta.id, s.store.dir(a.id()).display());
            }
            print!("{}", lineage_table(&out.records, false));
        }
        Command::Grid { axes } => {
            let out = runner.grid(cfg, &axes)?;
            s.append_metrics(&out.records)?;
            s.write_manifest(&[])?;
            println!("{} runs, {} skipped", out.cells.len(), out.skipped.len());
            for sk in &out.skipped {
                println!("skipped {}: {}", sk.cell, sk.reason);
            }
            print!("{}", variant_table(&out.records, true));
            if axes.contains(&GridAxis::Lineage) {
                print!("\n{}", lineage_table(&out.records, true));
            }
        }
        Command::Eval { artifact } => {
            let (model, vocab) = s.store.load_model(&artifact)?;
            let mut data = TaskData::load(cfg)?;
            data.vocab = vocab;
            let (metric, value) = evaluate(&model, &data, &data.test, cfg.eval_batch_size)?;
            println!("{artifact}\t{metric:?}\t{value:.4}");
        }
        Command::Report {
            table,
            input,
            baseline,
            std,
            save,
        } => {
            let records = read_report_input(&s, input.as_deref())?;
            report::check_unique(&records)?;
            let text = match table {
                Table::Ablation => lineage_table(&records, std),
                Table::Variants => variant_table(&records, std),
                Table::Delta => {
                    let base = Axis::new(baseline.clone(), Selector::stage(&baseline));
                    let rows: Vec<Axis> = selftrain::framework::pipeline::lineage_rows()
                        .into_iter()
                        .filter(|r| r.select.stage.as_deref() != Some(baseline.as_str()))
                        .collect();
                    report::render_delta_table(&records, &base, &rows, &size_columns(&records))?
                }
            };
            print!("{text}");
            if let Some(path) = save {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap exits 2 for usage errors (unknown subcommand included), 0 for --help
            e.exit();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.to_string().contains("NoMask")) {
                eprintln!("hint: NoMask input needs a loss variant without the MLM term");
            }
            ExitCode::FAILURE
        }
    }
}
