//! Prepared dataset directories and experiment configuration.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;
use treecaps::ast::{read_class_manifest, read_dataset, Split};
use treecaps::embeddings::EmbeddingTable;
use treecaps::training::TrainConfig;
use treecaps::{Sample, Vocabulary};

use crate::failure::{Classify, CmdResult, Failure};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CLASSES_FILE: &str = "classes.json";

pub fn read_samples(path: &Path) -> CmdResult<Vec<Sample>> {
    let file = File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))
        .or_input()?;
    read_dataset(file)
        .with_context(|| path.display().to_string())
        .or_input()
}

pub fn check_labels(samples: &[Sample], classes: usize, path: &Path) -> CmdResult {
    match samples.iter().position(|s| s.label >= classes) {
        Some(i) => Err(Failure::input(format!(
            "{}: record {} has label {} but there are {classes} classes",
            path.display(),
            i + 1,
            samples[i].label
        ))),
        None => Ok(()),
    }
}

/// Output of `prepare`: the three splits, vocabulary and class names.
pub struct Prepared {
    pub split: Split,
    pub vocab: Vocabulary,
    pub class_names: Vec<String>,
}

impl Prepared {
    pub fn load(dir: &Path, vocab_path: Option<&Path>) -> CmdResult<Self> {
        let class_names = read_class_manifest(&dir.join(CLASSES_FILE))
            .with_context(|| format!("class manifest in {}", dir.display()))
            .or_input()?
            .names();
        let mut parts = Vec::new();
        for name in [TRAIN_FILE, VAL_FILE, TEST_FILE] {
            let path = dir.join(name);
            let samples = read_samples(&path)?;
            check_labels(&samples, class_names.len(), &path)?;
            parts.push(samples);
        }
        let vocab_path = vocab_path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| dir.join(VOCAB_FILE));
        let vocab = Vocabulary::load(&vocab_path)
            .with_context(|| format!("vocabulary {}", vocab_path.display()))
            .or_input()?;
        let test = parts.pop().unwrap();
        let validation = parts.pop().unwrap();
        let train = parts.pop().unwrap();
        Ok(Self {
            split: Split {
                train,
                validation,
                test,
            },
            vocab,
            class_names,
        })
    }
}

fn default_ensemble_size() -> usize {
    1
}

/// One experiment: where the data lives, where checkpoints go, and the
/// training configuration. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory written by `prepare`.
    pub dataset: PathBuf,
    /// Defaults to the dataset's own vocabulary.
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    /// Text-format embeddings used to initialize the table.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    /// Models trained with consecutive seeds starting at `train.seed`.
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CmdResult<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .or_input()?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("config {}", path.display()))
            .or_input()?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.checkpoint_dir);
        cfg.vocabulary.as_mut().map(resolve);
        cfg.embeddings.as_mut().map(resolve);
        Ok(cfg)
    }

    /// Lists every problem at once.
    pub fn validate(&self) -> CmdResult {
        let mut problems = Vec::new();
        if let Err(e) = self.train.validate() {
            problems.push(e);
        }
        if self.ensemble_size == 0 {
            problems.push("ensemble_size must be at least 1".to_string());
        }
        if !self.dataset.is_dir() {
            problems.push(format!(
                "dataset directory {} does not exist",
                self.dataset.display()
            ));
        }
        for path in self.vocabulary.iter().chain(&self.embeddings) {
            if !path.is_file() {
                problems.push(format!("{} does not exist", path.display()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Failure::input(problems.join("; ")))
        }
    }

    /// Initial embedding table aligned to `vocab`, if one is configured.
    pub fn init_embeddings(&self, vocab: &Vocabulary) -> CmdResult<Option<EmbeddingTable<f32>>> {
        let Some(path) = &self.embeddings else {
            return Ok(None);
        };
        let base =
            EmbeddingTable::init(vocab, self.train.model.embed_dim, self.train.seed).or_input()?;
        let (table, report) = base
            .import_text(path)
            .with_context(|| format!("embeddings {}", path.display()))
            .or_input()?;
        eprintln!(
            "loaded {} embedding rows from {} ({} unknown tokens skipped)",
            report.loaded,
            path.display(),
            report.skipped
        );
        Ok(Some(table))
    }
}

pub fn parse_variant(s: &str) -> Result<treecaps::Variant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown variant {s:?}; expected standard, dmp-ablation or secondary-layer")
    })
}
