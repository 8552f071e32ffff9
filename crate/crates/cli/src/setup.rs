//! Corpus, vocabulary and output-directory plumbing shared by commands.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use promptclass::data::{load_dataset, stratified_split, LabelMap, SplitManifest};
use promptclass::tokenizer::train_vocab;
use promptclass::{Format, LabeledExample, PromptTemplate, Vocabulary};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{usage, RunConfig, Task};

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub labels: Option<LabelMap>,
    pub n_classes: usize,
    pub split: SplitManifest,
}

impl Corpus {
    pub fn all(&self) -> Vec<LabeledExample> {
        self.train.iter().chain(&self.test).cloned().collect()
    }
}

/// Toy corpus for `toy-*` tasks, otherwise `--data` split by class.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let (examples, labels, n_classes) = match (cfg.task, &cfg.data) {
        (Some(Task::Toy(t)), None) => {
            let r = cfg.recipe().expect("toy task has a recipe");
            (r.corpus()?, None, t.n_classes())
        }
        (Some(Task::Toy(_)), Some(_)) => {
            return Err(usage("--data cannot be combined with a toy task"));
        }
        (_, Some(path)) => {
            let format = cfg.format.unwrap_or_else(|| Format::from_path(path));
            let ds = load_dataset(path, format)
                .with_context(|| format!("loading {}", path.display()))?;
            let n = ds.n_classes();
            let labels = (!ds.labels.is_empty()).then(|| ds.labels.clone());
            (ds.examples, labels, n)
        }
        (_, None) => return Err(usage("this command needs --task toy-* or --data")),
    };
    let n_classes = cfg.n_classes.unwrap_or(n_classes);
    let (train, test) = stratified_split(&examples, cfg.split_ratio, cfg.split_seed)?;
    let split = SplitManifest::new(cfg.split_seed, cfg.split_ratio, &train, &test);
    Ok(Corpus {
        train,
        test,
        labels,
        n_classes,
        split,
    })
}

/// `--vocab` when given, otherwise learned from the training texts.
pub fn vocabulary(cfg: &RunConfig, corpus: &Corpus) -> Result<Vocabulary> {
    match &cfg.vocab {
        Some(p) => Ok(Vocabulary::load(p)?),
        None => {
            let texts: Vec<&str> = corpus.train.iter().map(|e| e.text.as_str()).collect();
            Ok(train_vocab(&texts, cfg.encoder.vocab_size)?)
        }
    }
}

/// Output directory guarded by a lock file for the lifetime of the value.
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

pub const LOCK_FILE: &str = ".promptclass.lock";

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(usage(format!(
                    "{} is in use by another run (remove {} if that run is gone)",
                    path.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(f, "{}", std::process::id())?;
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        fs::create_dir_all(&p)?;
        Ok(p)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.path.join(name), value)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path.join(name), text)?;
        Ok(())
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let mut f = File::create(self.path.join("config.ini"))?;
        cfg.settings.to_ini().write_to(&mut f)?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Everything besides tensors that `eval` and `attention-report` need.
pub fn checkpoint_metadata(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    labels: Option<&LabelMap>,
    seed: u64,
) -> Value {
    json!({
        "task": cfg.task.map(|t| t.to_string()),
        "template": cfg.template.pattern(),
        "template_name": cfg.template.name(),
        "seed": seed,
        "labels": labels.map(|l| l.names().to_vec()),
        "vocab": vocab.tokens(),
    })
}

pub fn vocab_from_metadata(meta: &Value) -> Result<Vocabulary> {
    let tokens: Vec<String> = serde_json::from_value(meta["vocab"].clone())
        .context("checkpoint metadata carries no vocabulary")?;
    Ok(Vocabulary::from_tokens(tokens)?)
}

pub fn template_from_metadata(meta: &Value) -> Result<PromptTemplate> {
    let pattern = meta["template"]
        .as_str()
        .context("checkpoint metadata carries no template")?;
    let name = meta["template_name"].as_str().unwrap_or("custom");
    Ok(PromptTemplate::parse(name, pattern)?)
}
