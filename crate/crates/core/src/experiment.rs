//! Multi-seed runs, ablations, layer sweeps and attention reports.

use serde::{Deserialize, Serialize};

use crate::aggregator::{HeadConfig, LayerRange, Variant};
use crate::data::{make_toy_corpus, stratified_split, LabeledExample, ToyTask};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, AggregateReport, MetricsReport};
use crate::model::{prepare, Model, PreparedExample};
use crate::prompt::{PromptTemplate, TaskKind};
use crate::tokenizer::{train_vocab, Vocabulary};
use crate::training::{evaluate, train_classifier, HistoryRecord, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub encoder: EncoderConfig,
    pub layers: LayerRange,
    pub attn_projection: bool,
    pub template: PromptTemplate,
    pub n_classes: usize,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn head_config(&self, variant: Variant) -> HeadConfig {
        HeadConfig {
            variant,
            n_classes: self.n_classes,
            d_model: self.encoder.d_model,
            layers: self.layers,
            attn_projection: self.attn_projection,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub history: Vec<HistoryRecord>,
    pub test: MetricsReport,
    pub model: Model,
}

/// Seeds `cfg.seed + i` for `i` in `0..n_seeds`.
pub fn seed_sequence(cfg: &TrainConfig) -> Vec<u64> {
    (0..cfg.n_seeds as u64).map(|i| cfg.seed + i).collect()
}

/// One training run per seed for `spec.train.variant`.
pub fn run_seeds(
    spec: &ExperimentSpec,
    vocab: &Vocabulary,
    train: &[LabeledExample],
    test: &[LabeledExample],
    pretrained: Option<&EncoderParams>,
) -> Result<Vec<SeedRun>> {
    let variant = spec.train.variant;
    let max_len = spec.encoder.max_len;
    if spec.encoder.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "encoder vocab_size {} != vocabulary size {}",
            spec.encoder.vocab_size,
            vocab.size()
        )));
    }
    let train_p = prepare(vocab, &spec.template, variant, train, max_len)?;
    let test_p = prepare(vocab, &spec.template, variant, test, max_len)?;
    seed_sequence(&spec.train)
        .into_iter()
        .map(|seed| {
            let mut model = Model::init(spec.encoder.clone(), spec.head_config(variant), seed)?;
            if let Some(p) = pretrained {
                if p.config() != &spec.encoder {
                    return Err(Error::Config(
                        "pretrained encoder config differs from the run config".into(),
                    ));
                }
                model.encoder = p.clone();
            }
            let cfg = TrainConfig {
                seed,
                ..spec.train.clone()
            };
            let history = train_classifier(&mut model, &train_p, Some(&test_p), &cfg)?;
            let test = evaluate(&model, &test_p)?.report;
            Ok(SeedRun {
                seed,
                history,
                test,
                model,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: Variant,
    pub layers: LayerRange,
    pub seeds: Vec<u64>,
    pub runs: Vec<MetricsReport>,
    pub summary: AggregateReport,
}

impl ResultRow {
    pub fn from_runs(variant: Variant, layers: LayerRange, runs: &[SeedRun]) -> Result<Self> {
        let reports: Vec<MetricsReport> = runs.iter().map(|r| r.test.clone()).collect();
        Ok(Self {
            variant,
            layers,
            seeds: runs.iter().map(|r| r.seed).collect(),
            summary: aggregate(&reports)?,
            runs: reports,
        })
    }
}

pub fn ablate(
    spec: &ExperimentSpec,
    variants: &[Variant],
    vocab: &Vocabulary,
    train: &[LabeledExample],
    test: &[LabeledExample],
    pretrained: Option<&EncoderParams>,
) -> Result<Vec<ResultRow>> {
    variants
        .iter()
        .map(|&variant| {
            let s = ExperimentSpec {
                train: TrainConfig {
                    variant,
                    ..spec.train.clone()
                },
                ..spec.clone()
            };
            let runs = run_seeds(&s, vocab, train, test, pretrained)?;
            ResultRow::from_runs(variant, spec.layers, &runs)
        })
        .collect()
}

/// Ranges `start..L` for every start in `0..=L`.
pub fn sweep_ranges(n_layers: usize) -> Vec<LayerRange> {
    (0..=n_layers)
        .map(|s| LayerRange { start: s, end: n_layers })
        .collect()
}

pub fn sweep_layers(
    spec: &ExperimentSpec,
    vocab: &Vocabulary,
    train: &[LabeledExample],
    test: &[LabeledExample],
    pretrained: Option<&EncoderParams>,
) -> Result<Vec<ResultRow>> {
    sweep_ranges(spec.encoder.n_layers)
        .into_iter()
        .map(|layers| {
            let s = ExperimentSpec {
                layers,
                ..spec.clone()
            };
            let runs = run_seeds(&s, vocab, train, test, pretrained)?;
            ResultRow::from_runs(spec.train.variant, layers, &runs)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub example_id: String,
    pub layer_ids: Vec<usize>,
    pub alphas: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
}

pub fn attention_report(model: &Model, examples: &[PreparedExample]) -> Result<Vec<AttentionRecord>> {
    if !model.head.variant().uses_attention() {
        return Err(Error::Config(format!(
            "variant {} has no attention weights",
            model.head.variant()
        )));
    }
    let layer_ids: Vec<usize> = model.head.config().layers.layers().collect();
    examples
        .iter()
        .map(|ex| {
            let p = model.predict(ex)?;
            Ok(AttentionRecord {
                example_id: ex.id.clone(),
                layer_ids: layer_ids.clone(),
                alphas: p.alphas.unwrap_or_default(),
                predicted: p.predicted,
                gold: ex.label,
            })
        })
        .collect()
}

/// Mean attention weight per selected layer.
pub fn mean_alphas(records: &[AttentionRecord]) -> Vec<f64> {
    let Some(first) = records.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.alphas.len()];
    for r in records {
        for (a, &x) in acc.iter_mut().zip(&r.alphas) {
            *a += x;
        }
    }
    acc.iter().map(|a| a / records.len() as f64).collect()
}

pub use crate::metrics::format_table;

/// Rows for [`format_table`], labelled by variant or layer range.
pub fn table_rows(rows: &[ResultRow], by_layers: bool) -> Vec<(String, AggregateReport)> {
    rows.iter()
        .map(|r| {
            let label = if by_layers {
                format!("layers {}", r.layers)
            } else {
                r.variant.name().to_string()
            };
            (label, r.summary.clone())
        })
        .collect()
}

/// Defaults for the synthetic toy tasks: corpus size, split, vocabulary
/// budget and optimizer settings that train the tiny encoder reliably.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRecipe {
    pub task: ToyTask,
    pub n_per_class: usize,
    pub corpus_seed: u64,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub vocab_size: usize,
    pub train: TrainConfig,
}

impl ToyRecipe {
    pub fn new(task: ToyTask) -> Self {
        Self {
            task,
            n_per_class: 500 / task.n_classes(),
            corpus_seed: 7,
            split_ratio: 0.8,
            split_seed: 7,
            vocab_size: 200,
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 4,
                epochs: 15,
                ..TrainConfig::default()
            },
        }
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.task {
            ToyTask::Languages => TaskKind::CodeLanguage,
            ToyTask::BinarySmell => TaskKind::CodeSmell,
            ToyTask::Comments => TaskKind::CodeComment,
            ToyTask::Debt => TaskKind::TechnicalDebt,
        }
    }

    pub fn corpus(&self) -> Result<Vec<LabeledExample>> {
        make_toy_corpus(self.task, self.n_per_class, self.corpus_seed)
    }

    /// Corpus, stratified split and a vocabulary learned on the train part.
    pub fn materialize(&self) -> Result<ToyData> {
        let corpus = self.corpus()?;
        let (train, test) = stratified_split(&corpus, self.split_ratio, self.split_seed)?;
        let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
        let vocab = train_vocab(&texts, self.vocab_size)?;
        Ok(ToyData { train, test, vocab })
    }

    pub fn spec(&self, vocab: &Vocabulary) -> ExperimentSpec {
        let encoder = EncoderConfig::tiny(vocab.size());
        ExperimentSpec {
            layers: LayerRange::default_for(encoder.n_layers),
            encoder,
            attn_projection: false,
            template: self.task_kind().default_template(),
            n_classes: self.task.n_classes(),
            train: self.train.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub vocab: Vocabulary,
}
