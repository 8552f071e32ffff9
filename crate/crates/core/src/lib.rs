//! Cloze-prompt source-code classification.
//!
//! Text is wrapped in a template holding one `[MASK]`, encoded by a small
//! transformer, and classified from an attention-weighted pool of the
//! `[MASK]` hidden vector across a range of layers.

#![allow(clippy::needless_range_loop)]

pub mod aggregator;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod params;
pub mod profiler;
pub mod prompt;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use aggregator::{HeadConfig, HeadParams, KnowledgeFeatures, LayerRange, Variant};
pub use data::{Format, LabeledDataset, LabeledExample, ToyTask};
pub use encoder::{EncoderConfig, EncoderParams, HiddenStack};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{AggregateReport, MetricsReport};
pub use model::{Model, PreparedExample};
pub use profiler::CostReport;
pub use prompt::{PromptTemplate, TaskKind};
pub use tensor::Tensor;
pub use tokenizer::{TokenId, Vocabulary};
pub use training::TrainConfig;
