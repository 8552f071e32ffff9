//! Run settings: built-in defaults, then a `key = value` file with
//! `[section]` headers, then command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Result};
use ini::Ini;
use promptclass::data::ToyTask;
use promptclass::experiment::ToyRecipe;
use promptclass::{EncoderConfig, Format, LayerRange, PromptTemplate, TaskKind, TrainConfig, Variant};

/// Bad flags, keys or values. Maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

/// Recognised keys, grouped by the section they are written under.
pub const SECTIONS: &[(&str, &[&str])] = &[
    (
        "run",
        &[
            "task", "data", "format", "template", "seed", "seeds", "variant", "variants",
            "freeze_backbone", "vocab", "checkpoint", "pretrained",
        ],
    ),
    (
        "model",
        &[
            "scale", "d_model", "n_layers", "n_heads", "d_ffn", "dropout", "max_len", "layers",
            "attn_projection", "vocab_size", "n_classes",
        ],
    ),
    (
        "train",
        &["learning_rate", "batch_size", "epochs", "weight_decay", "warmup_fraction", "mask_rate"],
    ),
    ("data", &["split_ratio", "split_seed", "n_per_class"]),
    ("profile", &["seq_len", "groups", "repeats", "text"]),
];

fn known(key: &str) -> bool {
    SECTIONS.iter().any(|(_, keys)| keys.contains(&key))
}

macro_rules! flags {
    ($($(#[$m:meta])* $name:ident),* $(,)?) => {
        /// Flags shared by every command; each one overrides the config key
        /// of the same name.
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct Flags {
            /// Config file of `key = value` lines under `[section]` headers.
            #[arg(long, global = true)]
            pub config: Option<PathBuf>,
            /// Output directory.
            #[arg(long, global = true, default_value = "runs")]
            pub out: PathBuf,
            $(
                $(#[$m])*
                #[arg(long, global = true)]
                pub $name: Option<String>,
            )*
        }

        impl Flags {
            pub fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$name {
                        v.push((stringify!($name), x.as_str()));
                    }
                )*
                v
            }
        }
    };
}

flags! {
    /// `toy-languages`, `toy-binary_smell`, `toy-comments`, `toy-debt`, or
    /// `code_language`, `code_smell`, `code_comment`, `technical_debt` with --data.
    task,
    /// CSV or JSONL corpus.
    data,
    /// `csv` or `jsonl`; inferred from the extension when absent.
    format,
    /// Built-in template name or a pattern holding `[MASK]` and `{x}`.
    template,
    /// Inclusive encoder layer range `A..B`. Without --n-layers the encoder
    /// gets at least B layers.
    layers,
    max_len,
    /// Master seed; run i uses seed + i.
    seed,
    /// Number of seeded runs.
    seeds,
    variant,
    /// Comma-separated variants for `ablate`, `profile` and `time`.
    variants,
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    freeze_backbone,
    /// Vocabulary file to use instead of learning one.
    vocab,
    /// vocabulary size target when learning one
    vocab_size,
    checkpoint,
    /// Encoder checkpoint written by `pretrain`.
    pretrained,
    /// `tiny`, `desk` or `base` encoder shape.
    scale,
    d_model,
    n_layers,
    n_heads,
    d_ffn,
    dropout,
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    attn_projection,
    n_classes,
    learning_rate,
    batch_size,
    epochs,
    weight_decay,
    warmup_fraction,
    mask_rate,
    split_ratio,
    split_seed,
    /// Toy corpus size per class.
    n_per_class,
    seq_len,
    groups,
    repeats,
    /// Input snippet for `time`.
    text,
}

/// Raw merged settings before typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let ini = Ini::load_from_file(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (section, props) in &ini {
            if let Some(s) = section {
                if !SECTIONS.iter().any(|(name, _)| *name == s) {
                    return Err(usage(format!("{}: unknown section [{s}]", path.display())));
                }
            }
            for (k, v) in props.iter() {
                let key = k.replace('-', "_");
                if !known(&key) {
                    return Err(usage(format!("{}: unknown key `{k}`", path.display())));
                }
                values.insert(key, v.to_string());
            }
        }
        Ok(Self { values })
    }

    /// File values (if any) overridden by flags.
    pub fn merge(flags: &Flags) -> Result<Self> {
        let mut s = match &flags.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        for (k, v) in flags.pairs() {
            s.values.insert(k.to_string(), v.to_string());
        }
        Ok(s)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.trim()
                    .parse::<T>()
                    .map_err(|e| usage(format!("bad value `{v}` for {key}: {e}")))
            })
            .transpose()
    }

    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::new();
        for (section, keys) in SECTIONS {
            for k in *keys {
                if let Some(v) = self.values.get(*k) {
                    ini.with_section(Some(*section)).set(*k, v.as_str());
                }
            }
        }
        ini
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Toy(ToyTask),
    Real(TaskKind),
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().replace('-', "_");
        if let Some(rest) = norm.strip_prefix("toy_") {
            return rest.parse::<ToyTask>().map(Task::Toy).map_err(|e| e.to_string());
        }
        TaskKind::ALL
            .into_iter()
            .find(|k| task_kind_name(*k) == norm)
            .map(Task::Real)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

pub fn task_kind_name(k: TaskKind) -> &'static str {
    match k {
        TaskKind::CodeLanguage => "code_language",
        TaskKind::CodeSmell => "code_smell",
        TaskKind::CodeComment => "code_comment",
        TaskKind::TechnicalDebt => "technical_debt",
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Toy(t) => write!(f, "toy-{t}"),
            Task::Real(k) => f.write_str(task_kind_name(*k)),
        }
    }
}

impl Task {
    pub fn kind(self) -> TaskKind {
        match self {
            Task::Toy(t) => ToyRecipe::new(t).task_kind(),
            Task::Real(k) => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Tiny,
    Desk,
    Base,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "desk" => Ok(Scale::Desk),
            "base" => Ok(Scale::Base),
            _ => Err(format!("unknown scale `{s}` (tiny, desk, base)")),
        }
    }
}

impl Scale {
    fn encoder(self, vocab_size: usize) -> EncoderConfig {
        match self {
            Scale::Tiny => EncoderConfig::tiny(vocab_size),
            Scale::Desk => EncoderConfig::desk(vocab_size),
            Scale::Base => EncoderConfig {
                max_len: 256,
                vocab_size,
                ..EncoderConfig::base()
            },
        }
    }
}

fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<Variant>().map_err(|e| usage(e.to_string())))
        .collect()
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub settings: Settings,
    pub out: PathBuf,
    pub task: Option<Task>,
    pub data: Option<PathBuf>,
    pub format: Option<Format>,
    pub template: PromptTemplate,
    pub template_given: bool,
    /// Encoder shape; `vocab_size` is the learning target until a
    /// vocabulary is fixed.
    pub encoder: EncoderConfig,
    pub layers: LayerRange,
    pub attn_projection: bool,
    pub n_classes: Option<usize>,
    pub train: TrainConfig,
    pub variants: Option<Vec<Variant>>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub n_per_class: Option<usize>,
    pub seq_len: Option<usize>,
    pub groups: usize,
    pub repeats: usize,
    pub text: Option<String>,
}

impl RunConfig {
    /// `default_scale` applies when neither the settings nor a toy task
    /// pick one.
    pub fn resolve(flags: &Flags, default_scale: Scale) -> Result<Self> {
        let s = Settings::merge(flags)?;
        let task: Option<Task> = s.get("task")?;
        let recipe = match task {
            Some(Task::Toy(t)) => Some(ToyRecipe::new(t)),
            _ => None,
        };
        let scale = s.get::<Scale>("scale")?.unwrap_or(if recipe.is_some() {
            Scale::Tiny
        } else {
            default_scale
        });

        let vocab_size = s
            .get("vocab_size")?
            .unwrap_or(recipe.as_ref().map_or(2000, |r| r.vocab_size));
        let mut encoder = scale.encoder(vocab_size);
        if let Some(v) = s.get("d_model")? {
            encoder.d_model = v;
        }
        let explicit_layers: Option<LayerRange> = s.get("layers")?;
        match s.get("n_layers")? {
            Some(v) => encoder.n_layers = v,
            // an explicit range deepens the scale's default encoder
            None => {
                if let Some(r) = explicit_layers {
                    encoder.n_layers = encoder.n_layers.max(r.end);
                }
            }
        }
        if let Some(v) = s.get("n_heads")? {
            encoder.n_heads = v;
        }
        if let Some(v) = s.get("d_ffn")? {
            encoder.d_ffn = v;
        }
        if let Some(v) = s.get("dropout")? {
            encoder.dropout_rate = v;
        }
        if let Some(v) = s.get("max_len")? {
            encoder.max_len = v;
        }
        encoder.validate().map_err(|e| usage(e.to_string()))?;

        let layers = explicit_layers.unwrap_or_else(|| LayerRange::default_for(encoder.n_layers));
        if layers.end > encoder.n_layers {
            return Err(usage(format!(
                "layer range {layers} exceeds the encoder's {} layers",
                encoder.n_layers
            )));
        }

        let template_given = s.raw("template").is_some();
        let template = match s.raw("template") {
            Some(t) => PromptTemplate::resolve(t).map_err(|e| usage(e.to_string()))?,
            None => task.map_or_else(
                || TaskKind::CodeLanguage.default_template(),
                |t| t.kind().default_template(),
            ),
        };

        let base = recipe.as_ref().map_or_else(TrainConfig::default, |r| r.train.clone());
        let train = TrainConfig {
            learning_rate: s.get("learning_rate")?.unwrap_or(base.learning_rate),
            batch_size: s.get("batch_size")?.unwrap_or(base.batch_size),
            epochs: s.get("epochs")?.unwrap_or(base.epochs),
            seed: s.get("seed")?.unwrap_or(base.seed),
            weight_decay: s.get("weight_decay")?.unwrap_or(base.weight_decay),
            freeze_backbone: s.get("freeze_backbone")?.unwrap_or(base.freeze_backbone),
            variant: s.get("variant")?.unwrap_or(base.variant),
            n_seeds: s.get("seeds")?.unwrap_or(base.n_seeds),
            warmup_fraction: s.get("warmup_fraction")?.unwrap_or(base.warmup_fraction),
            mask_rate: s.get("mask_rate")?.unwrap_or(base.mask_rate),
        };
        train.validate().map_err(|e| usage(e.to_string()))?;

        let variants = s.raw("variants").map(parse_variants).transpose()?;
        let format = s
            .raw("format")
            .map(|f| f.parse::<Format>().map_err(|e| usage(e.to_string())))
            .transpose()?;
        let default_split = recipe.as_ref().map_or(7, |r| r.split_seed);

        Ok(Self {
            out: flags.out.clone(),
            task,
            data: s.get("data")?,
            format,
            template,
            template_given,
            encoder,
            layers,
            attn_projection: s.get("attn_projection")?.unwrap_or(false),
            n_classes: s.get("n_classes")?,
            train,
            variants,
            vocab: s.get("vocab")?,
            checkpoint: s.get("checkpoint")?,
            pretrained: s.get("pretrained")?,
            split_ratio: s.get("split_ratio")?.unwrap_or(0.8),
            split_seed: s.get("split_seed")?.unwrap_or(default_split),
            n_per_class: s.get("n_per_class")?,
            seq_len: s.get("seq_len")?,
            groups: s.get("groups")?.unwrap_or(10),
            repeats: s.get("repeats")?.unwrap_or(1000),
            text: s.get("text")?,
            settings: s,
        })
    }

    pub fn recipe(&self) -> Option<ToyRecipe> {
        match self.task {
            Some(Task::Toy(t)) => {
                let mut r = ToyRecipe::new(t);
                if let Some(n) = self.n_per_class {
                    r.n_per_class = n;
                }
                r.split_ratio = self.split_ratio;
                r.split_seed = self.split_seed;
                r.vocab_size = self.encoder.vocab_size;
                r.train = self.train.clone();
                Some(r)
            }
            _ => None,
        }
    }
}
