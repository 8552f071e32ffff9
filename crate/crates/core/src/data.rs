//! Labeled corpora: loading, saving, stratified splits, length statistics
//! and synthetic toy corpora.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            _ => Err(Error::Config(format!("unknown data format `{s}` (csv|jsonl)"))),
        }
    }
}

/// Label names in id order. Identity when the source labels were already
/// non-negative integers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn to_json(&self) -> BTreeMap<String, usize> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(&fs::read_to_string(path)?)?;
        let mut names = vec![None; map.len()];
        for (name, id) in map {
            match names.get_mut(id) {
                Some(slot @ None) => *slot = Some(name),
                _ => {
                    return Err(Error::Data(format!(
                        "label map ids must be dense and unique; bad id {id}"
                    )))
                }
            }
        }
        Ok(Self {
            names: names.into_iter().map(|n| n.unwrap()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub examples: Vec<LabeledExample>,
    pub labels: LabelMap,
}

impl LabeledDataset {
    pub fn n_classes(&self) -> usize {
        self.labels
            .len()
            .max(self.examples.iter().map(|e| e.label + 1).max().unwrap_or(0))
    }
}

struct RawRow {
    id: Option<String>,
    text: String,
    label: String,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_csv(path: &Path) -> Result<Vec<RawRow>> {
    let mut rdr = csv::ReaderBuilder::new().from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(ti), Some(li)) = (col("text"), col("label")) else {
        return Err(parse_err(path, 1, "header must contain `text` and `label` columns"));
    };
    let ii = col("id");
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize, name: &str| {
            rec.get(i)
                .map(str::to_string)
                .ok_or_else(|| parse_err(path, line, format!("missing `{name}` field")))
        };
        rows.push(RawRow {
            id: ii.map(|i| field(i, "id")).transpose()?,
            text: field(ti, "text")?,
            label: field(li, "label")?,
        });
    }
    Ok(rows)
}

fn read_jsonl(path: &Path) -> Result<Vec<RawRow>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        let obj = v
            .as_object()
            .ok_or_else(|| parse_err(path, n, "expected a JSON object"))?;
        let text = match obj.get("text") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(_) => return Err(parse_err(path, n, "`text` must be a string")),
            None => return Err(parse_err(path, n, "missing `text` field")),
        };
        let label = match obj.get("label") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(x)) => x.to_string(),
            Some(_) => return Err(parse_err(path, n, "`label` must be a string or number")),
            None => return Err(parse_err(path, n, "missing `label` field")),
        };
        let id = match obj.get("id") {
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(serde_json::Value::Number(x)) => Some(x.to_string()),
            _ => None,
        };
        rows.push(RawRow { id, text, label });
    }
    Ok(rows)
}

/// Reads a CSV (`text,label` header, optional `id`) or JSONL file.
///
/// Integer labels pass through unchanged. Any other label set is mapped
/// to dense ids in order of first appearance.
pub fn load_dataset(path: &Path, format: Format) -> Result<LabeledDataset> {
    let rows = match format {
        Format::Csv => read_csv(path)?,
        Format::Jsonl => read_jsonl(path)?,
    };
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let numeric: Option<Vec<usize>> = rows.iter().map(|r| r.label.trim().parse().ok()).collect();
    let (labels, map) = match numeric {
        Some(ids) => {
            let n = ids.iter().max().map_or(0, |m| m + 1);
            let names = (0..n).map(|i| i.to_string()).collect();
            (ids, LabelMap { names })
        }
        None => {
            let mut names: Vec<String> = Vec::new();
            let mut index: HashMap<String, usize> = HashMap::new();
            let ids = rows
                .iter()
                .map(|r| {
                    *index.entry(r.label.clone()).or_insert_with(|| {
                        names.push(r.label.clone());
                        names.len() - 1
                    })
                })
                .collect();
            (ids, LabelMap { names })
        }
    };
    let examples = rows
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (r, label))| LabeledExample {
            id: r.id.unwrap_or_else(|| i.to_string()),
            text: r.text,
            label,
        })
        .collect();
    Ok(LabeledDataset {
        examples,
        labels: map,
    })
}

/// Writes examples with integer labels so that a reload is the identity.
pub fn save_dataset(path: &Path, format: Format, examples: &[LabeledExample]) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["text", "label", "id"])?;
            for e in examples {
                w.write_record([e.text.as_str(), &e.label.to_string(), e.id.as_str()])?;
            }
            w.flush()?;
        }
        Format::Jsonl => {
            let mut out = String::new();
            for e in examples {
                out.push_str(&serde_json::to_string(e)?);
                out.push('\n');
            }
            fs::write(path, out)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn new(seed: u64, ratio: f64, train: &[LabeledExample], test: &[LabeledExample]) -> Self {
        Self {
            seed,
            ratio,
            train: train.iter().map(|e| e.id.clone()).collect(),
            test: test.iter().map(|e| e.id.clone()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Per-class shuffle and cut at `round(count * ratio)`. Both halves keep
/// the input order.
pub fn stratified_split(
    data: &[LabeledExample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    if data.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let n_classes = data.iter().map(|e| e.label).max().unwrap() + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, e) in data.iter().enumerate() {
        by_class[e.label].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {c} has no examples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; data.len()];
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        let cut = (idx.len() as f64 * ratio).round() as usize;
        for &i in &idx[..cut] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = data
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(e, _)| e).collect(),
        test.into_iter().map(|(e, _)| e).collect(),
    ))
}

pub const LENGTH_THRESHOLDS: [usize; 5] = [32, 64, 128, 256, 300];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub unit: String,
    pub mean: f64,
    /// Most frequent length, smallest on ties.
    pub mode: usize,
    /// Lower median.
    pub median: usize,
    /// `(threshold, fraction of examples shorter than it)`.
    pub below: Vec<(usize, f64)>,
}

impl LengthStats {
    pub fn of(unit: &str, lengths: &[usize]) -> Self {
        let n = lengths.len();
        if n == 0 {
            return Self {
                unit: unit.into(),
                mean: 0.0,
                mode: 0,
                median: 0,
                below: LENGTH_THRESHOLDS.iter().map(|&t| (t, 0.0)).collect(),
            };
        }
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in lengths {
            *counts.entry(l).or_default() += 1;
        }
        let top = counts.values().copied().max().unwrap();
        let mode = counts.iter().find(|(_, &c)| c == top).map(|(&l, _)| l).unwrap();
        Self {
            unit: unit.into(),
            mean: lengths.iter().sum::<usize>() as f64 / n as f64,
            mode,
            median: sorted[(n - 1) / 2],
            below: LENGTH_THRESHOLDS
                .iter()
                .map(|&t| (t, sorted.partition_point(|&l| l < t) as f64 / n as f64))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_examples: usize,
    pub class_counts: Vec<usize>,
    pub tokens: LengthStats,
    pub words: LengthStats,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "examples     {}", self.n_examples)?;
        writeln!(f, "class counts {:?}", self.class_counts)?;
        for s in [&self.tokens, &self.words] {
            write!(
                f,
                "{:<12} mean {:.2}  mode {}  median {}",
                s.unit, s.mean, s.mode, s.median
            )?;
            for (t, frac) in &s.below {
                write!(f, "  <{t}: {:.2}%", 100.0 * frac)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn compute_stats(data: &[LabeledExample], v: &Vocabulary) -> DatasetStats {
    let n_classes = data.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let mut class_counts = vec![0; n_classes];
    for e in data {
        class_counts[e.label] += 1;
    }
    let tokens: Vec<usize> = data.iter().map(|e| v.tokenize(&e.text).len()).collect();
    let words: Vec<usize> = data
        .iter()
        .map(|e| e.text.split_whitespace().count())
        .collect();
    DatasetStats {
        n_examples: data.len(),
        class_counts,
        tokens: LengthStats::of("tokens", &tokens),
        words: LengthStats::of("words", &words),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    Languages,
    BinarySmell,
    Comments,
    Debt,
}

impl ToyTask {
    pub const ALL: [ToyTask; 4] = [
        ToyTask::Languages,
        ToyTask::BinarySmell,
        ToyTask::Comments,
        ToyTask::Debt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToyTask::Languages => "languages",
            ToyTask::BinarySmell => "binary_smell",
            ToyTask::Comments => "comments",
            ToyTask::Debt => "debt",
        }
    }

    pub fn n_classes(self) -> usize {
        self.keywords().len()
    }

    fn keywords(self) -> &'static [&'static [&'static str]] {
        match self {
            ToyTask::Languages => &[
                &["def", "self", "elif", "None", "import", "lambda", ":", "yield"],
                &["int", "void", "printf", ";", "{", "}", "malloc", "struct"],
                &["defun", "let", "car", "cdr", "(", ")", "setq", "cons"],
                &["echo", "fi", "then", "done", "$", "grep", "export", "esac"],
            ],
            ToyTask::BinarySmell => &[
                &["return", "final", "get", "set", "const", "name"],
                &["temp", "flag", "goto", "tmp2", "switch", "global"],
            ],
            ToyTask::Comments => &[
                &["Returns", "the", "value", "of", "given", "computed"],
                &["Usage", "call", "example", "pass", "argument", "before"],
                &["Deprecated", "use", "instead", "removed", "since", "version"],
            ],
            ToyTask::Debt => &[
                &["initializes", "buffer", "loads", "reads", "config", "stores"],
                &["TODO", "FIXME", "hack", "workaround", "ugly", "temporary"],
            ],
        }
    }
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToyTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown toy task `{s}`")))
    }
}

const SHARED_WORDS: [&str; 10] = [
    "x", "y", "count", "data", "foo", "value", "i", "=", "+", "result",
];

pub const TOY_NOISE_RATE: f64 = 0.05;
const MIN_OWN_KEYWORDS: usize = 3;

/// Synthetic snippets whose class is carried by a disjoint keyword set.
/// Every snippet holds at least three keywords of its class before noise;
/// each word is then swapped for another class's keyword with
/// probability [`TOY_NOISE_RATE`].
pub fn make_toy_corpus(task: ToyTask, n_per_class: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if n_per_class < 10 {
        return Err(Error::Config(format!(
            "toy corpus needs n_per_class >= 10, got {n_per_class}"
        )));
    }
    let kw = task.keywords();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(kw.len() * n_per_class);
    for (label, own) in kw.iter().enumerate() {
        for _ in 0..n_per_class {
            let n_words = rng.random_range(6..=14);
            let mut words: Vec<&str> = (0..n_words)
                .map(|i| {
                    if i < MIN_OWN_KEYWORDS || rng.random::<f64>() < 0.5 {
                        own[rng.random_range(0..own.len())]
                    } else {
                        SHARED_WORDS[rng.random_range(0..SHARED_WORDS.len())]
                    }
                })
                .collect();
            words.shuffle(&mut rng);
            for w in &mut words {
                if rng.random::<f64>() < TOY_NOISE_RATE {
                    let other = (label + rng.random_range(1..kw.len())) % kw.len();
                    *w = kw[other][rng.random_range(0..kw[other].len())];
                }
            }
            out.push((label, words.join(" ")));
        }
    }
    out.shuffle(&mut rng);
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, (label, text))| LabeledExample {
            id: format!("{}-{i}", task.name()),
            text,
            label,
        })
        .collect())
}
