//! Gradient computation, AdamW, classifier fine-tuning and MLM
//! pretraining.
//!
//! Every example in a batch gets its own tape and runs on the rayon pool.
//! Per-example gradients are summed in batch order, so results do not
//! depend on the thread count.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{predict, Variant};
use crate::autograd::Graph;
use crate::encoder::{encode, mlm_logits, Dropout, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{score, MetricsReport};
use crate::model::{Model, PreparedExample};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, Vocabulary, MASK_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub freeze_backbone: bool,
    pub variant: Variant,
    pub n_seeds: usize,
    pub warmup_fraction: f64,
    pub mask_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            weight_decay: 0.01,
            freeze_backbone: false,
            variant: Variant::Full,
            n_seeds: 5,
            warmup_fraction: 0.1,
            mask_rate: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // learning_rate 0 is allowed as a no-op run
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup fraction outside [0, 1]".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config("mask rate outside (0, 1]".into()));
        }
        Ok(())
    }

    /// Linear warmup to the base rate, then constant.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = ((total_steps as f64 * self.warmup_fraction).ceil() as usize).max(1);
        if step < warmup {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        } else {
            self.learning_rate
        }
    }
}

/// SplitMix64 over a tuple of integers.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// One gradient per tensor; `None` means zero.
pub type Grads = Vec<Option<Tensor>>;

fn add_grads(acc: &mut Grads, g: Grads) {
    for (a, b) in acc.iter_mut().zip(g) {
        match (a.as_mut(), b) {
            (Some(x), Some(y)) => x.add_assign(&y),
            (None, Some(y)) => *a = Some(y),
            _ => {}
        }
    }
}

fn check_finite(grads: &Grads, names: &[String]) -> Result<()> {
    for (g, n) in grads.iter().zip(names) {
        if let Some(t) = g {
            if !t.is_finite() {
                return Err(Error::NonFiniteGradient(n.clone()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: Grads,
    pub head: Grads,
}

impl ModelGrads {
    /// Gradient for the tensor of that name, zeros when unused.
    pub fn named(&self, model: &Model, name: &str) -> Option<Tensor> {
        let find = |store: &ParamStore, grads: &Grads| {
            store.find(name).map(|id| {
                grads[id.index()]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).rows(), store.get(id).cols()))
            })
        };
        find(model.encoder.store(), &self.encoder).or_else(|| find(model.head.store(), &self.head))
    }
}

struct ExampleResult {
    loss: f64,
    predicted: usize,
    grads: ModelGrads,
}

fn example_grads(
    model: &Model,
    ex: &PreparedExample,
    dropout_seed: Option<u64>,
    frozen: bool,
) -> Result<ExampleResult> {
    let mut g = Graph::new();
    let evars = model.encoder.store().bind(&mut g);
    let hvars = model.head.store().bind(&mut g);
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut dropout = rng.as_mut().map(|rng| Dropout {
        rate: model.encoder.config().dropout_rate,
        rng,
    });
    let out = model.forward_graph(&mut g, &evars, &hvars, ex, dropout.as_mut(), frozen)?;
    let predicted = predict(g.value(out.logits).data());
    let loss = g.cross_entropy(out.logits, &[ex.label]);
    let loss_value = g.value(loss).get(0, 0);
    let mut grads = g.backward(loss);
    let encoder = if frozen {
        vec![None; evars.vars().len()]
    } else {
        evars.vars().iter().map(|&v| grads.take(v)).collect()
    };
    let head = hvars.vars().iter().map(|&v| grads.take(v)).collect();
    Ok(ExampleResult {
        loss: loss_value,
        predicted,
        grads: ModelGrads { encoder, head },
    })
}

fn check_labels(model: &Model, examples: &[PreparedExample]) -> Result<()> {
    let c = model.head.n_classes();
    match examples.iter().find(|e| e.label >= c) {
        Some(e) => Err(Error::LabelOutOfRange {
            example: e.id.clone(),
            label: e.label,
            n_classes: c,
        }),
        None => Ok(()),
    }
}

struct BatchResult {
    loss_sum: f64,
    predicted: Vec<usize>,
    grads: ModelGrads,
}

fn batch_grads(
    model: &Model,
    batch: &[&PreparedExample],
    seeds: Option<&[u64]>,
    frozen: bool,
) -> Result<BatchResult> {
    let results: Vec<Result<ExampleResult>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| example_grads(model, ex, seeds.map(|s| s[i]), frozen))
        .collect();
    let mut acc = ModelGrads {
        encoder: vec![None; model.encoder.store().len()],
        head: vec![None; model.head.store().len()],
    };
    let mut loss_sum = 0.0;
    let mut predicted = Vec::with_capacity(batch.len());
    for r in results {
        let r = r?;
        loss_sum += r.loss;
        predicted.push(r.predicted);
        add_grads(&mut acc.encoder, r.grads.encoder);
        add_grads(&mut acc.head, r.grads.head);
    }
    let scale = 1.0 / batch.len() as f64;
    for t in acc.encoder.iter_mut().chain(acc.head.iter_mut()).flatten() {
        t.scale_assign(scale);
    }
    check_finite(&acc.encoder, model.encoder.store().names())?;
    check_finite(&acc.head, model.head.store().names())?;
    Ok(BatchResult {
        loss_sum,
        predicted,
        grads: acc,
    })
}

/// Mean cross-entropy over `examples` and its exact gradient, in
/// evaluation mode.
pub fn grad(model: &Model, examples: &[PreparedExample]) -> Result<(f64, ModelGrads)> {
    if examples.is_empty() {
        return Err(Error::Data("gradient of an empty batch".into()));
    }
    check_labels(model, examples)?;
    let refs: Vec<&PreparedExample> = examples.iter().collect();
    let r = batch_grads(model, &refs, None, false)?;
    Ok((r.loss_sum / examples.len() as f64, r.grads))
}

/// Mean evaluation-mode cross-entropy.
pub fn loss(model: &Model, examples: &[PreparedExample]) -> Result<f64> {
    Ok(evaluate(model, examples)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub gold: Vec<usize>,
    pub predicted: Vec<usize>,
    pub report: MetricsReport,
}

pub fn evaluate(model: &Model, examples: &[PreparedExample]) -> Result<Evaluation> {
    check_labels(model, examples)?;
    let outs: Vec<Result<(f64, usize)>> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new();
            let evars = model.encoder.store().bind(&mut g);
            let hvars = model.head.store().bind(&mut g);
            let out = model.forward_graph(&mut g, &evars, &hvars, ex, None, false)?;
            let p = predict(g.value(out.logits).data());
            let l = g.cross_entropy(out.logits, &[ex.label]);
            Ok((g.value(l).get(0, 0), p))
        })
        .collect();
    let mut total = 0.0;
    let mut predicted = Vec::with_capacity(examples.len());
    for o in outs {
        let (l, p) = o?;
        total += l;
        predicted.push(p);
    }
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let report = score(&gold, &predicted, model.head.n_classes())?;
    Ok(Evaluation {
        loss: if examples.is_empty() {
            0.0
        } else {
            total / examples.len() as f64
        },
        gold,
        predicted,
        report,
    })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: store.zeros_like(),
            v: store.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.as_ref().map_or(0.0, |g| g.data()[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + self.eps);
                pd[i] -= lr * (update + self.weight_decay * pd[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
}

impl HistoryRecord {
    fn new(epoch: usize, split: &str, loss: f64, r: &MetricsReport) -> Self {
        Self {
            epoch,
            split: split.into(),
            loss,
            accuracy: r.accuracy,
            macro_p: r.macro_p,
            macro_r: r.macro_r,
            macro_f1: r.macro_f1,
        }
    }
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Joint fine-tuning of encoder and head (head only with
/// `freeze_backbone`). Records one `train` row per epoch and, when an
/// evaluation split is given, one `eval` row.
pub fn train_classifier(
    model: &mut Model,
    train: &[PreparedExample],
    eval: Option<&[PreparedExample]>,
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRecord>> {
    cfg.validate()?;
    if model.head.variant() != cfg.variant {
        return Err(Error::Config(format!(
            "head is {} but config asks for {}",
            model.head.variant(),
            cfg.variant
        )));
    }
    check_labels(model, train)?;
    if let Some(e) = eval {
        check_labels(model, e)?;
    }
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut enc_opt = AdamW::new(model.encoder.store(), cfg.weight_decay);
    let mut head_opt = AdamW::new(model.head.store(), cfg.weight_decay);
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64])));
        let mut loss_sum = 0.0;
        let mut gold = Vec::with_capacity(train.len());
        let mut pred = Vec::with_capacity(train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|i| mix_seed(&[cfg.seed, epoch as u64, step as u64, i as u64]))
                .collect();
            let r = batch_grads(model, &batch, Some(&seeds), cfg.freeze_backbone)?;
            let lr = cfg.learning_rate_at(step, total_steps);
            if !cfg.freeze_backbone {
                enc_opt.step(model.encoder.store_mut(), &r.grads.encoder, lr);
            }
            head_opt.step(model.head.store_mut(), &r.grads.head, lr);
            loss_sum += r.loss_sum;
            gold.extend(batch.iter().map(|e| e.label));
            pred.extend(r.predicted);
            step += 1;
        }
        let report = score(&gold, &pred, model.head.n_classes())?;
        history.push(HistoryRecord::new(
            epoch,
            "train",
            loss_sum / train.len() as f64,
            &report,
        ));
        if let Some(e) = eval {
            let ev = evaluate(model, e)?;
            history.push(HistoryRecord::new(epoch, "eval", ev.loss, &ev.report));
        }
    }
    Ok(history)
}

/// A padded sequence for pretraining.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<TokenId>,
    pub valid_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Sequences passed over because nothing in them could be masked.
    pub skipped: usize,
    pub steps: usize,
}

/// Picks `max(1, round(rate * n))` maskable positions, where maskable
/// means inside the valid length and not a special token.
pub fn choose_masked(seq: &Sequence, rate: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let candidates: Vec<usize> = (0..seq.valid_length)
        .filter(|&i| !Vocabulary::is_special(seq.ids[i]))
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let k = ((candidates.len() as f64 * rate).round() as usize).clamp(1, candidates.len());
    let mut picked: Vec<usize> = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn mlm_example_grads(
    encoder: &EncoderParams,
    seq: &Sequence,
    positions: &[usize],
    dropout_seed: u64,
) -> Result<(f64, Grads)> {
    let mut masked = seq.ids.clone();
    for &p in positions {
        masked[p] = MASK_ID;
    }
    let targets: Vec<usize> = positions.iter().map(|&p| seq.ids[p] as usize).collect();
    let mut g = Graph::new();
    let vars = encoder.store().bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut dropout = Dropout {
        rate: encoder.config().dropout_rate,
        rng: &mut rng,
    };
    let states = encoder.forward_graph(&mut g, &vars, &masked, seq.valid_length, Some(&mut dropout))?;
    let top = g.select_rows(*states.last().unwrap(), positions);
    let logits = encoder.mlm_graph(&mut g, &vars, top);
    let loss = g.cross_entropy(logits, &targets);
    let value = g.value(loss).get(0, 0);
    let mut grads = g.backward(loss);
    Ok((value, vars.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Masked-token pretraining of the encoder.
pub fn pretrain_mlm(
    encoder: &mut EncoderParams,
    corpus: &[Sequence],
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(encoder.store(), cfg.weight_decay);
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        skipped: 0,
        steps: 0,
    };
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64])));
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let step = report.steps as u64;
            let jobs: Vec<(usize, Vec<usize>)> = chunk
                .iter()
                .enumerate()
                .filter_map(|(i, &ci)| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, step, i as u64, 1]));
                    let pos = choose_masked(&corpus[ci], cfg.mask_rate, &mut rng);
                    (!pos.is_empty()).then_some((ci, pos))
                })
                .collect();
            report.skipped += chunk.len() - jobs.len();
            if jobs.is_empty() {
                continue;
            }
            let results: Vec<Result<(f64, Grads)>> = jobs
                .par_iter()
                .enumerate()
                .map(|(i, (ci, pos))| {
                    mlm_example_grads(
                        encoder,
                        &corpus[*ci],
                        pos,
                        mix_seed(&[cfg.seed, epoch as u64, step, i as u64, 2]),
                    )
                })
                .collect();
            let mut acc: Grads = vec![None; encoder.store().len()];
            for r in results {
                let (l, g) = r?;
                loss_sum += l;
                add_grads(&mut acc, g);
            }
            counted += jobs.len();
            for t in acc.iter_mut().flatten() {
                t.scale_assign(1.0 / jobs.len() as f64);
            }
            check_finite(&acc, encoder.store().names())?;
            let lr = cfg.learning_rate_at(report.steps, total_steps);
            opt.step(encoder.store_mut(), &acc, lr);
            report.steps += 1;
        }
        report
            .epoch_losses
            .push(if counted == 0 { 0.0 } else { loss_sum / counted as f64 });
    }
    Ok(report)
}

/// Fraction of masked positions whose original token is the argmax of
/// the MLM logits, with masks drawn from `seed`.
pub fn mlm_accuracy(encoder: &EncoderParams, corpus: &[Sequence], rate: f64, seed: u64) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, seq) in corpus.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
        let pos = choose_masked(seq, rate, &mut rng);
        let mut masked = seq.ids.clone();
        for &p in &pos {
            masked[p] = MASK_ID;
        }
        let stack = encode(encoder, &masked, seq.valid_length)?;
        let logits = mlm_logits(encoder, &stack)?;
        for &p in &pos {
            total += 1;
            if predict(logits.row(p)) == seq.ids[p] as usize {
                hit += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
