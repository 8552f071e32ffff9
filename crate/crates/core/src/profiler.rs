//! Parameter and multiply-accumulate accounting, and per-stage wall-clock
//! attribution.
//!
//! Counting conventions:
//! * token and position tables and the MLM head are not counted;
//! * one MAC per multiply-accumulate of a weight matrix, for every
//!   position (encoder) or timestep (recurrent stage) it is applied to;
//! * bias adds, attention score/value products and lookups cost nothing.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::aggregator::{
    attend, classify, extract_knowledge, forward_variant, recurrent_stage, HeadConfig, Variant,
    LSTM_LAYERS,
};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::{prepare_one, Model};
use crate::prompt::PromptTemplate;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub seq_len: usize,
    pub params: u64,
    pub macs: u64,
    pub params_millions: f64,
    pub macs_giga: f64,
    pub stages: Vec<StageCost>,
}

fn stage(name: &str, params: u64, macs: u64) -> StageCost {
    StageCost {
        stage: name.into(),
        params,
        macs,
    }
}

fn ledger(enc: &EncoderConfig, head: &HeadConfig, seq_len: usize) -> Vec<StageCost> {
    let d = enc.d_model as u64;
    let f = enc.d_ffn as u64;
    let l = enc.n_layers as u64;
    let n = seq_len as u64;
    let c = head.n_classes as u64;
    let k = head.layers.len() as u64;
    let w = head.pooled_width() as u64;
    let active = u64::from(seq_len > 0);

    let mut out = vec![
        stage("encoder.attention", l * 4 * (d * d + d), l * n * 4 * d * d),
        stage("encoder.ffn", l * (2 * d * f + f + d), l * n * 2 * d * f),
        stage("encoder.norm", l * 4 * d, 0),
    ];
    match head.variant {
        Variant::WithBilstm => {
            let h = d;
            let (mut p, mut m) = (0, 0);
            for layer in 0..LSTM_LAYERS {
                let input = if layer == 0 { d } else { 2 * h };
                p += 2 * (4 * h * input + 4 * h * h + 8 * h);
                m += 2 * (4 * h * input + 4 * h * h) * k;
            }
            out.push(stage("recurrent", p, m * active));
        }
        _ => out.push(stage("recurrent", 0, 0)),
    }
    if head.variant.uses_attention() {
        let (pp, pm) = if head.attn_projection {
            (w * w + w, k * w * w)
        } else {
            (0, 0)
        };
        out.push(stage("attention_pool", w + pp, (k * w + pm) * active));
    } else {
        out.push(stage("fc", d * d + d, d * d * active));
    }
    out.push(stage("classifier", c * w + c, c * w * active));
    out
}

fn report(enc: &EncoderConfig, head: &HeadConfig, seq_len: usize) -> CostReport {
    let stages = ledger(enc, head, seq_len);
    let params: u64 = stages.iter().map(|s| s.params).sum();
    let macs: u64 = stages.iter().map(|s| s.macs).sum();
    CostReport {
        variant: head.variant,
        seq_len,
        params,
        macs,
        params_millions: params as f64 / 1e6,
        macs_giga: macs as f64 / 1e9,
        stages,
    }
}

/// Parameter and MAC ledger at `seq_len` positions.
pub fn cost(enc: &EncoderConfig, head: &HeadConfig, seq_len: usize) -> Result<CostReport> {
    if seq_len > enc.max_len {
        return Err(Error::Config(format!(
            "sequence length {seq_len} exceeds max_len {}",
            enc.max_len
        )));
    }
    enc.validate()?;
    head.validate()?;
    Ok(report(enc, head, seq_len))
}

pub fn count_params(enc: &EncoderConfig, head: &HeadConfig) -> Result<u64> {
    Ok(cost(enc, head, 0)?.params)
}

pub fn count_macs(enc: &EncoderConfig, head: &HeadConfig, seq_len: usize) -> Result<u64> {
    Ok(cost(enc, head, seq_len)?.macs)
}

/// `(reference - this) / reference`.
pub fn reduction(reference: f64, this: f64) -> f64 {
    (reference - this) / reference
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub reference: CostReport,
    pub candidate: CostReport,
    pub param_reduction: f64,
    pub mac_reduction: f64,
}

pub fn compare(reference: CostReport, candidate: CostReport) -> CostComparison {
    CostComparison {
        param_reduction: reduction(reference.params as f64, candidate.params as f64),
        mac_reduction: reduction(reference.macs as f64, candidate.macs as f64),
        reference,
        candidate,
    }
}

pub fn format_costs(reports: &[CostReport], reference: Option<&CostReport>) -> String {
    let mut out = format!(
        "{:<24}  {:>13}  {:>18}  {:>12}  {:>12}\n",
        "variant", "Parameters(M)", "Comp Costs(GFLOPs)", "Reduced P %", "Reduced C %"
    );
    for r in reports {
        let (rp, rc) = match reference {
            Some(b) => (
                format!("{:.2}", 100.0 * reduction(b.params as f64, r.params as f64)),
                format!("{:.2}", 100.0 * reduction(b.macs as f64, r.macs as f64)),
            ),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            out,
            "{:<24}  {:>13.2}  {:>18.2}  {:>12}  {:>12}",
            r.variant.name(),
            r.params_millions,
            r.macs_giga,
            rp,
            rc
        );
    }
    out
}

pub const TIMED_STAGES: [&str; 4] = ["tokenize", "encode", "recurrent", "attend_classify"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub variant: Variant,
    pub groups: usize,
    pub repeats: usize,
    /// Mean seconds per forward pass, in [`TIMED_STAGES`] order.
    pub mean_seconds: [f64; 4],
    pub shares: [f64; 4],
    /// Per-group share of each stage.
    pub group_shares: Vec<[f64; 4]>,
    /// Coefficient of variation of each stage's share across groups.
    pub share_cv: [f64; 4],
}

fn shares(t: &[Duration; 4]) -> [f64; 4] {
    let total: f64 = t.iter().map(Duration::as_secs_f64).sum();
    let mut s = [0.0; 4];
    if total > 0.0 {
        for (o, d) in s.iter_mut().zip(t) {
            *o = d.as_secs_f64() / total;
        }
    }
    s
}

fn one_pass(
    model: &Model,
    v: &Vocabulary,
    template: &PromptTemplate,
    text: &str,
    t: &mut [Duration; 4],
) -> Result<()> {
    let head = &model.head;
    let variant = head.variant();
    let max_len = model.encoder.config().max_len;

    let start = Instant::now();
    let (ids, valid, mask) = prepare_one(v, template, variant, text, max_len)?;
    t[0] += start.elapsed();

    let start = Instant::now();
    let stack = encode(&model.encoder, &ids, valid)?;
    t[1] += start.elapsed();

    if variant.uses_attention() {
        let feats = extract_knowledge(&stack, mask, head.config().layers)?;
        let feats = if variant == Variant::WithBilstm {
            let start = Instant::now();
            let r = recurrent_stage(head, &feats)?;
            t[2] += start.elapsed();
            r
        } else {
            feats
        };
        let start = Instant::now();
        let a = attend(head, &feats)?;
        std::hint::black_box(classify(head, &a.pooled)?);
        t[3] += start.elapsed();
    } else {
        let start = Instant::now();
        std::hint::black_box(forward_variant(head, &stack, mask)?);
        t[3] += start.elapsed();
    }
    Ok(())
}

/// Runs `groups` x `repeats` single-threaded forward passes after a
/// warmup and attributes wall-clock time to each stage.
pub fn time_breakdown(
    model: &Model,
    v: &Vocabulary,
    template: &PromptTemplate,
    text: &str,
    groups: usize,
    repeats: usize,
) -> Result<TimingReport> {
    if groups == 0 || repeats == 0 {
        return Err(Error::Config("groups and repeats must be at least 1".into()));
    }
    let mut scratch = [Duration::ZERO; 4];
    for _ in 0..repeats.min(10) {
        one_pass(model, v, template, text, &mut scratch)?;
    }
    let mut total = [Duration::ZERO; 4];
    let mut group_shares = Vec::with_capacity(groups);
    for _ in 0..groups {
        let mut t = [Duration::ZERO; 4];
        for _ in 0..repeats {
            one_pass(model, v, template, text, &mut t)?;
        }
        let sum: Duration = t.iter().sum();
        if sum.is_zero() {
            return Err(Error::TimerResolution(format!(
                "a group of {repeats} repeats measured zero time; increase repeats"
            )));
        }
        group_shares.push(shares(&t));
        for (a, b) in total.iter_mut().zip(t) {
            *a += b;
        }
    }
    let n = (groups * repeats) as f64;
    let mut share_cv = [0.0; 4];
    for (s, cv) in share_cv.iter_mut().enumerate() {
        let vals: Vec<f64> = group_shares.iter().map(|g| g[s]).collect();
        let mean = vals.iter().sum::<f64>() / groups as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / groups as f64;
        *cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    }
    Ok(TimingReport {
        variant: model.head.variant(),
        groups,
        repeats,
        mean_seconds: total.map(|d| d.as_secs_f64() / n),
        shares: shares(&total),
        group_shares,
        share_cv,
    })
}

pub fn format_timing(r: &TimingReport) -> String {
    let mut out = format!(
        "variant {}  ({} groups x {} repeats)\n{:<16}  {:>12}  {:>8}\n",
        r.variant, r.groups, r.repeats, "stage", "mean (ms)", "share"
    );
    for (i, name) in TIMED_STAGES.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<16}  {:>12.4}  {:>7.2}%",
            name,
            1e3 * r.mean_seconds[i],
            100.0 * r.shares[i]
        );
    }
    out
}
