use std::fmt::Write as _;

use anyhow::{Context, Result};
use promptclass::checkpoint::{load, load_model, save_encoder, save_model};
use promptclass::data::compute_stats;
use promptclass::experiment::{
    ablate, attention_report, format_table, mean_alphas, run_seeds, sweep_layers, table_rows,
    ExperimentSpec, ResultRow,
};
use promptclass::metrics::paired_t_test;
use promptclass::model::prepare;
use promptclass::profiler::{compare, cost, format_costs, format_timing, time_breakdown};
use promptclass::tokenizer::{pad_or_truncate, train_vocab};
use promptclass::training::{evaluate, mlm_accuracy, pretrain_mlm, write_history, Sequence};
use promptclass::{EncoderConfig, EncoderParams, HeadConfig, Model, Variant, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{usage, RunConfig, Scale};
use crate::setup::{
    checkpoint_metadata, load_corpus, template_from_metadata, vocab_from_metadata, vocabulary,
    write_json, Corpus, RunDir,
};
use crate::Command;

const ABLATION_VARIANTS: [Variant; 3] = [
    Variant::Full,
    Variant::NoAttention,
    Variant::NoAttentionNoPrompt,
];

pub fn run(cmd: &Command, flags: &crate::config::Flags) -> Result<()> {
    let default_scale = match cmd {
        Command::Profile => Scale::Base,
        Command::Time => Scale::Tiny,
        _ => Scale::Desk,
    };
    let cfg = RunConfig::resolve(flags, default_scale)?;
    let dir = RunDir::open(&cfg.out)?;
    dir.write_config(&cfg)?;
    match cmd {
        Command::Vocab => vocab_cmd(&cfg, &dir),
        Command::Stats => stats_cmd(&cfg, &dir),
        Command::Pretrain => pretrain_cmd(&cfg, &dir),
        Command::Train => train_cmd(&cfg, &dir),
        Command::Eval => eval_cmd(&cfg, &dir),
        Command::Ablate => ablate_cmd(&cfg, &dir),
        Command::SweepLayers => sweep_cmd(&cfg, &dir),
        Command::AttentionReport => attention_cmd(&cfg, &dir),
        Command::Profile => profile_cmd(&cfg, &dir),
        Command::Time => time_cmd(&cfg, &dir),
    }
}

fn vocab_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let texts: Vec<&str> = corpus.train.iter().map(|e| e.text.as_str()).collect();
    let v = train_vocab(&texts, cfg.encoder.vocab_size)?;
    v.save(&dir.join("vocab.txt"))?;
    dir.write_json(
        "vocab.json",
        &json!({"size": v.size(), "target": cfg.encoder.vocab_size, "texts": texts.len()}),
    )?;
    println!("vocabulary of {} tokens (target {}) from {} texts", v.size(), cfg.encoder.vocab_size, texts.len());
    Ok(())
}

fn stats_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let v = vocabulary(cfg, &corpus)?;
    let all = compute_stats(&corpus.all(), &v);
    let train = compute_stats(&corpus.train, &v);
    let test = compute_stats(&corpus.test, &v);
    dir.write_json("stats.json", &json!({"all": all, "train": train, "test": test}))?;
    print!("{all}");
    println!("split        train {:?}  test {:?}", train.class_counts, test.class_counts);
    Ok(())
}

fn encoder_config(cfg: &RunConfig, vocab: &Vocabulary) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.size(),
        ..cfg.encoder.clone()
    }
}

fn pretrain_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let v = vocabulary(cfg, &corpus)?;
    let enc_cfg = encoder_config(cfg, &v);
    let seqs = corpus
        .train
        .iter()
        .map(|e| {
            let (ids, valid_length) = pad_or_truncate(&v.encode_sequence(&e.text), enc_cfg.max_len)?;
            Ok(Sequence { ids, valid_length })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut enc = EncoderParams::init(enc_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let before = mlm_accuracy(&enc, &seqs, cfg.train.mask_rate, cfg.train.seed)?;
    let report = pretrain_mlm(&mut enc, &seqs, &cfg.train)?;
    let after = mlm_accuracy(&enc, &seqs, cfg.train.mask_rate, cfg.train.seed)?;
    save_encoder(
        &dir.join("encoder.ckpt"),
        &enc,
        checkpoint_metadata(cfg, &v, corpus.labels.as_ref(), cfg.train.seed),
    )?;
    v.save(&dir.join("vocab.txt"))?;
    dir.write_json(
        "pretrain.json",
        &json!({"report": report, "mlm_accuracy_before": before, "mlm_accuracy_after": after}),
    )?;
    println!("{:<8}  {:>10}", "epoch", "mlm loss");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("{:<8}  {:>10.4}", i + 1, l);
    }
    println!(
        "steps {}  skipped {}  masked-token accuracy {:.2}% -> {:.2}%",
        report.steps,
        report.skipped,
        100.0 * before,
        100.0 * after
    );
    Ok(())
}

/// Vocabulary and optional pretrained encoder; a pretrained checkpoint
/// brings its own vocabulary.
fn backbone(cfg: &RunConfig, corpus: &Corpus) -> Result<(Vocabulary, Option<EncoderParams>)> {
    match &cfg.pretrained {
        Some(p) => {
            let (enc, _, meta) = load(p)?;
            let v = vocab_from_metadata(&meta)?;
            Ok((v, Some(enc)))
        }
        None => Ok((vocabulary(cfg, corpus)?, None)),
    }
}

fn spec(cfg: &RunConfig, corpus: &Corpus, v: &Vocabulary, pretrained: Option<&EncoderParams>) -> ExperimentSpec {
    ExperimentSpec {
        encoder: pretrained.map_or_else(|| encoder_config(cfg, v), |p| p.config().clone()),
        layers: cfg.layers,
        attn_projection: cfg.attn_projection,
        template: cfg.template.clone(),
        n_classes: corpus.n_classes,
        train: cfg.train.clone(),
    }
}

fn write_inputs(dir: &RunDir, corpus: &Corpus, v: &Vocabulary) -> Result<()> {
    v.save(&dir.join("vocab.txt"))?;
    corpus.split.save(&dir.join("split.json"))?;
    if let Some(l) = &corpus.labels {
        l.save(&dir.join("label_map.json"))?;
    }
    Ok(())
}

fn train_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (v, pretrained) = backbone(cfg, &corpus)?;
    let spec = spec(cfg, &corpus, &v, pretrained.as_ref());
    write_inputs(dir, &corpus, &v)?;
    let runs = run_seeds(&spec, &v, &corpus.train, &corpus.test, pretrained.as_ref())?;
    for r in &runs {
        let sub = dir.subdir(&format!("seed-{}", r.seed))?;
        save_model(
            &sub.join("model.ckpt"),
            &r.model,
            checkpoint_metadata(cfg, &v, corpus.labels.as_ref(), r.seed),
        )?;
        write_history(&sub.join("history.csv"), &r.history)?;
        write_json(&sub.join("metrics.json"), &r.test)?;
    }
    let row = ResultRow::from_runs(spec.train.variant, spec.layers, &runs)?;
    dir.write_json("report.json", &row)?;
    let table = format_table(&table_rows(std::slice::from_ref(&row), false));
    dir.write_text("report.txt", &table)?;
    for r in &runs {
        println!(
            "seed {:<6} accuracy {:.2}%  macro-F1 {:.2}%",
            r.seed,
            100.0 * r.test.accuracy,
            100.0 * r.test.macro_f1
        );
    }
    print!("{table}");
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(Model, serde_json::Value)> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("this command needs --checkpoint"))?;
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn checkpoint_inputs(cfg: &RunConfig) -> Result<(Model, Vocabulary, Vec<promptclass::PreparedExample>)> {
    let (model, meta) = load_checkpoint(cfg)?;
    let v = vocab_from_metadata(&meta)?;
    let template = if cfg.template_given {
        cfg.template.clone()
    } else {
        template_from_metadata(&meta)?
    };
    let corpus = load_corpus(cfg)?;
    let examples = prepare(
        &v,
        &template,
        model.head.variant(),
        &corpus.test,
        model.encoder.config().max_len,
    )?;
    Ok((model, v, examples))
}

fn eval_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let (model, _, examples) = checkpoint_inputs(cfg)?;
    let ev = evaluate(&model, &examples)?;
    dir.write_json("metrics.json", &json!({"loss": ev.loss, "report": ev.report}))?;
    let mut csv = String::from("id,gold,predicted\n");
    for (e, p) in examples.iter().zip(&ev.predicted) {
        let _ = writeln!(csv, "{},{},{}", e.id, e.label, p);
    }
    dir.write_text("predictions.csv", &csv)?;
    let r = &ev.report;
    println!("{:<10} {:>9} {:>9} {:>9} {:>9}", "examples", "Acc", "P", "R", "F1");
    println!(
        "{:<10} {:>8.2}% {:>8.2}% {:>8.2}% {:>8.2}%",
        examples.len(),
        100.0 * r.accuracy,
        100.0 * r.macro_p,
        100.0 * r.macro_r,
        100.0 * r.macro_f1
    );
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (v, pretrained) = backbone(cfg, &corpus)?;
    let spec = spec(cfg, &corpus, &v, pretrained.as_ref());
    write_inputs(dir, &corpus, &v)?;
    let variants = cfg.variants.clone().unwrap_or_else(|| ABLATION_VARIANTS.to_vec());
    let rows = ablate(&spec, &variants, &v, &corpus.train, &corpus.test, pretrained.as_ref())?;
    let tests: Vec<_> = rows
        .iter()
        .skip(1)
        .map(|r| {
            let a: Vec<f64> = rows[0].runs.iter().map(|m| m.macro_f1).collect();
            let b: Vec<f64> = r.runs.iter().map(|m| m.macro_f1).collect();
            let t = paired_t_test(&a, &b).ok();
            json!({"a": rows[0].variant, "b": r.variant, "metric": "macro_f1", "t_test": t})
        })
        .collect();
    dir.write_json("ablation.json", &json!({"rows": rows, "t_tests": tests}))?;
    let table = format_table(&table_rows(&rows, false));
    dir.write_text("ablation.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (v, pretrained) = backbone(cfg, &corpus)?;
    let spec = spec(cfg, &corpus, &v, pretrained.as_ref());
    if !spec.train.variant.uses_prompt() {
        return Err(usage("sweep-layers needs a variant that reads the [MASK] position"));
    }
    write_inputs(dir, &corpus, &v)?;
    let rows = sweep_layers(&spec, &v, &corpus.train, &corpus.test, pretrained.as_ref())?;
    dir.write_json("sweep.json", &rows)?;
    let table = format_table(&table_rows(&rows, true));
    dir.write_text("sweep.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn attention_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let (model, _, examples) = checkpoint_inputs(cfg)?;
    let records = attention_report(&model, &examples)?;
    let layer_ids: Vec<usize> = model.head.config().layers.layers().collect();
    let means = mean_alphas(&records);
    dir.write_json(
        "attention.json",
        &json!({"layer_ids": layer_ids, "mean_alphas": means, "records": records}),
    )?;
    println!("{:<8}  {:>10}", "layer", "mean alpha");
    for (l, a) in layer_ids.iter().zip(&means) {
        println!("{:<8}  {:>9.2}%", l, 100.0 * a);
    }
    Ok(())
}

fn head_config(cfg: &RunConfig, variant: Variant, n_classes: usize) -> HeadConfig {
    HeadConfig {
        variant,
        n_classes,
        d_model: cfg.encoder.d_model,
        layers: cfg.layers,
        attn_projection: cfg.attn_projection,
    }
}

fn profile_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let n_classes = cfg.n_classes.unwrap_or(match cfg.task {
        Some(crate::config::Task::Toy(t)) => t.n_classes(),
        _ => 19,
    });
    let seq_len = cfg.seq_len.unwrap_or(cfg.encoder.max_len);
    let variants = cfg.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    let reports = variants
        .iter()
        .map(|&v| cost(&cfg.encoder, &head_config(cfg, v, n_classes), seq_len))
        .collect::<promptclass::Result<Vec<_>>>()?;
    let reference = cost(&cfg.encoder, &head_config(cfg, Variant::WithBilstm, n_classes), seq_len)?;
    let comparisons: Vec<_> = reports
        .iter()
        .map(|r| {
            let c = compare(reference.clone(), r.clone());
            json!({"variant": r.variant, "param_reduction": c.param_reduction, "mac_reduction": c.mac_reduction})
        })
        .collect();
    dir.write_json(
        "costs.json",
        &json!({
            "seq_len": seq_len,
            "n_classes": n_classes,
            "reference": Variant::WithBilstm,
            "reports": reports,
            "reductions": comparisons,
        }),
    )?;
    let table = format_costs(&reports, Some(&reference));
    dir.write_text("costs.txt", &table)?;
    print!("{table}");
    Ok(())
}

const DEFAULT_SNIPPET: &str = "int main ( int argc , char * argv [ ] ) { printf ( \"%d\" , argc ) ; return 0 ; }";

fn time_cmd(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let mut reports = Vec::new();
    let (models, v, text) = match &cfg.checkpoint {
        Some(_) => {
            let (m, meta) = load_checkpoint(cfg)?;
            let text = cfg.text.clone().unwrap_or_else(|| DEFAULT_SNIPPET.into());
            (vec![m], vocab_from_metadata(&meta)?, text)
        }
        None => {
            let (v, text, n_classes) = if cfg.task.is_some() || cfg.data.is_some() {
                let corpus = load_corpus(cfg)?;
                let text = cfg.text.clone().unwrap_or_else(|| corpus.test[0].text.clone());
                (vocabulary(cfg, &corpus)?, text, corpus.n_classes)
            } else {
                let text = cfg.text.clone().unwrap_or_else(|| DEFAULT_SNIPPET.into());
                let v = match &cfg.vocab {
                    Some(p) => Vocabulary::load(p)?,
                    None => train_vocab(&[text.as_str()], cfg.encoder.vocab_size)?,
                };
                (v, text, cfg.n_classes.unwrap_or(4))
            };
            let variants = cfg.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
            let models = variants
                .iter()
                .map(|&var| {
                    Model::init(encoder_config(cfg, &v), head_config(cfg, var, n_classes), cfg.train.seed)
                })
                .collect::<promptclass::Result<Vec<_>>>()?;
            (models, v, text)
        }
    };
    // timing runs on this thread only
    for m in &models {
        let r = time_breakdown(m, &v, &cfg.template, &text, cfg.groups, cfg.repeats)?;
        print!("{}", format_timing(&r));
        reports.push(r);
    }
    dir.write_json("timing.json", &reports)?;
    Ok(())
}
