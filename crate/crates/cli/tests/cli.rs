use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptclass"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("PROMPTCLASS_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = run(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &[&str] = &["--task", "toy-languages", "--n-per-class", "12", "--epochs", "1", "--seeds", "1"];

fn small<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], d.path()).status.code(), Some(1));
    assert_eq!(run(&["train", "--epochs", "many"], d.path()).status.code(), Some(1));
    assert_eq!(run(&["train"], d.path()).status.code(), Some(1));
    assert_eq!(
        run(&["train", "--task", "toy-languages", "--n-layers", "2", "--layers", "0..5"], d.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["stats", "--data", "/nonexistent/corpus.csv"], d.path()).status.code(),
        Some(2)
    );
    let bad = d.path().join("bad.csv");
    fs::write(&bad, "text,label\n\"unterminated,a\n").unwrap();
    let o = run(&["stats", "--data", bad.to_str().unwrap()], &d.path().join("o"));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(run(&["--help"], d.path()).status.code(), Some(0));
}

#[test]
fn lock_conflict_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join(".promptclass.lock"), "1\n").unwrap();
    let o = run(&small("stats", &[]), d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
    fs::remove_file(d.path().join(".promptclass.lock")).unwrap();
    ok(&small("stats", &[]), d.path());
    assert!(!d.path().join(".promptclass.lock").exists());
}

#[test]
fn config_file_then_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.ini");
    fs::write(
        &cfg,
        "[run]\ntask = toy-debt\nseeds = 1\n[train]\nepochs = 1\nbatch_size = 8\n[data]\nn_per_class = 10\n",
    )
    .unwrap();
    let out = d.path().join("o");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--batch-size", "2"], &out);
    let written = fs::read_to_string(out.join("config.ini")).unwrap();
    assert!(written.contains("task=toy-debt"));
    assert!(written.contains("batch_size=2"));
    assert!(written.contains("epochs=1"));
    let report = json(&out.join("report.json"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);

    fs::write(&cfg, "[train]\nepoch = 1\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()], &d.path().join("p"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn vocab_and_stats() {
    let d = tempfile::tempdir().unwrap();
    ok(&small("vocab", &[]), d.path());
    let v = json(&d.path().join("vocab.json"));
    let lines = fs::read_to_string(d.path().join("vocab.txt")).unwrap();
    assert_eq!(lines.lines().count() as u64, v["size"].as_u64().unwrap());
    assert!(lines.starts_with("[PAD]"));

    ok(&small("stats", &[]), d.path());
    let s = json(&d.path().join("stats.json"));
    let counts = |k: &str| -> Vec<u64> {
        s[k]["class_counts"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect()
    };
    assert_eq!(counts("all"), vec![12; 4]);
    let (tr, te) = (counts("train"), counts("test"));
    assert!(tr.iter().zip(&te).all(|(a, b)| a + b == 12));
}

#[test]
fn csv_corpus_with_label_names() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("c.csv");
    let mut csv = String::from("id,text,label\n");
    for i in 0..20 {
        let (text, label) = if i % 2 == 0 {
            ("def f ( x ) : return x", "python")
        } else {
            ("int f ( int x ) { return x ; }", "c")
        };
        csv += &format!("r{i},\"{text}\",{label}\n");
    }
    fs::write(&data, csv).unwrap();
    let out = d.path().join("o");
    ok(
        &[
            "train", "--data", data.to_str().unwrap(), "--task", "code_language", "--scale", "tiny",
            "--vocab-size", "60", "--epochs", "1", "--seeds", "1",
        ],
        &out,
    );
    let labels = json(&out.join("label_map.json"));
    assert!(labels.to_string().contains("python"));
    let split = json(&out.join("split.json"));
    assert!(split.to_string().contains("r0"));
}

#[test]
fn train_eval_attention_roundtrip() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&small("train", &["--seed", "9"]), d.path());
    assert!(out.contains("seed 9"));
    let seed_dir = d.path().join("seed-9");
    for f in ["model.ckpt", "history.csv", "metrics.json"] {
        assert!(seed_dir.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(seed_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,split,loss,accuracy"));
    let report = json(&d.path().join("report.json"));
    assert_eq!(report["variant"], "full");
    assert!(fs::read_to_string(d.path().join("report.txt")).unwrap().contains("F1-score"));

    let ckpt = seed_dir.join("model.ckpt");
    let ev = d.path().join("eval");
    ok(&small("eval", &["--checkpoint", ckpt.to_str().unwrap()]), &ev);
    let metrics = json(&ev.join("metrics.json"));
    let trained = json(&seed_dir.join("metrics.json"));
    assert_eq!(metrics["report"]["accuracy"], trained["accuracy"]);
    let preds = fs::read_to_string(ev.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("id,gold,predicted\n"));

    let at = d.path().join("attn");
    ok(&small("attention-report", &["--checkpoint", ckpt.to_str().unwrap()]), &at);
    let a = json(&at.join("attention.json"));
    let means: Vec<f64> = a["mean_alphas"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(means.len(), a["layer_ids"].as_array().unwrap().len());
    assert!((means.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let o = run(&small("eval", &[]), &d.path().join("none"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn documented_train_invocation() {
    let d = tempfile::tempdir().unwrap();
    ok(
        &[
            "train", "--task", "toy-languages", "--template", "Just [MASK] ! {x}", "--layers", "2..12",
            "--seeds", "5", "--epochs", "1", "--n-per-class", "10",
        ],
        d.path(),
    );
    let report = json(&d.path().join("report.json"));
    assert_eq!(report["layers"]["start"], 2);
    assert_eq!(report["layers"]["end"], 12);
    for s in 0..5 {
        assert!(d.path().join(format!("seed-{s}/model.ckpt")).exists());
    }
}

#[test]
fn pretrain_then_train() {
    let d = tempfile::tempdir().unwrap();
    let pre = d.path().join("pre");
    ok(&small("pretrain", &[]), &pre);
    let p = json(&pre.join("pretrain.json"));
    assert_eq!(p["report"]["epoch_losses"].as_array().unwrap().len(), 1);
    let enc = pre.join("encoder.ckpt");
    let tr = d.path().join("tr");
    ok(&small("train", &["--pretrained", enc.to_str().unwrap()]), &tr);
    assert_eq!(
        fs::read_to_string(tr.join("vocab.txt")).unwrap(),
        fs::read_to_string(pre.join("vocab.txt")).unwrap()
    );
}

#[test]
fn ablate_and_sweep_small() {
    let d = tempfile::tempdir().unwrap();
    ok(
        &["ablate", "--task", "toy-languages", "--n-per-class", "12", "--epochs", "1", "--seeds", "2"],
        d.path(),
    );
    let a = json(&d.path().join("ablation.json"));
    let variants: Vec<&str> = a["rows"].as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["full", "no_attention", "no_attention_no_prompt"]);
    assert_eq!(a["t_tests"].as_array().unwrap().len(), 2);

    let s = d.path().join("sweep");
    ok(&small("sweep-layers", &[]), &s);
    let rows = json(&s.join("sweep.json"));
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(s.join("sweep.txt")).unwrap().contains("2..2"));
}

#[test]
fn profile_base_scale() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["profile", "--seq-len", "256"], d.path());
    assert!(out.contains("full"));
    let c = json(&d.path().join("costs.json"));
    assert_eq!(c["n_classes"], 19);
    let reports = c["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 4);
    let full = reports.iter().find(|r| r["variant"] == "full").unwrap();
    let params = full["params"].as_u64().unwrap();
    assert!((params as f64 / 85.07e6 - 1.0).abs() < 0.02, "{params}");
}

#[test]
fn time_small() {
    let d = tempfile::tempdir().unwrap();
    ok(&["time", "--groups", "2", "--repeats", "3", "--variants", "full,with_bilstm"], d.path());
    let t = json(&d.path().join("timing.json"));
    assert_eq!(t.as_array().unwrap().len(), 2);
}

#[test]
fn bad_thread_env() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_promptclass"))
        .args(["profile", "--out"])
        .arg(d.path())
        .env("PROMPTCLASS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
