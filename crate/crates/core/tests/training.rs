use promptclass::aggregator::{HeadConfig, LayerRange, Variant};
use promptclass::encoder::encode;
use promptclass::experiment::{run_seeds, seed_sequence, ExperimentSpec};
use promptclass::model::prepare;
use promptclass::tokenizer::{pad_or_truncate, train_vocab};
use promptclass::training::{
    evaluate, grad, loss, mlm_accuracy, pretrain_mlm, train_classifier, AdamW, Sequence,
};
use promptclass::{
    EncoderConfig, EncoderParams, Error, LabeledExample, Model, PreparedExample, TaskKind,
    TrainConfig, Vocabulary,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn separable() -> Vec<LabeledExample> {
    let pos = ["good fine nice", "nice good", "fine fine good", "good nice nice fine"];
    let neg = ["bad awful poor", "poor bad", "awful awful bad", "bad poor poor awful"];
    (0..24)
        .map(|i| {
            let (text, label) = if i % 2 == 0 {
                (pos[i / 2 % 4], 0)
            } else {
                (neg[i / 2 % 4], 1)
            };
            LabeledExample {
                id: format!("s{i}"),
                text: text.to_string(),
                label,
            }
        })
        .collect()
}

struct Fixture {
    vocab: Vocabulary,
    examples: Vec<PreparedExample>,
    enc: EncoderConfig,
}

fn fixture(variant: Variant) -> Fixture {
    let data = separable();
    let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
    let vocab = train_vocab(&texts, 60).unwrap();
    let enc = EncoderConfig::tiny(vocab.size());
    let template = TaskKind::CodeLanguage.default_template();
    let examples = prepare(&vocab, &template, variant, &data, enc.max_len).unwrap();
    Fixture { vocab, examples, enc }
}

fn head(enc: &EncoderConfig, variant: Variant) -> HeadConfig {
    HeadConfig {
        variant,
        n_classes: 2,
        d_model: enc.d_model,
        layers: LayerRange::default_for(enc.n_layers),
        attn_projection: false,
    }
}

fn cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        epochs: 3,
        variant,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    for v in Variant::ALL {
        let f = fixture(v);
        let mut m = Model::init(f.enc.clone(), head(&f.enc, v), 4).unwrap();
        let before = m.clone();
        let c = TrainConfig {
            learning_rate: 0.0,
            ..cfg(v)
        };
        let h = train_classifier(&mut m, &f.examples, None, &c).unwrap();
        assert_eq!(h.len(), c.epochs);
        assert_eq!(m, before, "{v}");
    }
}

#[test]
fn separable_set_is_fit_within_fifty_epochs() {
    let f = fixture(Variant::Full);
    let mut m = Model::init(f.enc.clone(), head(&f.enc, Variant::Full), 0).unwrap();
    let mut c = cfg(Variant::Full);
    c.epochs = 1;
    let mut reached = None;
    for epoch in 1..=50 {
        c.seed = epoch;
        train_classifier(&mut m, &f.examples, None, &c).unwrap();
        if evaluate(&m, &f.examples).unwrap().report.accuracy == 1.0 {
            reached = Some(epoch);
            break;
        }
    }
    assert!(reached.is_some(), "training accuracy never reached 100%");
}

#[test]
fn training_is_bitwise_deterministic() {
    for v in [Variant::Full, Variant::WithBilstm] {
        let f = fixture(v);
        let run = || {
            let mut m = Model::init(f.enc.clone(), head(&f.enc, v), 9).unwrap();
            let h = train_classifier(&mut m, &f.examples, Some(&f.examples), &cfg(v)).unwrap();
            (m, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }
}

#[test]
fn frozen_backbone_only_moves_the_head() {
    let f = fixture(Variant::Full);
    let mut m = Model::init(f.enc.clone(), head(&f.enc, Variant::Full), 2).unwrap();
    let before = m.clone();
    let c = TrainConfig {
        freeze_backbone: true,
        ..cfg(Variant::Full)
    };
    train_classifier(&mut m, &f.examples, None, &c).unwrap();
    assert_eq!(m.encoder, before.encoder);
    assert_ne!(m.head, before.head);
}

#[test]
fn out_of_range_label_names_the_example() {
    let f = fixture(Variant::Full);
    let mut examples = f.examples.clone();
    examples[5].label = 7;
    let mut m = Model::init(f.enc.clone(), head(&f.enc, Variant::Full), 2).unwrap();
    match train_classifier(&mut m, &examples, None, &cfg(Variant::Full)) {
        Err(Error::LabelOutOfRange { example, label: 7, n_classes: 2 }) => assert_eq!(example, "s5"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn small_step_does_not_increase_loss() {
    for seed in 0..20u64 {
        let v = Variant::ALL[seed as usize % 4];
        let f = fixture(v);
        let enc = EncoderConfig {
            dropout_rate: 0.0,
            ..f.enc.clone()
        };
        let mut m = Model::init(enc, head(&f.enc, v), seed).unwrap();
        let (l0, g) = grad(&m, &f.examples).unwrap();
        let mut eo = AdamW::new(m.encoder.store(), 0.0);
        let mut ho = AdamW::new(m.head.store(), 0.0);
        eo.step(m.encoder.store_mut(), &g.encoder, 1e-4);
        ho.step(m.head.store_mut(), &g.head, 1e-4);
        let l1 = loss(&m, &f.examples).unwrap();
        assert!(l1 <= l0 + 1e-12, "seed {seed} {v}: {l0} -> {l1}");
    }
}

#[test]
fn seed_runs_use_consecutive_offsets() {
    let data = separable();
    let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
    let vocab = train_vocab(&texts, 60).unwrap();
    let spec = ExperimentSpec {
        encoder: EncoderConfig::tiny(vocab.size()),
        layers: LayerRange::default_for(2),
        attn_projection: false,
        template: TaskKind::CodeLanguage.default_template(),
        n_classes: 2,
        train: TrainConfig {
            seed: 40,
            epochs: 1,
            ..cfg(Variant::Full)
        },
    };
    assert_eq!(seed_sequence(&spec.train), vec![40, 41, 42, 43, 44]);
    let runs = run_seeds(&spec, &vocab, &data, &data, None).unwrap();
    let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![40, 41, 42, 43, 44]);
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            assert_ne!(runs[i].history, runs[j].history);
        }
    }
}

fn mlm_corpus(vocab: &Vocabulary, texts: &[&str], n: usize) -> Vec<Sequence> {
    texts
        .iter()
        .map(|t| {
            let (ids, valid_length) = pad_or_truncate(&vocab.encode_sequence(t), n).unwrap();
            Sequence { ids, valid_length }
        })
        .collect()
}

#[test]
fn pretraining_zero_epochs_is_identity() {
    let f = fixture(Variant::Full);
    let mut e = EncoderParams::init(f.enc.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = e.clone();
    let corpus = mlm_corpus(&f.vocab, &["good fine nice"], 16);
    let c = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let r = pretrain_mlm(&mut e, &corpus, &c).unwrap();
    assert_eq!(r.steps, 0);
    assert_eq!(e, before);
}

#[test]
fn pretraining_beats_chance_and_is_deterministic() {
    let f = fixture(Variant::Full);
    let text = "good fine nice bad awful poor nice good";
    let corpus = mlm_corpus(&f.vocab, &[text], 16);
    let c = TrainConfig {
        epochs: 200,
        batch_size: 1,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut e = EncoderParams::init(f.enc.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r = pretrain_mlm(&mut e, &corpus, &c).unwrap();
        (e, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.steps, 200);
    assert_eq!(ra.skipped, 0);
    let acc = mlm_accuracy(&a, &corpus, 0.15, 99).unwrap();
    assert!(acc > 1.0 / f.vocab.size() as f64, "{acc}");
    assert!(ra.epoch_losses.last().unwrap() < ra.epoch_losses.first().unwrap());
}

#[test]
fn unmaskable_sequences_are_skipped() {
    let f = fixture(Variant::Full);
    let mut e = EncoderParams::init(f.enc.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut corpus = mlm_corpus(&f.vocab, &["good fine", ""], 8);
    corpus.push(mlm_corpus(&f.vocab, &[""], 8).remove(0));
    let c = TrainConfig {
        epochs: 2,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let r = pretrain_mlm(&mut e, &corpus, &c).unwrap();
    assert_eq!(r.skipped, 4);
    assert_eq!(r.steps, 2);
}

#[test]
fn frozen_forward_matches_plain_encoding() {
    let f = fixture(Variant::Full);
    let m = Model::init(f.enc.clone(), head(&f.enc, Variant::Full), 3).unwrap();
    let ex = &f.examples[0];
    let stack = encode(&m.encoder, &ex.ids, ex.valid_length).unwrap();
    let p = m.predict(ex).unwrap();
    let direct = promptclass::aggregator::forward_variant(&m.head, &stack, ex.mask_position).unwrap();
    assert_eq!(p.logits, direct);
}
