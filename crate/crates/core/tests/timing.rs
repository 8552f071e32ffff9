use promptclass::aggregator::{HeadConfig, LayerRange, Variant};
use promptclass::profiler::{time_breakdown, TIMED_STAGES};
use promptclass::tokenizer::train_vocab;
use promptclass::{EncoderConfig, Error, Model, TaskKind};

const TEXT: &str = "int main ( ) { printf ( x ) ; return 0 ; }";

fn model(variant: Variant) -> (Model, promptclass::Vocabulary) {
    let vocab = train_vocab(&[TEXT, "def f ( self ) : return None"], 80).unwrap();
    let enc = EncoderConfig::tiny(vocab.size());
    let head = HeadConfig {
        variant,
        n_classes: 4,
        d_model: enc.d_model,
        layers: LayerRange::new(0, 2).unwrap(),
        attn_projection: false,
    };
    (Model::init(enc, head, 1).unwrap(), vocab)
}

#[test]
fn recurrent_share_is_positive_and_stable() {
    let (m, v) = model(Variant::WithBilstm);
    let t = TaskKind::CodeLanguage.default_template();
    let r = time_breakdown(&m, &v, &t, TEXT, 10, 200).unwrap();
    assert_eq!(r.group_shares.len(), 10);
    assert!(r.shares[2] > 0.0);
    assert!(r.share_cv[2] < 0.2, "cv {}", r.share_cv[2]);
    assert!((r.shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(TIMED_STAGES[2], "recurrent");
}

#[test]
fn recurrent_share_is_zero_without_the_stage() {
    for variant in [Variant::Full, Variant::NoAttention, Variant::NoAttentionNoPrompt] {
        let (m, v) = model(variant);
        let t = TaskKind::CodeLanguage.default_template();
        let r = time_breakdown(&m, &v, &t, TEXT, 3, 20).unwrap();
        assert_eq!(r.shares[2], 0.0);
        assert_eq!(r.mean_seconds[2], 0.0);
    }
}

#[test]
fn zero_groups_or_repeats_are_rejected() {
    let (m, v) = model(Variant::Full);
    let t = TaskKind::CodeLanguage.default_template();
    assert!(matches!(time_breakdown(&m, &v, &t, TEXT, 0, 5), Err(Error::Config(_))));
    assert!(matches!(time_breakdown(&m, &v, &t, TEXT, 5, 0), Err(Error::Config(_))));
}
