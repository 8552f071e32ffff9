use promptclass::aggregator::{HeadConfig, LayerRange, Variant};
use promptclass::profiler::{compare, cost, count_macs, count_params, reduction};
use promptclass::{EncoderConfig, Model};
use proptest::prelude::*;

fn head(enc: &EncoderConfig, variant: Variant, c: usize, layers: LayerRange) -> HeadConfig {
    HeadConfig {
        variant,
        n_classes: c,
        d_model: enc.d_model,
        layers,
        attn_projection: false,
    }
}

/// Closed-form count written out per block, without the stage ledger.
fn closed_form_params(enc: &EncoderConfig, variant: Variant, c: u64) -> u64 {
    let d = enc.d_model as u64;
    let f = enc.d_ffn as u64;
    let block = 4 * d * d + 4 * d + d * f + f + f * d + d + 2 * 2 * d;
    let encoder = enc.n_layers as u64 * block;
    match variant {
        Variant::Full => encoder + d + c * d + c,
        Variant::NoAttention | Variant::NoAttentionNoPrompt => encoder + d * d + d + c * d + c,
        Variant::WithBilstm => {
            let lstm0 = 2 * (4 * d * (d + d) + 8 * d);
            let lstm1 = 2 * (4 * d * (2 * d + d) + 8 * d);
            encoder + lstm0 + lstm1 + 2 * d + c * 2 * d + c
        }
    }
}

#[test]
fn base_scale_matches_published_costs() {
    let enc = EncoderConfig::base();
    let r = LayerRange::new(2, 12).unwrap();
    let full = cost(&enc, &head(&enc, Variant::Full, 19, r), 256).unwrap();
    let bi = cost(&enc, &head(&enc, Variant::WithBilstm, 19, r), 256).unwrap();
    assert!((full.params_millions / 85.07 - 1.0).abs() <= 0.02, "{}", full.params_millions);
    assert!((full.macs_giga / 21.76 - 1.0).abs() <= 0.02, "{}", full.macs_giga);
    assert!((bi.params_millions / 109.87 - 1.0).abs() <= 0.03, "{}", bi.params_millions);
    assert!((bi.macs_giga / 22.05 - 1.0).abs() <= 0.03, "{}", bi.macs_giga);
    let cmp = compare(bi, full);
    assert!((100.0 * cmp.param_reduction - 22.57).abs() <= 2.0);
    assert!((100.0 * cmp.mac_reduction - 1.32).abs() <= 0.7);
}

#[test]
fn ledger_agrees_with_closed_form() {
    for enc in [EncoderConfig::tiny(30), EncoderConfig::desk(500), EncoderConfig::base()] {
        for v in Variant::ALL {
            let r = LayerRange::default_for(enc.n_layers);
            let got = count_params(&enc, &head(&enc, v, 5, r)).unwrap();
            assert_eq!(got, closed_form_params(&enc, v, 5), "{v}");
        }
    }
}

#[test]
fn ledger_counts_every_instantiated_weight() {
    let enc = EncoderConfig::tiny(37);
    for v in Variant::ALL {
        for proj in [false, true] {
            let h = HeadConfig {
                attn_projection: proj,
                ..head(&enc, v, 3, LayerRange::new(0, 2).unwrap())
            };
            let m = Model::init(enc.clone(), h.clone(), 1).unwrap();
            let excluded = |n: &str| n.ends_with("_embedding") || n.contains(".mlm.");
            let real: usize = m
                .encoder
                .store()
                .iter()
                .chain(m.head.store().iter())
                .filter(|(n, _)| !excluded(n))
                .map(|(_, t)| t.len())
                .sum();
            assert_eq!(count_params(&enc, &h).unwrap(), real as u64, "{v} proj={proj}");
        }
    }
}

#[test]
fn full_macs_are_params_times_length() {
    let enc = EncoderConfig::base();
    let r = LayerRange::new(2, 12).unwrap();
    let h = head(&enc, Variant::Full, 19, r);
    let rep = cost(&enc, &h, 256).unwrap();
    let enc_params: u64 = rep.stages[..3].iter().map(|s| s.params).sum();
    let enc_macs: u64 = rep.stages[..3].iter().map(|s| s.macs).sum();
    let bias_and_norm = 12 * (4 * 768 + 3072 + 768 + 4 * 768);
    assert_eq!(enc_macs, (enc_params - bias_and_norm) * 256);
}

#[test]
fn seq_len_above_max_len_is_rejected() {
    let enc = EncoderConfig::tiny(10);
    let h = head(&enc, Variant::Full, 2, LayerRange::default_for(2));
    assert!(count_macs(&enc, &h, enc.max_len + 1).is_err());
    assert!(count_macs(&enc, &h, enc.max_len).is_ok());
}

proptest! {
    #[test]
    fn reductions_match_stage_recomputation(
        d_heads in 1usize..6, heads in 1usize..4, layers in 1usize..6,
        c in 2usize..20, n in 1usize..64,
    ) {
        let enc = EncoderConfig {
            vocab_size: 50,
            d_model: d_heads * heads * 2,
            n_layers: layers,
            n_heads: heads,
            d_ffn: 4 * d_heads * heads * 2,
            max_len: 64,
            dropout_rate: 0.0,
        };
        let r = LayerRange::default_for(layers);
        let full = cost(&enc, &head(&enc, Variant::Full, c, r), n).unwrap();
        let bi = cost(&enc, &head(&enc, Variant::WithBilstm, c, r), n).unwrap();
        let p = |rep: &promptclass::CostReport| rep.stages.iter().map(|s| s.params as f64).sum::<f64>();
        let m = |rep: &promptclass::CostReport| rep.stages.iter().map(|s| s.macs as f64).sum::<f64>();
        let cmp = compare(bi.clone(), full.clone());
        prop_assert!((cmp.param_reduction - (p(&bi) - p(&full)) / p(&bi)).abs() < 1e-9);
        prop_assert!((cmp.mac_reduction - (m(&bi) - m(&full)) / m(&bi)).abs() < 1e-9);
        prop_assert!(full.params < bi.params);
        prop_assert!(reduction(bi.params as f64, full.params as f64) > 0.0);
    }

    #[test]
    fn encoder_macs_linear_in_length(layers in 1usize..5, n in 1usize..32, variant_ix in 0usize..4) {
        let enc = EncoderConfig::tiny(50);
        let enc = EncoderConfig { n_layers: layers, ..enc };
        let h = head(&enc, Variant::ALL[variant_ix], 3, LayerRange::default_for(layers));
        let enc_macs = |len| -> u64 {
            cost(&enc, &h, len).unwrap().stages.iter().filter(|s| s.stage.starts_with("encoder.")).map(|s| s.macs).sum()
        };
        prop_assert_eq!(enc_macs(n), n as u64 * enc_macs(1));
        prop_assert_eq!(enc_macs(2 * n.min(16)), 2 * enc_macs(n.min(16)));
    }
}
