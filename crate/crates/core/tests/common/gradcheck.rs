//! Central finite differences over every trainable tensor.

use promptclass::aggregator::{HeadConfig, LayerRange, Variant};
use promptclass::model::{Model, PreparedExample};
use promptclass::tensor::Tensor;
use promptclass::tokenizer::{CLS_ID, MASK_ID, PAD_ID};
use promptclass::training::{grad, loss};
use promptclass::EncoderConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub struct Instance {
    pub model: Model,
    pub examples: Vec<PreparedExample>,
}

/// A random tiny model with weights large enough that gradients are
/// well above finite-difference noise.
pub fn random_instance(seed: u64, variant: Variant, attn_projection: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = EncoderConfig {
        vocab_size: 9,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 6,
        max_len: 5,
        dropout_rate: 0.0,
    };
    let start = rng.random_range(0..=2);
    let head = HeadConfig {
        variant,
        n_classes: 3,
        d_model: 4,
        layers: LayerRange::new(start, 2).unwrap(),
        attn_projection,
    };
    let mut model = Model::init(enc, head, seed).unwrap();
    for store in [model.encoder.store_mut(), model.head.store_mut()] {
        let names = store.names().to_vec();
        for (t, name) in store.tensors_mut().iter_mut().zip(names) {
            let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            let (r, c) = t.shape();
            let noise = Tensor::randn(r, c, 0.5, &mut rng);
            *t = noise.map(|v| v + base);
        }
    }
    let examples = (0..2)
        .map(|i| {
            let n = 5;
            let valid = rng.random_range(3..=n);
            let mask = rng.random_range(1..valid);
            let ids = (0..n)
                .map(|p| match p {
                    0 => CLS_ID,
                    _ if p == mask => MASK_ID,
                    _ if p >= valid => PAD_ID,
                    _ => rng.random_range(5..9),
                })
                .collect();
            PreparedExample {
                id: format!("g{i}"),
                ids,
                valid_length: valid,
                mask_position: mask,
                label: rng.random_range(0..3),
            }
        })
        .collect();
    Instance { model, examples }
}

/// Worst per-tensor relative error `|a - n| / max(|a|, |n|)` in the
/// Euclidean norm, with the tensor name.
pub fn check(inst: &mut Instance) -> (f64, String) {
    let (_, analytic) = grad(&inst.model, &inst.examples).unwrap();
    let mut worst = (0.0, String::new());
    for part in 0..2 {
        let n_tensors = if part == 0 {
            inst.model.encoder.store().len()
        } else {
            inst.model.head.store().len()
        };
        for ti in 0..n_tensors {
            let (name, len) = {
                let s = if part == 0 { inst.model.encoder.store() } else { inst.model.head.store() };
                (s.names()[ti].clone(), s.tensors()[ti].len())
            };
            let a = if part == 0 { &analytic.encoder[ti] } else { &analytic.head[ti] };
            let a: Vec<f64> = a.as_ref().map_or(vec![0.0; len], |t| t.data().to_vec());
            let mut numeric = vec![0.0; len];
            for k in 0..len {
                let nudge = |m: &mut Model, d: f64| {
                    let s = if part == 0 { m.encoder.store_mut() } else { m.head.store_mut() };
                    s.tensors_mut()[ti].data_mut()[k] += d;
                };
                let orig = {
                    let s = if part == 0 { inst.model.encoder.store() } else { inst.model.head.store() };
                    s.tensors()[ti].data()[k]
                };
                nudge(&mut inst.model, STEP);
                let up = loss(&inst.model, &inst.examples).unwrap();
                nudge(&mut inst.model, -2.0 * STEP);
                let down = loss(&inst.model, &inst.examples).unwrap();
                {
                    let s = if part == 0 { inst.model.encoder.store_mut() } else { inst.model.head.store_mut() };
                    s.tensors_mut()[ti].data_mut()[k] = orig;
                }
                numeric[k] = (up - down) / (2.0 * STEP);
            }
            let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = na.max(nn);
            // tensors the loss does not touch must come out exactly zero
            let rel = if scale < 1e-9 { diff } else { diff / scale };
            if rel > worst.0 {
                worst = (rel, name);
            }
        }
    }
    worst
}
