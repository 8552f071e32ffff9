//! Straight-line second implementation of the encoder forward pass.

use promptclass::encoder::{encode, EncoderConfig, EncoderParams};
use promptclass::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

fn get(p: &EncoderParams, name: &str) -> M {
    let t: &Tensor = p.store().get(p.store().find(name).unwrap());
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn affine(x: &M, w: &M, b: &M) -> M {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| b[0][j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &M, g: &M, b: &M) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[0][j] + b[0][j])
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn reference(p: &EncoderParams, ids: &[u32], valid: usize) -> Vec<M> {
    let cfg = p.config();
    let tok = get(p, "encoder.token_embedding");
    let pos = get(p, "encoder.position_embedding");
    let mut x: M = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (0..cfg.d_model).map(|j| tok[id as usize][j] + pos[i][j]).collect())
        .collect();
    let mut states = vec![x.clone()];
    let dh = cfg.d_model / cfg.n_heads;
    for l in 0..cfg.n_layers {
        let w = |n: &str| get(p, &format!("encoder.layers.{l}.{n}"));
        let q = affine(&x, &w("attn.wq"), &w("attn.bq"));
        let k = affine(&x, &w("attn.wk"), &w("attn.bk"));
        let v = affine(&x, &w("attn.wv"), &w("attn.bv"));
        let n = x.len();
        let mut ctx = vec![vec![0.0; cfg.d_model]; n];
        for h in 0..cfg.n_heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..valid)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let a = (s - m).exp() / z;
                    for c in 0..dh {
                        ctx[i][h * dh + c] += a * v[j][h * dh + c];
                    }
                }
            }
        }
        let attn = affine(&ctx, &w("attn.wo"), &w("attn.bo"));
        let r1: M = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        let h1 = layer_norm(&r1, &w("ln1.gamma"), &w("ln1.beta"));
        let inner: M = affine(&h1, &w("ffn.w1"), &w("ffn.b1"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f = affine(&inner, &w("ffn.w2"), &w("ffn.b2"));
        let r2: M = h1.iter().zip(&f).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        x = layer_norm(&r2, &w("ln2.gamma"), &w("ln2.beta"));
        states.push(x.clone());
    }
    states
}

fn scaled_params(cfg: EncoderConfig, seed: u64) -> EncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = EncoderParams::init(cfg, &mut rng).unwrap();
    let names = p.store().names().to_vec();
    for (t, name) in p.store_mut().tensors_mut().iter_mut().zip(names) {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        let (r, c) = t.shape();
        *t = Tensor::randn(r, c, 0.7, &mut rng).map(|v| v + base);
    }
    p
}

#[test]
fn tiny_config_matches_reference() {
    let cfg = EncoderConfig {
        vocab_size: 8,
        d_model: 4,
        n_layers: 2,
        n_heads: 1,
        d_ffn: 8,
        max_len: 3,
        dropout_rate: 0.0,
    };
    for seed in 0..10 {
        let p = scaled_params(cfg.clone(), seed);
        for (ids, valid) in [([1u32, 5, 3], 3), ([1, 6, 0], 2), ([1, 0, 0], 1)] {
            let got = encode(&p, &ids, valid).unwrap();
            let want = reference(&p, &ids, valid);
            for (l, (g, w)) in got.states.iter().zip(&want).enumerate() {
                for i in 0..3 {
                    for j in 0..4 {
                        assert!(
                            (g.get(i, j) - w[i][j]).abs() < 1e-6,
                            "seed {seed} layer {l} ({i},{j}): {} vs {}",
                            g.get(i, j),
                            w[i][j]
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn multi_head_matches_reference() {
    let cfg = EncoderConfig {
        vocab_size: 11,
        d_model: 6,
        n_layers: 3,
        n_heads: 3,
        d_ffn: 5,
        max_len: 7,
        dropout_rate: 0.0,
    };
    let p = scaled_params(cfg, 99);
    let ids = [1u32, 7, 2, 9, 3, 0, 0];
    let got = encode(&p, &ids, 5).unwrap();
    let want = reference(&p, &ids, 5);
    for (g, w) in got.states.iter().zip(&want) {
        for i in 0..7 {
            for j in 0..6 {
                assert!((g.get(i, j) - w[i][j]).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padding_is_invisible(seed in 0u64..500, valid in 1usize..6, junk in proptest::collection::vec(0u32..10, 6)) {
        let cfg = EncoderConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 12,
            max_len: 6,
            dropout_rate: 0.1,
        };
        let p = scaled_params(cfg, seed);
        let base: Vec<u32> = (0..6).map(|i| if i < valid { (i as u32 * 3 + 1) % 10 } else { 0 }).collect();
        let mut other = base.clone();
        other[valid..].copy_from_slice(&junk[valid..]);
        let a = encode(&p, &base, valid).unwrap();
        let b = encode(&p, &other, valid).unwrap();
        prop_assert_eq!(a.states.len(), 3);
        prop_assert!(a.states.iter().all(|s| (s.rows(), s.cols()) == (6, 8)));
        prop_assert_eq!(&encode(&p, &base, valid).unwrap().states, &a.states);
        for (x, y) in a.states.iter().zip(&b.states) {
            for i in 0..valid {
                prop_assert_eq!(x.row(i), y.row(i));
            }
        }
    }
}
