//! Bidirectional post-norm transformer encoder with learned absolute
//! position embeddings and a masked-LM projection head.
//!
//! Every layer's output is kept: `states[0]` is the embedding output and
//! `states[l]` the output of block `l`, for `n_layers + 1` stacks in total.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// CPU-friendly default that keeps the multi-layer structure.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 128,
            max_len: 128,
            dropout_rate: 0.1,
        }
    }

    /// Small enough for tests and toy corpora.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 32,
            max_len: 32,
            dropout_rate: 0.1,
        }
    }

    /// 12-layer, 768-wide reference shape used for cost accounting.
    pub fn base() -> Self {
        Self {
            vocab_size: 50_265,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ffn: 3072,
            max_len: 512,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.n_layers < 1 {
            return bad("n_layers must be at least 1".into());
        }
        if self.vocab_size < 1 || self.d_ffn < 1 {
            return bad("vocab_size and d_ffn must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayout {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerLayout>,
    pub mlm_weight: ParamId,
    pub mlm_bias: ParamId,
}

/// All trainable encoder tensors. Linear weights are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    store: ParamStore,
    layout: EncoderLayout,
}

/// Hidden states of every layer for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    pub states: Vec<Tensor>,
    pub valid_length: usize,
}

impl HiddenStack {
    pub fn n_layers(&self) -> usize {
        self.states.len() - 1
    }
}

/// Training-mode dropout source.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub(crate) fn apply<'a>(&mut self, g: &mut Graph<'a>, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let (rows, cols) = g.value(x).shape();
        let keep = 1.0 - self.rate;
        let data = (0..rows * cols)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = g.constant(Tensor::from_vec(rows, cols, data));
        g.mul(x, mask)
    }
}

fn layout_names(config: &EncoderConfig) -> Vec<(String, usize, usize)> {
    let d = config.d_model;
    let mut v = vec![
        ("encoder.token_embedding".to_string(), config.vocab_size, d),
        ("encoder.position_embedding".to_string(), config.max_len, d),
    ];
    for l in 0..config.n_layers {
        let p = format!("encoder.layers.{l}");
        for (n, r, c) in [
            ("attn.wq", d, d),
            ("attn.bq", 1, d),
            ("attn.wk", d, d),
            ("attn.bk", 1, d),
            ("attn.wv", d, d),
            ("attn.bv", 1, d),
            ("attn.wo", d, d),
            ("attn.bo", 1, d),
            ("ln1.gamma", 1, d),
            ("ln1.beta", 1, d),
            ("ffn.w1", d, config.d_ffn),
            ("ffn.b1", 1, config.d_ffn),
            ("ffn.w2", config.d_ffn, d),
            ("ffn.b2", 1, d),
            ("ln2.gamma", 1, d),
            ("ln2.beta", 1, d),
        ] {
            v.push((format!("{p}.{n}"), r, c));
        }
    }
    v.push(("encoder.mlm.weight".to_string(), d, config.vocab_size));
    v.push(("encoder.mlm.bias".to_string(), 1, config.vocab_size));
    v
}

fn build_layout(store: &ParamStore, config: &EncoderConfig) -> Result<EncoderLayout> {
    let find = |name: String| {
        store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |n: &str| find(format!("encoder.layers.{l}.{n}"));
        layers.push(LayerLayout {
            wq: p("attn.wq")?,
            bq: p("attn.bq")?,
            wk: p("attn.wk")?,
            bk: p("attn.bk")?,
            wv: p("attn.wv")?,
            bv: p("attn.bv")?,
            wo: p("attn.wo")?,
            bo: p("attn.bo")?,
            ln1_gamma: p("ln1.gamma")?,
            ln1_beta: p("ln1.beta")?,
            w1: p("ffn.w1")?,
            b1: p("ffn.b1")?,
            w2: p("ffn.w2")?,
            b2: p("ffn.b2")?,
            ln2_gamma: p("ln2.gamma")?,
            ln2_beta: p("ln2.beta")?,
        });
    }
    Ok(EncoderLayout {
        token_embedding: find("encoder.token_embedding".into())?,
        position_embedding: find("encoder.position_embedding".into())?,
        layers,
        mlm_weight: find("encoder.mlm.weight".into())?,
        mlm_bias: find("encoder.mlm.bias".into())?,
    })
}

impl EncoderParams {
    /// Weights ~ N(0, 0.02²), biases 0, norm scales 1.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, r, c) in layout_names(&config) {
            let t = if name.ends_with("gamma") {
                Tensor::full(r, c, 1.0)
            } else if r == 1 {
                Tensor::zeros(r, c)
            } else {
                Tensor::randn(r, c, INIT_STD, rng)
            };
            store.add(name, t);
        }
        let layout = build_layout(&store, &config)?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    /// Rebuilds params from named tensors, checking names and shapes.
    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, r, c) in layout_names(&config) {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if store.get(id).shape() != (r, c) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    (r, c)
                )));
            }
        }
        let layout = build_layout(&store, &config)?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &EncoderLayout {
        &self.layout
    }

    pub fn token_embedding(&self) -> &Tensor {
        self.store.get(self.layout.token_embedding)
    }

    pub fn position_embedding(&self) -> &Tensor {
        self.store.get(self.layout.position_embedding)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} outside [1, {}]",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id: bad as usize,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the encoder on `g` and returns the `n_layers + 1` state
    /// variables.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        vars: &Bound,
        ids: &[TokenId],
        valid_length: usize,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Vec<Var>> {
        self.check_ids(ids)?;
        let n = ids.len();
        if valid_length < 1 || valid_length > n {
            return Err(Error::Shape(format!(
                "valid_length {valid_length} outside [1, {n}]"
            )));
        }
        let lay = &self.layout;
        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let tok = g.gather(vars.var(lay.token_embedding), &tok_ids);
        let pos = g.gather(vars.var(lay.position_embedding), &positions);
        let mut x = g.add(tok, pos);
        let mut states = vec![x];
        if let Some(d) = dropout.as_deref_mut() {
            x = d.apply(g, x);
        }

        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, l) in lay.layers.iter().enumerate() {
            let v = |id| vars.var(id);
            let q = g.linear(x, v(l.wq), v(l.bq));
            let k = g.linear(x, v(l.wk), v(l.bk));
            let val = g.linear(x, v(l.wv), v(l.bv));
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(val, h * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let probs = g.masked_softmax(scores, valid_length);
                heads.push(g.matmul(probs, vh));
            }
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            };
            let mut attn = g.linear(ctx, v(l.wo), v(l.bo));
            if let Some(d) = dropout.as_deref_mut() {
                attn = d.apply(g, attn);
            }
            let res1 = g.add(x, attn);
            let h1 = g.layer_norm(res1, v(l.ln1_gamma), v(l.ln1_beta));
            let inner = g.linear(h1, v(l.w1), v(l.b1));
            let inner = g.gelu(inner);
            let mut ffn = g.linear(inner, v(l.w2), v(l.b2));
            if let Some(d) = dropout.as_deref_mut() {
                ffn = d.apply(g, ffn);
            }
            let res2 = g.add(h1, ffn);
            let out = g.layer_norm(res2, v(l.ln2_gamma), v(l.ln2_beta));
            if !g.value(out).is_finite() {
                return Err(Error::NumericOverflow { layer: li + 1 });
            }
            states.push(out);
            x = out;
        }
        Ok(states)
    }

    /// `states[L] · W + b` on the graph.
    pub fn mlm_graph<'a>(&'a self, g: &mut Graph<'a>, vars: &Bound, top: Var) -> Var {
        g.linear(
            top,
            vars.var(self.layout.mlm_weight),
            vars.var(self.layout.mlm_bias),
        )
    }
}

/// `token_embedding[ids[i]] + position_embedding[i]`.
pub fn embed(params: &EncoderParams, ids: &[TokenId]) -> Result<Tensor> {
    params.check_ids(ids)?;
    let tok = params.token_embedding();
    let pos = params.position_embedding();
    let mut out = Tensor::zeros(ids.len(), params.config.d_model);
    for (i, &id) in ids.iter().enumerate() {
        for ((o, &t), &p) in out
            .row_mut(i)
            .iter_mut()
            .zip(tok.row(id as usize))
            .zip(pos.row(i))
        {
            *o = t + p;
        }
    }
    Ok(out)
}

/// Evaluation-mode forward pass (no dropout).
pub fn encode(params: &EncoderParams, ids: &[TokenId], valid_length: usize) -> Result<HiddenStack> {
    let mut g = Graph::new();
    let vars = params.store.bind(&mut g);
    let states = params.forward_graph(&mut g, &vars, ids, valid_length, None)?;
    Ok(HiddenStack {
        states: states.iter().map(|&s| g.value(s).clone()).collect(),
        valid_length,
    })
}

pub fn mlm_logits(params: &EncoderParams, stack: &HiddenStack) -> Result<Tensor> {
    let top = stack
        .states
        .last()
        .ok_or_else(|| Error::Shape("empty hidden stack".into()))?;
    if stack.states.len() != params.config.n_layers + 1 || top.cols() != params.config.d_model {
        return Err(Error::Shape(format!(
            "hidden stack of {} x {} does not match an encoder with {} layers of width {}",
            stack.states.len(),
            top.cols(),
            params.config.n_layers,
            params.config.d_model
        )));
    }
    let w = params.store.get(params.layout.mlm_weight);
    let b = params.store.get(params.layout.mlm_bias);
    let mut logits = top.matmul(w);
    for r in 0..logits.rows() {
        for (o, &bv) in logits.row_mut(r).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(logits)
}
