//! Multi-layer `[MASK]` pooling and the classification head.
//!
//! The hidden vector at the mask position is read from every layer in a
//! configured range. The rows are scored with `tanh(row) · context`. The
//! softmax of those scores weights the raw rows into one pooled vector.
//! The class logits are `W · ReLU(pooled) + b`.
//!
//! Ablation variants swap the pooling stage:
//!
//! | variant                  | input          | pooling                          |
//! |--------------------------|----------------|----------------------------------|
//! | `full`                   | prompt         | attention over the layer range   |
//! | `no_attention`           | prompt         | mean of rows, then one FC layer  |
//! | `no_attention_no_prompt` | raw text       | final-layer `[CLS]`, one FC layer|
//! | `with_bilstm`            | prompt         | 2-layer BiLSTM, then attention   |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{attention_pool, softmax, Graph, Var};
use crate::encoder::HiddenStack;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{dot, Tensor};

pub const LSTM_LAYERS: usize = 2;

/// Inclusive range of encoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Config(format!("empty layer range {start}..{end}")));
        }
        Ok(Self { start, end })
    }

    /// Layers 2 through `n_layers`, or the top layer alone for very
    /// shallow encoders.
    pub fn default_for(n_layers: usize) -> Self {
        Self {
            start: 2.min(n_layers),
            end: n_layers,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| Error::Config(format!("layer range `{s}` is not of the form A..B")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer index `{x}` in `{s}`")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAttention,
    NoAttentionNoPrompt,
    WithBilstm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoAttention,
        Variant::NoAttentionNoPrompt,
        Variant::WithBilstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAttention => "no_attention",
            Variant::NoAttentionNoPrompt => "no_attention_no_prompt",
            Variant::WithBilstm => "with_bilstm",
        }
    }

    pub fn uses_prompt(self) -> bool {
        self != Variant::NoAttentionNoPrompt
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Variant::Full | Variant::WithBilstm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: Variant,
    pub n_classes: usize,
    pub d_model: usize,
    pub layers: LayerRange,
    /// Inserts a learned `W x + b` before the tanh scoring.
    #[serde(default)]
    pub attn_projection: bool,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        Ok(())
    }

    /// Width of the rows that reach the attention/classifier stage.
    pub fn pooled_width(&self) -> usize {
        match self.variant {
            Variant::WithBilstm => 2 * self.d_model,
            _ => self.d_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub context: Option<ParamId>,
    pub projection: Option<(ParamId, ParamId)>,
    pub fc: Option<(ParamId, ParamId)>,
    /// `[layer][direction]`, forward first.
    pub lstm: Vec<[LstmDirection; 2]>,
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    config: HeadConfig,
    store: ParamStore,
    layout: HeadLayout,
}

/// `[MASK]`-position rows from a layer range.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeFeatures {
    pub rows: Tensor,
    pub layer_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub alphas: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Every head tensor is drawn from `U(-bound, bound)`.
fn head_tensors(config: &HeadConfig) -> Vec<(String, usize, usize, f64)> {
    let d = config.d_model;
    let w = config.pooled_width();
    let c = config.n_classes;
    let mut v = Vec::new();
    if config.variant == Variant::WithBilstm {
        let bound = 1.0 / (d as f64).sqrt();
        for layer in 0..LSTM_LAYERS {
            let input = if layer == 0 { d } else { 2 * d };
            for dir in ["fwd", "bwd"] {
                let p = format!("head.lstm.{layer}.{dir}");
                v.push((format!("{p}.w_ih"), 4 * d, input, bound));
                v.push((format!("{p}.w_hh"), 4 * d, d, bound));
                v.push((format!("{p}.b_ih"), 1, 4 * d, bound));
                v.push((format!("{p}.b_hh"), 1, 4 * d, bound));
            }
        }
    }
    let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
    if config.variant.uses_attention() {
        if config.attn_projection {
            v.push(("head.projection.weight".into(), w, w, fan_in(w)));
            v.push(("head.projection.bias".into(), 1, w, fan_in(w)));
        }
        v.push(("head.context".into(), 1, w, fan_in(w)));
    } else {
        v.push(("head.fc.weight".into(), d, d, fan_in(d)));
        v.push(("head.fc.bias".into(), 1, d, fan_in(d)));
    }
    v.push(("head.classifier.weight".into(), c, w, fan_in(w)));
    v.push(("head.classifier.bias".into(), 1, c, fan_in(w)));
    v
}

fn build_layout(store: &ParamStore, config: &HeadConfig) -> Result<HeadLayout> {
    let find = |name: &str| {
        store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let mut lstm = Vec::new();
    if config.variant == Variant::WithBilstm {
        for layer in 0..LSTM_LAYERS {
            let dir = |d: &str| -> Result<LstmDirection> {
                let p = format!("head.lstm.{layer}.{d}");
                Ok(LstmDirection {
                    w_ih: find(&format!("{p}.w_ih"))?,
                    w_hh: find(&format!("{p}.w_hh"))?,
                    b_ih: find(&format!("{p}.b_ih"))?,
                    b_hh: find(&format!("{p}.b_hh"))?,
                })
            };
            lstm.push([dir("fwd")?, dir("bwd")?]);
        }
    }
    let pair = |a: &str, b: &str| -> Result<Option<(ParamId, ParamId)>> {
        match (store.find(a), store.find(b)) {
            (Some(x), Some(y)) => Ok(Some((x, y))),
            (None, None) => Ok(None),
            _ => Err(Error::Checkpoint(format!("only one of {a}, {b} present"))),
        }
    };
    Ok(HeadLayout {
        context: store.find("head.context"),
        projection: pair("head.projection.weight", "head.projection.bias")?,
        fc: pair("head.fc.weight", "head.fc.bias")?,
        lstm,
        classifier_weight: find("head.classifier.weight")?,
        classifier_bias: find("head.classifier.bias")?,
    })
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, r, c, bound) in head_tensors(&config) {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let t = Tensor::from_vec(r, c, (0..r * c).map(|_| dist.sample(rng)).collect());
            store.add(name, t);
        }
        let layout = build_layout(&store, &config)?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn from_store(config: HeadConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = head_tensors(&config);
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "head for variant {} expects {} tensors, found {}",
                config.variant,
                expected.len(),
                store.len()
            )));
        }
        for (name, r, c, _) in expected {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if store.get(id).shape() != (r, c) {
                return Err(Error::Checkpoint(format!("tensor {name} has wrong shape")));
            }
        }
        let layout = build_layout(&store, &config)?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &HeadLayout {
        &self.layout
    }

    pub fn context_vector(&self) -> Option<&[f64]> {
        self.layout.context.map(|id| self.store.get(id).data())
    }

    pub fn classifier_weight(&self) -> &Tensor {
        self.store.get(self.layout.classifier_weight)
    }

    pub fn classifier_bias(&self) -> &[f64] {
        self.store.get(self.layout.classifier_bias).data()
    }

    /// Records the head on `g`. `states` are the encoder's `L + 1` state
    /// variables; `mask_pos` is ignored by the no-prompt variant, which
    /// reads the final-layer `[CLS]` row instead.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        vars: &Bound,
        states: &[Var],
        mask_pos: usize,
    ) -> Result<HeadOutput> {
        let cfg = &self.config;
        let pooled_in = match cfg.variant {
            Variant::NoAttentionNoPrompt => {
                let top = *states
                    .last()
                    .ok_or_else(|| Error::Shape("empty hidden stack".into()))?;
                g.select_rows(top, &[0])
            }
            _ => {
                check_range(cfg.layers, states.len() - 1)?;
                let rows = g.value(states[0]).rows();
                if mask_pos >= rows {
                    return Err(Error::OutOfRange(format!(
                        "mask position {mask_pos} >= sequence length {rows}"
                    )));
                }
                let picked: Vec<Var> = cfg
                    .layers
                    .layers()
                    .map(|l| g.select_rows(states[l], &[mask_pos]))
                    .collect();
                if picked.len() == 1 {
                    picked[0]
                } else {
                    g.concat_rows(&picked)
                }
            }
        };
        self.pool_and_classify(g, vars, pooled_in)
    }

    /// Head stages after feature selection; `rows` is `K x d_model`.
    pub fn pool_and_classify<'a>(
        &'a self,
        g: &mut Graph<'a>,
        vars: &Bound,
        rows: Var,
    ) -> Result<HeadOutput> {
        let lay = &self.layout;
        let (pooled, attention) = match self.config.variant {
            Variant::Full | Variant::WithBilstm => {
                let rows = if self.config.variant == Variant::WithBilstm {
                    self.bilstm_graph(g, vars, rows)
                } else {
                    rows
                };
                let keys = match lay.projection {
                    Some((w, b)) => g.linear(rows, vars.var(w), vars.var(b)),
                    None => rows,
                };
                let ctx = vars.var(lay.context.expect("attention head has a context vector"));
                let pooled = g.attend_pool(rows, keys, ctx);
                (pooled, Some(pooled))
            }
            Variant::NoAttention | Variant::NoAttentionNoPrompt => {
                let mean = g.mean_rows(rows);
                let (w, b) = lay.fc.expect("fc head has fc weights");
                (g.linear(mean, vars.var(w), vars.var(b)), None)
            }
        };
        let act = g.relu(pooled);
        let logits = g.matmul_t(act, vars.var(lay.classifier_weight));
        let logits = g.add_row(logits, vars.var(lay.classifier_bias));
        Ok(HeadOutput { logits, attention })
    }

    fn bilstm_graph<'a>(&'a self, g: &mut Graph<'a>, vars: &Bound, rows: Var) -> Var {
        let k = g.value(rows).rows();
        let hidden = self.config.d_model;
        let mut inputs: Vec<Var> = (0..k).map(|t| g.select_rows(rows, &[t])).collect();
        for dirs in &self.layout.lstm {
            let fwd = lstm_direction(g, vars, &dirs[0], &inputs, hidden, false);
            let bwd = lstm_direction(g, vars, &dirs[1], &inputs, hidden, true);
            inputs = fwd
                .into_iter()
                .zip(bwd)
                .map(|(f, b)| g.concat_cols(&[f, b]))
                .collect();
        }
        g.concat_rows(&inputs)
    }
}

fn lstm_direction<'a>(
    g: &mut Graph<'a>,
    vars: &Bound,
    dir: &LstmDirection,
    inputs: &[Var],
    hidden: usize,
    reverse: bool,
) -> Vec<Var> {
    let mut h = g.constant(Tensor::zeros(1, hidden));
    let mut c = g.constant(Tensor::zeros(1, hidden));
    let mut out = vec![h; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        let xi = g.matmul_t(inputs[t], vars.var(dir.w_ih));
        let xi = g.add_row(xi, vars.var(dir.b_ih));
        let hh = g.matmul_t(h, vars.var(dir.w_hh));
        let hh = g.add_row(hh, vars.var(dir.b_hh));
        let gates = g.add(xi, hh);
        let i = g.slice_cols(gates, 0, hidden);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, hidden, hidden);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * hidden, hidden);
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * hidden, hidden);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        c = g.add(keep, write);
        let tc = g.tanh(c);
        h = g.mul(o, tc);
        out[t] = h;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub logits: Var,
    /// Pooling node for attention variants; read weights with
    /// [`Graph::attention`].
    pub attention: Option<Var>,
}

fn check_range(range: LayerRange, n_layers: usize) -> Result<()> {
    if range.end > n_layers {
        return Err(Error::OutOfRange(format!(
            "layer range {range} exceeds encoder depth {n_layers}"
        )));
    }
    Ok(())
}

/// `rows[k] = states[range.start + k][mask_pos]`.
pub fn extract_knowledge(
    stack: &HiddenStack,
    mask_pos: usize,
    range: LayerRange,
) -> Result<KnowledgeFeatures> {
    if range.start > range.end {
        return Err(Error::Config(format!("empty layer range {range}")));
    }
    check_range(range, stack.n_layers())?;
    if mask_pos >= stack.valid_length {
        return Err(Error::OutOfRange(format!(
            "mask position {mask_pos} >= valid length {}",
            stack.valid_length
        )));
    }
    let d = stack.states[0].cols();
    let mut data = Vec::with_capacity(range.len() * d);
    for l in range.layers() {
        data.extend_from_slice(stack.states[l].row(mask_pos));
    }
    Ok(KnowledgeFeatures {
        rows: Tensor::from_vec(range.len(), d, data),
        layer_ids: range.layers().collect(),
    })
}

/// Raw attention scores `tanh(key_i) · context`, where keys are the rows
/// themselves or their projection.
pub fn attention_scores(head: &HeadParams, k: &KnowledgeFeatures) -> Result<Vec<f64>> {
    let ctx = head
        .context_vector()
        .ok_or_else(|| Error::Config(format!("variant {} has no attention", head.variant())))?;
    let keys = keys_for(head, &k.rows)?;
    Ok((0..keys.rows())
        .map(|i| dot(&keys.row(i).iter().map(|v| v.tanh()).collect::<Vec<_>>(), ctx))
        .collect())
}

fn keys_for(head: &HeadParams, rows: &Tensor) -> Result<Tensor> {
    let width = head.config.pooled_width();
    if rows.cols() != width || rows.rows() == 0 {
        return Err(Error::Shape(format!(
            "features are {}x{}, head expects K x {width}",
            rows.rows(),
            rows.cols()
        )));
    }
    Ok(match head.layout.projection {
        Some((w, b)) => {
            let mut z = rows.matmul(head.store.get(w));
            let bias = head.store.get(b);
            for r in 0..z.rows() {
                for (o, &bv) in z.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
            z
        }
        None => rows.clone(),
    })
}

/// Softmax-weighted pooling of the raw rows.
pub fn attend(head: &HeadParams, k: &KnowledgeFeatures) -> Result<Attention> {
    let ctx = head
        .context_vector()
        .ok_or_else(|| Error::Config(format!("variant {} has no attention", head.variant())))?;
    let keys = keys_for(head, &k.rows)?;
    let pool = attention_pool(&k.rows, &keys, ctx);
    Ok(Attention {
        alphas: pool.alphas,
        pooled: pool.pooled,
    })
}

/// `W · ReLU(pooled) + b`.
pub fn classify(head: &HeadParams, pooled: &[f64]) -> Result<Vec<f64>> {
    let w = head.classifier_weight();
    if pooled.len() != w.cols() {
        return Err(Error::Shape(format!(
            "pooled width {} != classifier width {}",
            pooled.len(),
            w.cols()
        )));
    }
    let act: Vec<f64> = pooled.iter().map(|v| v.max(0.0)).collect();
    Ok(head
        .classifier_bias()
        .iter()
        .enumerate()
        .map(|(c, &b)| dot(&act, w.row(c)) + b)
        .collect())
}

/// Index of the largest logit; the lowest index wins ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Runs the recurrent stage of a `with_bilstm` head on `K x d` features,
/// returning `K x 2d` rows.
pub fn recurrent_stage(head: &HeadParams, k: &KnowledgeFeatures) -> Result<KnowledgeFeatures> {
    if head.variant() != Variant::WithBilstm {
        return Err(Error::Config(format!(
            "variant {} has no recurrent stage",
            head.variant()
        )));
    }
    if k.rows.cols() != head.config.d_model {
        return Err(Error::Shape("features width != d_model".into()));
    }
    let mut g = Graph::new();
    let vars = head.store.bind(&mut g);
    let rows = g.constant(k.rows.clone());
    let out = head.bilstm_graph(&mut g, &vars, rows);
    Ok(KnowledgeFeatures {
        rows: g.value(out).clone(),
        layer_ids: k.layer_ids.clone(),
    })
}

/// Logits of the head's variant for one encoded sequence.
pub fn forward_variant(head: &HeadParams, stack: &HiddenStack, mask_pos: usize) -> Result<Vec<f64>> {
    if head.variant() != Variant::NoAttentionNoPrompt && mask_pos >= stack.valid_length {
        return Err(Error::OutOfRange(format!(
            "mask position {mask_pos} >= valid length {}",
            stack.valid_length
        )));
    }
    let mut g = Graph::new();
    let vars = head.store.bind(&mut g);
    let states: Vec<Var> = stack
        .states
        .iter()
        .map(|s| g.constant(s.clone()))
        .collect();
    let out = head.forward_graph(&mut g, &vars, &states, mask_pos)?;
    Ok(g.value(out.logits).data().to_vec())
}

/// Softmax used for the attention weights, exposed for inspection.
pub fn attention_softmax(scores: &[f64]) -> Vec<f64> {
    softmax(scores)
}
