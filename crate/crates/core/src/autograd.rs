//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Parameter tensors are borrowed rather than copied, so building a graph
//! per example stays cheap even with large embedding tables. Calling
//! [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar loss with respect to every recorded node.

use crate::tensor::{dot, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        gamma: Var,
        x: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    AttendPool {
        values: Var,
        keys: Var,
        context: Var,
        pool: AttentionPool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    // `beta` of a layer norm is folded in as a separate add so the op above
    // only needs the scale parameter.
    LayerNormShift(Var, Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Result of tanh-scored softmax pooling over a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPool {
    /// `tanh` of the key rows.
    pub u: Tensor,
    pub scores: Vec<f64>,
    pub alphas: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `u_i = tanh(keys_i)`, `score_i = u_i · context`, `alpha = softmax(score)`,
/// `pooled = Σ alpha_i values_i`.
pub fn attention_pool(values: &Tensor, keys: &Tensor, context: &[f64]) -> AttentionPool {
    assert_eq!(values.rows(), keys.rows(), "values/keys row count differs");
    assert_eq!(keys.cols(), context.len(), "context width differs from keys");
    let u = keys.map(f64::tanh);
    let scores: Vec<f64> = (0..u.rows()).map(|i| dot(u.row(i), context)).collect();
    let alphas = softmax(&scores);
    let mut pooled = vec![0.0; values.cols()];
    for (i, &a) in alphas.iter().enumerate() {
        for (p, &x) in pooled.iter_mut().zip(values.row(i)) {
            *p += a * x;
        }
    }
    AttentionPool {
        u,
        scores,
        alphas,
        pooled,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-row `(x - mean) / sqrt(var + eps)`; returns the normalized rows and
/// the per-row inverse standard deviations.
pub fn normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

/// Gradients of a scalar with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that borrows its value; gradients can be read back for it.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Attention weights recorded by an [`Graph::attend_pool`] node.
    pub fn attention(&self, v: Var) -> Option<&AttentionPool> {
        match &self.nodes[v.0].op {
            Op::AttendPool { pool, .. } => Some(pool),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "bias must be a row vector");
        assert_eq!(bias.cols(), self.value(a).cols(), "bias width mismatch");
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    /// `x · w + b` with `w` stored `in x out` and `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax where columns `>= key_valid` receive probability
    /// exactly zero.
    pub fn masked_softmax(&mut self, a: Var, key_valid: usize) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        assert!(key_valid >= 1 && key_valid <= cols, "key_valid out of range");
        let mut out = Tensor::zeros(x.rows(), cols);
        for r in 0..x.rows() {
            let probs = softmax(&x.row(r)[..key_valid]);
            out.row_mut(r)[..key_valid].copy_from_slice(&probs);
        }
        self.push(out, Op::MaskedSoftmax(a))
    }

    /// Layer normalization over each row with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xhat, inv_std) = normalize_rows(self.value(x));
        let g = self.value(gamma);
        assert_eq!(g.cols(), xhat.cols(), "layer norm width mismatch");
        let mut scaled = xhat.clone();
        for r in 0..scaled.rows() {
            for (o, &gv) in scaled.row_mut(r).iter_mut().zip(g.data()) {
                *o *= gv;
            }
        }
        let scaled = self.push(
            scaled,
            Op::LayerNorm {
                gamma,
                x,
                xhat,
                inv_std,
            },
        );
        let mut out = self.value(scaled).clone();
        let b = self.value(beta);
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::LayerNormShift(scaled, beta))
    }

    /// Row lookup into `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols height mismatch");
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
                offset += t.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.rows() as f64;
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / n);
        self.push(out, Op::MeanRows(x))
    }

    /// Tanh-scored softmax pooling: scores come from `keys`, the weighted
    /// sum is taken over `values`. `context` is a `1 x d_keys` row.
    pub fn attend_pool(&mut self, values: Var, keys: Var, context: Var) -> Var {
        let pool = attention_pool(
            self.value(values),
            self.value(keys),
            self.value(context).data(),
        );
        let out = Tensor::row_vector(pool.pooled.clone());
        self.push(
            out,
            Op::AttendPool {
                values,
                keys,
                context,
                pool,
            },
        )
    }

    /// Mean softmax cross-entropy of each logit row against its target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per logit row");
        let mut probs = Tensor::zeros(l.rows(), l.cols());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let p = softmax(l.row(r));
            loss -= p[t].max(f64::MIN_POSITIVE).ln();
            probs.row_mut(r).copy_from_slice(&p);
        }
        loss /= targets.len() as f64;
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) | Op::LayerNormShift(a, b) => {
                    accumulate(&mut grads, *b, column_sums(&g));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = zip_map(&g, bv, |gv, x| gv * x);
                    let db = zip_map(&g, av, |gv, x| gv * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Gelu(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| gv * gelu_grad(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, node.value.get(), |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, node.value.get(), |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::MaskedSoftmax(a) => {
                    let p = node.value.get();
                    let mut d = Tensor::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let inner = dot(pr, gr);
                        for ((dv, &pv), &gv) in d.row_mut(r).iter_mut().zip(pr).zip(gr) {
                            *dv = pv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    gamma,
                    x,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma);
                    let n = xhat.cols() as f64;
                    let mut dgamma = Tensor::zeros(1, xhat.cols());
                    let mut dx = Tensor::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        for ((dg, &gv), &xv) in dgamma.data_mut().iter_mut().zip(gr).zip(xr) {
                            *dg += gv * xv;
                        }
                        let dxhat: Vec<f64> =
                            gr.iter().zip(gm.data()).map(|(gv, gmv)| gv * gmv).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dot(&dxhat, xr);
                        let is = inv_std[r];
                        for ((o, &dh), &xv) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xr) {
                            *o = is / n * (n * dh - sum_d - xv * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &gv) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::SelectRows { x, idx } => {
                    let t = self.value(*x);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, &gv) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, p, Tensor::from_vec(rows, cols, slice));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let mut d = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            d.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(&mut grads, p, d);
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let t = self.value(*x);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::MeanRows(x) => {
                    let t = self.value(*x);
                    let n = t.rows() as f64;
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for r in 0..t.rows() {
                        for (o, &gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                            *o = gv / n;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::AttendPool {
                    values,
                    keys,
                    context,
                    pool,
                } => {
                    let vals = self.value(*values);
                    let ctx = self.value(*context).data();
                    let gp = g.data();
                    let k = vals.rows();
                    let dalpha: Vec<f64> = (0..k).map(|i| dot(gp, vals.row(i))).collect();
                    let mean = dot(&pool.alphas, &dalpha);
                    let dscore: Vec<f64> = pool
                        .alphas
                        .iter()
                        .zip(&dalpha)
                        .map(|(a, da)| a * (da - mean))
                        .collect();
                    let mut dvals = Tensor::zeros(k, vals.cols());
                    let mut dkeys = Tensor::zeros(k, pool.u.cols());
                    let mut dctx = Tensor::zeros(1, ctx.len());
                    for i in 0..k {
                        for (o, &gv) in dvals.row_mut(i).iter_mut().zip(gp) {
                            *o = pool.alphas[i] * gv;
                        }
                        let ur = pool.u.row(i);
                        for ((o, &uv), &cv) in dkeys.row_mut(i).iter_mut().zip(ur).zip(ctx) {
                            *o = dscore[i] * cv * (1.0 - uv * uv);
                        }
                        for (o, &uv) in dctx.data_mut().iter_mut().zip(ur) {
                            *o += dscore[i] * uv;
                        }
                    }
                    accumulate(&mut grads, *values, dvals);
                    accumulate(&mut grads, *keys, dkeys);
                    accumulate(&mut grads, *context, dctx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.get(0, 0) / targets.len() as f64;
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = d.row_mut(r);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_identity() {
        // 0.5 * ||p||^2 -> grad = p
        let p = Tensor::row_vector(vec![1.5, -2.0, 0.25]);
        let mut g = Graph::new();
        let pv = g.param(&p);
        let sq = g.mul(pv, pv);
        let half = g.scale(sq, 0.5);
        let ones = g.constant(Tensor::full(3, 1, 1.0));
        let loss = g.matmul(half, ones);
        let grads = g.backward(loss);
        assert_eq!(grads.get(pv).unwrap(), &p);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let logits = Tensor::row_vector(vec![0.3, -1.2, 2.0, 0.0]);
        let mut g = Graph::new();
        let l = g.param(&logits);
        let loss = g.cross_entropy(l, &[2]);
        let grads = g.backward(loss);
        let mut expected = softmax(logits.data());
        expected[2] -= 1.0;
        for (a, b) in grads.get(l).unwrap().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 100.0], vec![0.0, 0.0, -5.0]]);
        let mut g = Graph::new();
        let v = g.constant(x);
        let p = g.masked_softmax(v, 2);
        let out = g.value(p);
        assert_eq!(out.get(0, 2), 0.0);
        assert_eq!(out.get(1, 2), 0.0);
        assert!((out.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-3.0, 0.0, 0.5, 9.0]]);
        let (xhat, _) = normalize_rows(&x);
        for r in 0..2 {
            let row = xhat.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
