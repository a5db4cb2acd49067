//! Reverse-mode differentiation over whole-tensor operations.
//!
//! Every operation computes its value eagerly and records what its backward
//! rule needs. [`Tape::backward`] walks the record once, newest first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm_nt, gemm_tn, sigmoid};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A fused operation whose forward ran outside the tape and whose backward
/// rule is supplied by the implementor.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    ReverseTime(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

enum Mode {
    Eval,
    Train(ChaCha8Rng),
}

/// Single-owner record of a forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape in deterministic mode: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Eval,
        }
    }

    /// A tape in training mode; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Train(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train(_))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, stage: &str) -> Result<Var> {
        value.ensure_finite(stage)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input that can receive gradients (see [`Gradients::wrt`]).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s), "scale")
    }

    /// Adds a `[C]` bias to every row of a `[.., C]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || bv.numel() != xv.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::AddBias(x, bias), "add_bias")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), "silu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), "sigmoid")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softplus();
        self.push(value, Op::Softplus(x), "softplus")
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout; the identity in deterministic mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} outside [0, 1)")));
        }
        let rng = match &mut self.mode {
            Mode::Train(rng) if p > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::Dropout { x, mask }, "dropout")
    }

    /// Gathers rows of a `[V, D]` table; output shape is `lead ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(Error::contract(format!(
                "embedding: table {:?}, {} ids for lead shape {lead:?}",
                t.shape(),
                ids.len()
            )));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::contract(format!("token id {id} outside vocabulary of {v}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let value = Tensor::from_parts(shape, data);
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + width > c {
            return Err(Error::contract(format!(
                "slice {start}..{} of last axis with extent {c}",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(xv.rows() * width);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::from_parts(shape, data);
        self.push(value, Op::SliceLast { x, start }, "slice_last")
    }

    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).reverse_time()?;
        self.push(value, Op::ReverseTime(x), "reverse_time")
    }

    /// Picks rows (of the flattened leading axes) into a `[k, C]` tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= xv.rows() {
                return Err(Error::contract(format!("row {r} of {}", xv.rows())));
            }
            data.extend_from_slice(xv.row(r));
        }
        let value = Tensor::from_parts(vec![rows.len(), c], data);
        self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            "select_rows",
        )
    }

    /// Mean softmax cross-entropy of `[M, V]` logits against `M` class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, v) = (lv.rows(), lv.cols());
        if m != targets.len() || m == 0 {
            return Err(Error::contract(format!(
                "cross_entropy: {m} rows vs {} targets",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::contract(format!("target {target} outside {v} classes")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            loss += -(row[target] - max - z.ln());
        }
        let value = Tensor::scalar(loss / m as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), "sum")
    }

    /// `Σ x ⊙ weights` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let s = self.value(x).mul(&weights)?.sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, "weighted_sum")
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let stage = op.name();
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            stage,
        )
    }

    /// Gradients of a scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                    accumulate(&mut grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.scale(*s)),
                Op::AddBias(x, bias) => {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::from_parts(vec![c], db));
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Silu(x) => {
                    let dx = self.value(*x).zip_map(&g, "silu'", |v, gv| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.zip_map(&g, "sigmoid'", |s, gv| gv * s * (1.0 - s))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softplus(x) => {
                    let dx = self.value(*x).zip_map(&g, "softplus'", |v, gv| gv * sigmoid(v))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gm = self.value(*gamma).data();
                    let c = gm.len();
                    let rows = g.rows();
                    let mut dx = vec![0.0; g.numel()];
                    let mut dg = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                            dxhat[j] = gr[j] * gm[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                    let gshape = self.value(*gamma).shape().to_vec();
                    accumulate(&mut grads, *gamma, Tensor::from_parts(gshape.clone(), dg));
                    accumulate(&mut grads, *beta, Tensor::from_parts(gshape, dbeta));
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = vec![0.0; tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (dst, src) in dt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt));
                }
                Op::SliceLast { x, start } => {
                    let xv = self.value(*x);
                    let (c, w) = (xv.cols(), g.cols());
                    let mut dx = vec![0.0; xv.numel()];
                    for r in 0..xv.rows() {
                        dx[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::ReverseTime(x) => accumulate(&mut grads, *x, g.reverse_time()?),
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.numel()];
                    for (k, &r) in rows.iter().enumerate() {
                        for (dst, src) in dx[r * c..(r + 1) * c].iter_mut().zip(g.row(k)) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let (m, v) = (lv.rows(), lv.cols());
                    let scale = g.data()[0] / m as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * v + t] -= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::from_parts(lv.shape().to_vec(), dl));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), g.data()[0]));
                }
                Op::WeightedSum { x, weights } => {
                    accumulate(&mut grads, *x, weights.scale(g.data()[0]));
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let dins = op.backward(&ins, &node.value, &g)?;
                    if dins.len() != inputs.len() {
                        return Err(Error::contract(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            dins.len(),
                            inputs.len()
                        )));
                    }
                    for (v, d) in inputs.iter().zip(dins) {
                        accumulate(&mut grads, *v, d);
                    }
                }
            }
            grads[i] = Some(g);
        }

        let mut params: Vec<Option<Tensor>> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                if params.len() <= id.0 {
                    params.resize(id.0 + 1, None);
                }
                match &mut params[id.0] {
                    Some(acc) => add_into(acc, g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    debug_assert_eq!(acc.shape(), g.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => add_into(acc, &g),
        slot => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, `None` if it does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Summed over every time `id` was placed on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// One gradient per stored parameter; untouched parameters get exact zeros.
    pub fn into_param_grads(mut self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, e)| {
                self.params
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(e.value.shape()))
            })
            .collect()
    }
}
