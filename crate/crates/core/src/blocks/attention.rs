//! Multi-head scaled dot-product attention and the decoder's cross-attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, CustomOp, ParamId, ParamStore, Tape, Tensor, Var};

/// Attention output plus the `[B, H, Lq, Lk]` probability tensor.
pub struct AttentionOutput {
    pub output: Tensor,
    pub weights: Vec<f64>,
}

fn dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, lq, d) = q.dims3("attention")?;
    let (bk, lk, dk) = k.dims3("attention")?;
    if bk != b || dk != d || v.shape() != k.shape() || lk == 0 {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::contract(format!("width {d} is not divisible by {heads} heads")));
    }
    Ok((b, lq, lk, d))
}

/// `softmax(Q Kᵀ / √d_h) V` per head; inputs are `[B, L, D]`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<AttentionOutput> {
    let (b, lq, lk, d) = dims(q, k, v, heads)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; b * lq * d];
    let mut weights = vec![0.0; b * heads * lq * lk];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for bi in 0..b {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..lq {
                let qrow = &qd[(bi * lq + i) * d + col..][..dh];
                let w = &mut weights[((bi * heads + h) * lq + i) * lk..][..lk];
                let mut max = f64::NEG_INFINITY;
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = dot(qrow, &kd[(bi * lk + j) * d + col..][..dh]) * scale;
                    max = max.max(*wj);
                }
                let mut z = 0.0;
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    z += *wj;
                }
                let orow = &mut out[(bi * lq + i) * d + col..][..dh];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj /= z;
                    axpy(*wj, &vd[(bi * lk + j) * d + col..][..dh], orow);
                }
            }
        }
    }
    Ok(AttentionOutput {
        output: Tensor::from_parts(vec![b, lq, d], out),
        weights,
    })
}

struct AttentionOp {
    heads: usize,
    weights: Vec<f64>,
}

impl CustomOp for AttentionOp {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let heads = self.heads;
        let (b, lq, lk, d) = dims(q, k, v, heads)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), grad.data());
        let mut dq = vec![0.0; q.numel()];
        let mut dk = vec![0.0; k.numel()];
        let mut dv = vec![0.0; v.numel()];
        let mut ds = vec![0.0; lk];
        for bi in 0..b {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..lq {
                    let p = &self.weights[((bi * heads + h) * lq + i) * lk..][..lk];
                    let go = &gd[(bi * lq + i) * d + col..][..dh];
                    let mut mean = 0.0;
                    for j in 0..lk {
                        let voff = (bi * lk + j) * d + col;
                        let dp = dot(go, &vd[voff..voff + dh]);
                        axpy(p[j], go, &mut dv[voff..voff + dh]);
                        ds[j] = dp;
                        mean += p[j] * dp;
                    }
                    let qoff = (bi * lq + i) * d + col;
                    for j in 0..lk {
                        let s = p[j] * (ds[j] - mean) * scale;
                        let koff = (bi * lk + j) * d + col;
                        axpy(s, &kd[koff..koff + dh], &mut dq[qoff..qoff + dh]);
                        axpy(s, &qd[qoff..qoff + dh], &mut dk[koff..koff + dh]);
                    }
                }
            }
        }
        Ok(vec![
            Tensor::from_parts(q.shape().to_vec(), dq),
            Tensor::from_parts(k.shape().to_vec(), dk),
            Tensor::from_parts(v.shape().to_vec(), dv),
        ])
    }
}

pub fn attention_on_tape(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let AttentionOutput { output, weights } =
        multi_head_attention(tape.value(q), tape.value(k), tape.value(v), heads)?;
    tape.custom(&[q, k, v], output, Box::new(AttentionOp { heads, weights }))
}

/// Single-head `softmax(X Xᵀ / √d) X` over `[L, d]`, materializing the full
/// `L × L` score matrix. Used as the quadratic baseline in benchmarks.
///
/// Returns `None` when the score matrix cannot be allocated.
pub fn reference_self_attention(x: &Tensor) -> Result<Option<Tensor>> {
    if x.rank() != 2 {
        return Err(Error::contract(format!("reference attention expects [L, d], got {:?}", x.shape())));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let mut scores: Vec<f64> = Vec::new();
    if scores.try_reserve_exact(l * l).is_err() {
        return Ok(None);
    }
    scores.resize(l * l, 0.0);
    let scale = 1.0 / (d as f64).sqrt();
    let xd = x.data();
    for i in 0..l {
        let qi = &xd[i * d..(i + 1) * d];
        let row = &mut scores[i * l..(i + 1) * l];
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(qi, &xd[j * d..(j + 1) * d]) * scale;
        }
    }
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        let row = &mut scores[i * l..(i + 1) * l];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let orow = &mut out[i * d..(i + 1) * d];
        for (j, s) in row.iter().enumerate() {
            axpy(s / z, &xd[j * d..(j + 1) * d], orow);
        }
    }
    Ok(Some(Tensor::from_parts(vec![l, d], out)))
}

/// Decoder-to-encoder attention with bias-free projections.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, n_heads: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut proj = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::uniform(&[d, d], -bound, bound, rng), true);
        Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            n_heads,
        }
    }

    /// `queries: [B, Lq, D]`, `memory: [B, Lk, D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, memory: Var) -> Result<Var> {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(memory, wk)?;
        let v = tape.matmul(memory, wv)?;
        let ctx = attention_on_tape(tape, q, k, v, self.n_heads)?;
        tape.matmul(ctx, wo)
    }
}

/// Untraced cross-attention over `[L, D]` or `[B, L, D]` inputs.
pub fn cross_attention_forward(q_in: &Tensor, enc: &Tensor, ca: &CrossAttention, store: &ParamStore) -> Result<Tensor> {
    let (q3, squeeze) = super::batched(q_in)?;
    let (e3, _) = super::batched(enc)?;
    let mut tape = Tape::new();
    let q = tape.leaf(q3)?;
    let e = tape.leaf(e3)?;
    let out = ca.forward(&mut tape, store, q, e)?;
    super::unbatch(tape.value(out), squeeze)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_rows_sum_to_one_and_uniform_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 7, 8], 1.0, &mut rng);
        let att = multi_head_attention(&q, &k, &k, 2).unwrap();
        for row in att.weights.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let same = Tensor::from_fn(&[1, 6, 8], |i| (i % 8) as f64 * 0.3);
        let att = multi_head_attention(&q.reshape(&[1, 10, 8]).unwrap(), &same, &same, 4).unwrap();
        assert!(att.weights.iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn matches_naive_per_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (lq, lk, d, heads) = (4, 6, 8, 2);
        let q = Tensor::randn(&[1, lq, d], 1.0, &mut rng);
        let k = Tensor::randn(&[1, lk, d], 1.0, &mut rng);
        let v = Tensor::randn(&[1, lk, d], 1.0, &mut rng);
        let got = multi_head_attention(&q, &k, &v, heads).unwrap().output;
        let dh = d / heads;
        for h in 0..heads {
            for i in 0..lq {
                let s: Vec<f64> = (0..lk)
                    .map(|j| (0..dh).map(|c| q.at(&[0, i, h * dh + c]) * k.at(&[0, j, h * dh + c])).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                for c in 0..dh {
                    let o: f64 = (0..lk).map(|j| s[j].exp() / z * v.at(&[0, j, h * dh + c])).sum();
                    assert!((got.at(&[0, i, h * dh + c]) - o).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, "ca", 8, 4, &mut rng);
        let queries = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let enc = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let out = cross_attention_forward(&queries, &enc, &ca, &store).unwrap();
        let expect = enc.matmul(store.get(ca.wv)).unwrap().matmul(store.get(ca.wo)).unwrap();
        for t in 0..5 {
            for (a, b) in out.row(t).iter().zip(expect.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_attention_agrees_with_multi_head_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[9, 4], 1.0, &mut rng);
        let r = reference_self_attention(&x).unwrap().unwrap();
        let x3 = x.reshape(&[1, 9, 4]).unwrap();
        let m = multi_head_attention(&x3, &x3, &x3, 1).unwrap().output;
        assert!(r.max_abs_diff(&m.reshape(&[9, 4]).unwrap()).unwrap() < 1e-12);
    }
}
