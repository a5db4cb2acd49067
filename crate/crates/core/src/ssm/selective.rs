//! Sequence-level forward and backward passes of the selective SSM.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{dot, gemm_nn, gemm_nt, gemm_tn, sigmoid, softplus, CustomOp, Tape, Tensor, Var};
use crate::ssm::{ScanMode, Selection, SsmParams};

/// Saved per-sequence intermediates needed by the backward pass.
#[derive(Clone, Debug)]
struct SeqCache {
    /// Pre-activation `W_Δ x_t + bias`, length `L`.
    s: Vec<f64>,
    delta: Vec<f64>,
    /// `[L, N]`
    b: Vec<f64>,
    abar: Vec<f64>,
    /// `[D, L, N]`: channel-major latent states.
    h: Vec<f64>,
}

/// Forward context kept by [`SelectiveSsm`] for its backward pass.
#[derive(Clone, Debug)]
pub struct SsmContext {
    x: Tensor,
    caches: Vec<SeqCache>,
}

/// Gradients of a loss with respect to the SSM input and every parameter.
#[derive(Clone, Debug)]
pub struct SsmGrads {
    pub x: Tensor,
    pub a_diag: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub w_delta: Tensor,
    pub delta_bias: Tensor,
}

/// A selective SSM bound to its parameters and scan strategy.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub params: SsmParams,
    pub scan: ScanMode,
    saved: Option<SsmContext>,
}

/// Untraced forward over `x` of shape `[L, D]` or `[B, L, D]`.
pub fn ssm_forward(x: &Tensor, p: &SsmParams, scan: ScanMode) -> Result<Tensor> {
    let (y, _) = forward_impl(x, p, scan)?;
    Ok(y)
}

impl SelectiveSsm {
    pub fn new(params: SsmParams, scan: ScanMode) -> Self {
        Self {
            params,
            scan,
            saved: None,
        }
    }

    /// Runs the forward pass and keeps the context for [`Self::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, ctx) = forward_impl(x, &self.params, self.scan)?;
        self.saved = Some(ctx);
        Ok(y)
    }

    /// Backward through the most recent [`Self::forward`].
    pub fn backward(&self, upstream: &Tensor) -> Result<SsmGrads> {
        let ctx = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::contract("ssm backward called without a traced forward pass"))?;
        backward_impl(ctx, &self.params, self.scan, upstream)
    }
}

fn as_batched(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [l, d] => Ok((1, l, d)),
        [b, l, d] => Ok((b, l, d)),
        _ => Err(Error::contract(format!(
            "ssm input must be [L, D] or [B, L, D], got {:?}",
            x.shape()
        ))),
    }
}

/// Rows the selection projections read: `x` itself, or a column of ones.
fn selection_source(x: &[f64], l: usize, selection: Selection) -> std::borrow::Cow<'_, [f64]> {
    match selection {
        Selection::Selective => std::borrow::Cow::Borrowed(x),
        Selection::Fixed => std::borrow::Cow::Owned(vec![1.0; l]),
    }
}

fn forward_impl(x: &Tensor, p: &SsmParams, scan: ScanMode) -> Result<(Tensor, SsmContext)> {
    let (batch, l, d) = as_batched(x)?;
    p.validate(d)?;
    x.ensure_finite("ssm.input")?;
    let per_seq: Vec<Result<(Vec<f64>, SeqCache)>> = x
        .data()
        .par_chunks(l * d)
        .map(|xs| forward_seq(xs, l, d, p, scan))
        .collect();
    let mut y = Vec::with_capacity(batch * l * d);
    let mut caches = Vec::with_capacity(batch);
    for r in per_seq {
        let (ys, cache) = r?;
        y.extend_from_slice(&ys);
        caches.push(cache);
    }
    let ctx = SsmContext {
        x: x.clone(),
        caches,
    };
    Ok((Tensor::from_parts(x.shape().to_vec(), y), ctx))
}

fn stage_check(values: &[f64], stage: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.to_string(),
        })
    }
}

fn forward_seq(x: &[f64], l: usize, d: usize, p: &SsmParams, scan: ScanMode) -> Result<(Vec<f64>, SeqCache)> {
    let n = p.n_state();
    let sw = p.source_width();
    let src = selection_source(x, l, p.selection);

    let mut b = vec![0.0; l * n];
    let mut c = vec![0.0; l * n];
    let mut s = vec![p.bias(); l];
    gemm_nt(&src, p.w_b.data(), &mut b, l, sw, n);
    gemm_nt(&src, p.w_c.data(), &mut c, l, sw, n);
    gemm_nt(&src, p.w_delta.data(), &mut s, l, sw, 1);
    stage_check(&b, "ssm.select")?;
    stage_check(&c, "ssm.select")?;
    stage_check(&s, "ssm.select")?;

    let a = p.a_diag.data();
    let delta: Vec<f64> = s.iter().map(|&v| softplus(v)).collect();
    let mut abar = vec![0.0; l * n];
    let mut bd = vec![0.0; l * n];
    for t in 0..l {
        if !(delta[t] > 0.0) {
            return Err(Error::NonFinite {
                stage: "ssm.discretize (step size underflow)".into(),
            });
        }
        for i in 0..n {
            abar[t * n + i] = (delta[t] * a[i]).exp();
            bd[t * n + i] = delta[t] * b[t * n + i];
        }
    }
    stage_check(&abar, "ssm.discretize")?;

    let mut h = vec![0.0; d * l * n];
    let mut y = vec![0.0; l * d];
    if scan == ScanMode::Sequential {
        // Load, recurrence and readout fused into one sweep per channel.
        for ch in 0..d {
            let hd = &mut h[ch * l * n..(ch + 1) * l * n];
            let mut prev = vec![0.0; n];
            for t in 0..l {
                let xv = x[t * d + ch];
                let ht = &mut hd[t * n..(t + 1) * n];
                let (ab, bt) = (&abar[t * n..(t + 1) * n], &bd[t * n..(t + 1) * n]);
                for i in 0..n {
                    ht[i] = ab[i] * prev[i] + bt[i] * xv;
                }
                prev.copy_from_slice(ht);
                y[t * d + ch] = dot(&c[t * n..(t + 1) * n], ht);
            }
        }
    } else {
        let mut load = vec![0.0; l * n];
        for ch in 0..d {
            for t in 0..l {
                let xv = x[t * d + ch];
                for i in 0..n {
                    load[t * n + i] = bd[t * n + i] * xv;
                }
            }
            let hd = &mut h[ch * l * n..(ch + 1) * l * n];
            scan.run(&abar, &load, n, hd);
            for t in 0..l {
                y[t * d + ch] = dot(&c[t * n..(t + 1) * n], &hd[t * n..(t + 1) * n]);
            }
        }
    }
    stage_check(&h, "ssm.scan")?;
    stage_check(&y, "ssm.readout")?;
    Ok((
        y,
        SeqCache {
            s,
            delta,
            b,
            abar,
            h,
        },
    ))
}

struct SeqGrads {
    x: Vec<f64>,
    a: Vec<f64>,
    w_b: Vec<f64>,
    w_c: Vec<f64>,
    w_delta: Vec<f64>,
    bias: f64,
}

fn backward_impl(ctx: &SsmContext, p: &SsmParams, scan: ScanMode, upstream: &Tensor) -> Result<SsmGrads> {
    if upstream.shape() != ctx.x.shape() {
        return Err(Error::Shape {
            op: "ssm_backward",
            lhs: upstream.shape().to_vec(),
            rhs: ctx.x.shape().to_vec(),
        });
    }
    let (_, l, d) = as_batched(&ctx.x)?;
    let per_seq: Vec<Result<SeqGrads>> = ctx
        .x
        .data()
        .par_chunks(l * d)
        .zip(upstream.data().par_chunks(l * d))
        .zip(ctx.caches.par_iter())
        .map(|((xs, dy), cache)| backward_seq(xs, dy, cache, l, d, p, scan))
        .collect();

    let n = p.n_state();
    let sw = p.source_width();
    let mut dx = Vec::with_capacity(ctx.x.numel());
    let mut da = vec![0.0; n];
    let mut dwb = vec![0.0; n * sw];
    let mut dwc = vec![0.0; n * sw];
    let mut dwd = vec![0.0; sw];
    let mut dbias = 0.0;
    for g in per_seq {
        let g = g?;
        dx.extend_from_slice(&g.x);
        add_assign(&mut da, &g.a);
        add_assign(&mut dwb, &g.w_b);
        add_assign(&mut dwc, &g.w_c);
        add_assign(&mut dwd, &g.w_delta);
        dbias += g.bias;
    }
    let grads = SsmGrads {
        x: Tensor::from_parts(ctx.x.shape().to_vec(), dx),
        a_diag: Tensor::from_parts(vec![n], da),
        w_b: Tensor::from_parts(vec![n, sw], dwb),
        w_c: Tensor::from_parts(vec![n, sw], dwc),
        w_delta: Tensor::from_parts(vec![1, sw], dwd),
        delta_bias: Tensor::from_parts(vec![1], vec![dbias]),
    };
    for (name, t) in [
        ("x", &grads.x),
        ("a_diag", &grads.a_diag),
        ("w_b", &grads.w_b),
        ("w_c", &grads.w_c),
        ("w_delta", &grads.w_delta),
        ("delta_bias", &grads.delta_bias),
    ] {
        t.ensure_finite(&format!("ssm.backward.{name}"))?;
    }
    Ok(grads)
}

fn add_assign(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn backward_seq(
    x: &[f64],
    dy: &[f64],
    cache: &SeqCache,
    l: usize,
    d: usize,
    p: &SsmParams,
    scan: ScanMode,
) -> Result<SeqGrads> {
    let n = p.n_state();
    let sw = p.source_width();
    let a = p.a_diag.data();
    let src = selection_source(x, l, p.selection);
    let SeqCache {
        s,
        delta,
        b,
        abar,
        h,
    } = cache;

    // c is recomputed rather than stored.
    let mut c = vec![0.0; l * n];
    gemm_nt(&src, p.w_c.data(), &mut c, l, sw, n);
    let bd: Vec<f64> = (0..l * n).map(|k| delta[k / n] * b[k]).collect();

    let mut dx = vec![0.0; l * d];
    let mut dc = vec![0.0; l * n];
    let mut dabar = vec![0.0; l * n];
    let mut dbd = vec![0.0; l * n];
    if scan == ScanMode::Sequential {
        // Reverse sweep: g_t = dy_t c_t + ā_{t+1} ⊙ g_{t+1}.
        let mut g = vec![0.0; n];
        for ch in 0..d {
            let hd = &h[ch * l * n..(ch + 1) * l * n];
            g.fill(0.0);
            for t in (0..l).rev() {
                let up = dy[t * d + ch];
                let xv = x[t * d + ch];
                let k = t * n;
                if t + 1 < l {
                    let an = &abar[k + n..k + 2 * n];
                    for i in 0..n {
                        g[i] = up * c[k + i] + an[i] * g[i];
                    }
                } else {
                    for i in 0..n {
                        g[i] = up * c[k + i];
                    }
                }
                for i in 0..n {
                    dc[k + i] += up * hd[k + i];
                    dbd[k + i] += g[i] * xv;
                }
                if t > 0 {
                    let hp = &hd[k - n..k];
                    for i in 0..n {
                        dabar[k + i] += g[i] * hp[i];
                    }
                }
                dx[t * d + ch] += dot(&g, &bd[k..k + n]);
            }
        }
    } else {
        adjoint_scan(AdjointInputs { x, dy, c: &c, bd: &bd, abar, h, l, d, n }, scan, &mut dx, &mut dc, &mut dabar, &mut dbd);
    }

    // Through discretization and softplus.
    let mut db = vec![0.0; l * n];
    let mut da = vec![0.0; n];
    let mut ds = vec![0.0; l];
    for t in 0..l {
        let mut ddelta = 0.0;
        for i in 0..n {
            let k = t * n + i;
            ddelta += dbd[k] * b[k];
            let dexp = dabar[k] * abar[k];
            ddelta += dexp * a[i];
            da[i] += dexp * delta[t];
            db[k] = dbd[k] * delta[t];
        }
        ds[t] = ddelta * sigmoid(s[t]);
    }

    // Through the selection projections.
    let mut dwb = vec![0.0; n * sw];
    let mut dwc = vec![0.0; n * sw];
    let mut dwd = vec![0.0; sw];
    gemm_tn(&db, &src, &mut dwb, l, n, sw);
    gemm_tn(&dc, &src, &mut dwc, l, n, sw);
    gemm_tn(&ds, &src, &mut dwd, l, 1, sw);
    if p.selection == Selection::Selective {
        gemm_nn(&db, p.w_b.data(), &mut dx, l, n, d);
        gemm_nn(&dc, p.w_c.data(), &mut dx, l, n, d);
        gemm_nn(&ds, p.w_delta.data(), &mut dx, l, 1, d);
    }
    Ok(SeqGrads {
        x: dx,
        a: da,
        w_b: dwb,
        w_c: dwc,
        w_delta: dwd,
        bias: ds.iter().sum(),
    })
}

struct AdjointInputs<'a> {
    x: &'a [f64],
    dy: &'a [f64],
    c: &'a [f64],
    bd: &'a [f64],
    abar: &'a [f64],
    h: &'a [f64],
    l: usize,
    d: usize,
    n: usize,
}

fn adjoint_scan(
    inp: AdjointInputs<'_>,
    scan: ScanMode,
    dx: &mut [f64],
    dc: &mut [f64],
    dabar: &mut [f64],
    dbd: &mut [f64],
) {
    let AdjointInputs { x, dy, c, bd, abar, h, l, d, n } = inp;
    // The adjoint obeys g_t = local_t + ā_{t+1} ⊙ g_{t+1}; run it as a forward
    // scan over reversed time with decay_r[s] = ā_{L−s}.
    let mut decay_r = vec![1.0; l * n];
    for s_ in 1..l {
        decay_r[s_ * n..(s_ + 1) * n].copy_from_slice(&abar[(l - s_) * n..(l - s_ + 1) * n]);
    }

    let mut local_r = vec![0.0; l * n];
    let mut g_r = vec![0.0; l * n];
    for ch in 0..d {
        let hd = &h[ch * l * n..(ch + 1) * l * n];
        for t in 0..l {
            let up = dy[t * d + ch];
            let rs = (l - 1 - t) * n;
            for i in 0..n {
                local_r[rs + i] = up * c[t * n + i];
                dc[t * n + i] += up * hd[t * n + i];
            }
        }
        scan.run(&decay_r, &local_r, n, &mut g_r);
        for t in 0..l {
            let g = &g_r[(l - 1 - t) * n..(l - t) * n];
            let xv = x[t * d + ch];
            if t > 0 {
                let hp = &hd[(t - 1) * n..t * n];
                for i in 0..n {
                    dabar[t * n + i] += g[i] * hp[i];
                }
            }
            for i in 0..n {
                dbd[t * n + i] += g[i] * xv;
            }
            dx[t * d + ch] += dot(g, &bd[t * n..(t + 1) * n]);
        }
    }
}

/// Tape handles for the tensors of one [`SsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_diag: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_delta: Var,
    pub delta_bias: Var,
}

struct SsmTapeOp {
    params: SsmParams,
    scan: ScanMode,
    ctx: SsmContext,
}

impl CustomOp for SsmTapeOp {
    fn name(&self) -> &'static str {
        "selective_ssm"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let g = backward_impl(&self.ctx, &self.params, self.scan, grad)?;
        Ok(vec![g.x, g.a_diag, g.w_b, g.w_c, g.w_delta, g.delta_bias])
    }
}

/// Records the SSM over `x: [B, L, D]` as one fused tape operation.
pub fn ssm_on_tape(tape: &mut Tape, x: Var, vars: SsmVars, selection: Selection, scan: ScanMode) -> Result<Var> {
    let params = SsmParams {
        a_diag: tape.value(vars.a_diag).clone(),
        w_b: tape.value(vars.w_b).clone(),
        w_c: tape.value(vars.w_c).clone(),
        w_delta: tape.value(vars.w_delta).clone(),
        delta_bias: tape.value(vars.delta_bias).clone(),
        selection,
    };
    let (y, ctx) = forward_impl(tape.value(x), &params, scan)?;
    let inputs = [x, vars.a_diag, vars.w_b, vars.w_c, vars.w_delta, vars.delta_bias];
    tape.custom(&inputs, y, Box::new(SsmTapeOp { params, scan, ctx }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{discretize, select};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent per-timestep loop written directly from the recurrence.
    fn naive(x: &Tensor, p: &SsmParams) -> Tensor {
        let (l, d) = (x.shape()[0], x.shape()[1]);
        let n = p.n_state();
        let mut h = vec![vec![0.0; n]; d];
        let mut y = vec![0.0; l * d];
        for t in 0..l {
            let xt = x.row(t);
            let sel = select(xt, p).unwrap();
            let (abar, bbar) = discretize(p.a_diag.data(), &sel.b, sel.delta).unwrap();
            for ch in 0..d {
                let mut acc = 0.0;
                for i in 0..n {
                    h[ch][i] = abar[i] * h[ch][i] + bbar[i] * xt[ch];
                    acc += sel.c[i] * h[ch][i];
                }
                y[t * d + ch] = acc;
            }
        }
        Tensor::new(vec![l, d], y).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsmParams::init(4, 16, Selection::Selective, &mut rng).unwrap();
        let y = ssm_forward(&Tensor::zeros(&[10, 4]), &p, ScanMode::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_loop_for_both_scans_and_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for selection in [Selection::Selective, Selection::Fixed] {
            let p = SsmParams::init(5, 16, selection, &mut rng).unwrap();
            let x = Tensor::randn(&[33, 5], 1.0, &mut rng);
            let oracle = naive(&x, &p);
            for scan in [ScanMode::Sequential, ScanMode::Parallel { chunk: 7 }, ScanMode::default()] {
                let y = ssm_forward(&x, &p, scan).unwrap();
                assert!(y.max_abs_diff(&oracle).unwrap() < 1e-10, "{scan:?} {selection:?}");
            }
        }
    }

    #[test]
    fn step_api_matches_sequence_api() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SsmParams::init(3, 4, Selection::Selective, &mut rng).unwrap();
        let x = Tensor::randn(&[12, 3], 1.0, &mut rng);
        let y = ssm_forward(&x, &p, ScanMode::Sequential).unwrap();
        let mut st = crate::ssm::SsmState::zeros(3, 4);
        for t in 0..12 {
            let yt = st.step(x.row(t), &p).unwrap();
            for (a, b) in yt.iter().zip(y.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_without_forward_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SsmParams::init(2, 2, Selection::Selective, &mut rng).unwrap();
        let ssm = SelectiveSsm::new(p, ScanMode::Sequential);
        assert!(matches!(ssm.backward(&Tensor::zeros(&[3, 2])), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SsmParams::init(3, 4, Selection::Selective, &mut rng).unwrap();
        let mut ssm = SelectiveSsm::new(p, ScanMode::default());
        let x = Tensor::randn(&[2, 9, 3], 1.0, &mut rng);
        ssm.forward(&x).unwrap();
        let g = ssm.backward(&Tensor::zeros(&[2, 9, 3])).unwrap();
        for t in [&g.x, &g.a_diag, &g.w_b, &g.w_c, &g.w_delta, &g.delta_bias] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn nan_input_names_the_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = SsmParams::init(2, 2, Selection::Selective, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.0, f64::NAN, 1.0, 1.0]).unwrap();
        let err = ssm_forward(&x, &p, ScanMode::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref stage } if stage == "ssm.input"));
    }
}
