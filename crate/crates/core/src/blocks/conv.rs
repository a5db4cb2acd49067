//! Depthwise causal 1-D convolution.

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

fn check(u: &Tensor, w: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, l, c) = match *u.shape() {
        [l, c] => (1, l, c),
        [b, l, c] => (b, l, c),
        _ => return Err(Error::contract(format!("conv input {:?} is not [L, C] or [B, L, C]", u.shape()))),
    };
    if w.rank() != 2 || w.shape()[1] != c || w.shape()[0] == 0 || bias.shape() != [c] {
        return Err(Error::Shape {
            op: "causal_conv1d",
            lhs: u.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok((b, l, c, w.shape()[0]))
}

/// `out[t, c] = Σ_k w[k, c] · u[t − k, c] + bias[c]`, zero-padded on the left.
///
/// `u` is `[L, C]` or `[B, L, C]`, `w` is `[K, C]`.
pub fn causal_conv1d(u: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, l, c, k) = check(u, w, bias)?;
    let (ud, wd, bd) = (u.data(), w.data(), bias.data());
    let mut out = vec![0.0; u.numel()];
    for bi in 0..b {
        let base = bi * l * c;
        for t in 0..l {
            let orow = &mut out[base + t * c..base + (t + 1) * c];
            orow.copy_from_slice(bd);
            for tap in 0..k.min(t + 1) {
                let urow = &ud[base + (t - tap) * c..base + (t - tap + 1) * c];
                let wrow = &wd[tap * c..(tap + 1) * c];
                for ch in 0..c {
                    orow[ch] += wrow[ch] * urow[ch];
                }
            }
        }
    }
    Ok(Tensor::from_parts(u.shape().to_vec(), out))
}

struct ConvOp;

impl CustomOp for ConvOp {
    fn name(&self) -> &'static str {
        "causal_conv1d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (u, w, bias) = (inputs[0], inputs[1], inputs[2]);
        let (b, l, c, k) = check(u, w, bias)?;
        let (ud, wd, gd) = (u.data(), w.data(), grad.data());
        let mut du = vec![0.0; u.numel()];
        let mut dw = vec![0.0; w.numel()];
        let mut db = vec![0.0; c];
        for bi in 0..b {
            let base = bi * l * c;
            for t in 0..l {
                let grow = &gd[base + t * c..base + (t + 1) * c];
                for ch in 0..c {
                    db[ch] += grow[ch];
                }
                for tap in 0..k.min(t + 1) {
                    let src = base + (t - tap) * c;
                    for ch in 0..c {
                        du[src + ch] += wd[tap * c + ch] * grow[ch];
                        dw[tap * c + ch] += grow[ch] * ud[src + ch];
                    }
                }
            }
        }
        Ok(vec![
            Tensor::from_parts(u.shape().to_vec(), du),
            Tensor::from_parts(w.shape().to_vec(), dw),
            Tensor::from_parts(vec![c], db),
        ])
    }
}

pub fn conv_on_tape(tape: &mut Tape, u: Var, w: Var, bias: Var) -> Result<Var> {
    let out = causal_conv1d(tape.value(u), tape.value(w), tape.value(bias))?;
    tape.custom(&[u, w, bias], out, Box::new(ConvOp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn width_one_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Tensor::randn(&[9, 3], 1.0, &mut rng);
        let y = causal_conv1d(&u, &Tensor::ones(&[1, 3]), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, u);
    }

    #[test]
    fn impulse_response_stays_inside_kernel_window() {
        let (l, k) = (16, 4);
        let mut u = vec![0.0; l];
        u[5] = 1.0;
        let u = Tensor::new(vec![l, 1], u).unwrap();
        let w = Tensor::new(vec![k, 1], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let y = causal_conv1d(&u, &w, &Tensor::zeros(&[1])).unwrap();
        for t in 0..l {
            let inside = (5..5 + k).contains(&t);
            assert_eq!(y.data()[t] != 0.0, inside, "t={t}");
        }
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (l, c, k) = (11, 5, 4);
        let u = Tensor::randn(&[l, c], 1.0, &mut rng);
        let w = Tensor::randn(&[k, c], 1.0, &mut rng);
        let bias = Tensor::randn(&[c], 1.0, &mut rng);
        let y = causal_conv1d(&u, &w, &bias).unwrap();
        for t in 0..l {
            for ch in 0..c {
                let mut acc = bias.data()[ch];
                for tap in 0..k {
                    if t >= tap {
                        acc += w.at(&[tap, ch]) * u.at(&[t - tap, ch]);
                    }
                }
                assert!((y.at(&[t, ch]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let r = causal_conv1d(&Tensor::zeros(&[4, 3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3]));
        assert!(r.is_err());
    }
}
