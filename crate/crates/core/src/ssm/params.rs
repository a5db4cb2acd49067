use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, inverse_softplus, softplus, Tensor};

/// Range the initial step size `softplus(delta_bias)` is drawn from.
pub const DELTA_INIT_RANGE: (f64, f64) = (0.001, 0.1);

/// Whether `B`, `C` and `Δ` are computed from the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Selection {
    #[default]
    Selective,
    /// Time-invariant ablation: the projections read a constant `1` instead
    /// of `x_t`, so `B`, `C` and `Δ` are learned constants.
    Fixed,
}

impl Selection {
    /// Width of the vector the selection projections read.
    pub fn source_width(self, d_model: usize) -> usize {
        match self {
            Selection::Selective => d_model,
            Selection::Fixed => 1,
        }
    }
}

/// Parameters of one selective SSM over `D` channels with state size `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Diagonal of `A`, shape `[N]`.
    pub a_diag: Tensor,
    /// `[N, S]` with `S = D` (selective) or `1` (fixed).
    pub w_b: Tensor,
    pub w_c: Tensor,
    /// `[1, S]`
    pub w_delta: Tensor,
    /// `[1]`
    pub delta_bias: Tensor,
    pub selection: Selection,
}

/// S4D-Real initialization: `a[n] = −(n + 1)`.
pub fn init_s4d_real(n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::contract("state size must be at least 1"));
    }
    Ok(Tensor::from_fn(&[n], |i| -((i + 1) as f64)))
}

/// Draws `Δ₀ ~ U[0.001, 0.1]` and returns the bias with `softplus(bias) = Δ₀`.
pub fn init_delta_bias<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let (lo, hi) = DELTA_INIT_RANGE;
    inverse_softplus(rng.random_range(lo..=hi))
}

impl SsmParams {
    pub fn init<R: Rng + ?Sized>(
        d_model: usize,
        n_state: usize,
        selection: Selection,
        rng: &mut R,
    ) -> Result<Self> {
        let s = selection.source_width(d_model);
        let bound = 1.0 / (s as f64).sqrt();
        Ok(Self {
            a_diag: init_s4d_real(n_state)?,
            w_b: Tensor::uniform(&[n_state, s], -bound, bound, rng),
            w_c: Tensor::uniform(&[n_state, s], -bound, bound, rng),
            w_delta: Tensor::uniform(&[1, s], -bound, bound, rng),
            delta_bias: Tensor::from_vec(vec![init_delta_bias(rng)]),
            selection,
        })
    }

    pub fn n_state(&self) -> usize {
        self.a_diag.numel()
    }

    pub fn source_width(&self) -> usize {
        self.w_b.cols()
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let n = self.n_state();
        let s = self.selection.source_width(d_model);
        let expect = [
            ("a_diag", self.a_diag.shape(), vec![n]),
            ("w_b", self.w_b.shape(), vec![n, s]),
            ("w_c", self.w_c.shape(), vec![n, s]),
            ("w_delta", self.w_delta.shape(), vec![1, s]),
            ("delta_bias", self.delta_bias.shape(), vec![1]),
        ];
        for (name, got, want) in expect {
            if got != want.as_slice() {
                return Err(Error::contract(format!(
                    "{name} has shape {got:?}, expected {want:?} for D={d_model}, N={n}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn bias(&self) -> f64 {
        self.delta_bias.data()[0]
    }
}

/// Input-dependent SSM parameters for one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Selected {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

/// `b = W_B x`, `c = W_C x`, `Δ = softplus(W_Δ x + bias)`.
pub fn select(x_t: &[f64], p: &SsmParams) -> Result<Selected> {
    let source: &[f64] = match p.selection {
        Selection::Selective => x_t,
        Selection::Fixed => &[1.0],
    };
    if source.len() != p.source_width() {
        return Err(Error::Shape {
            op: "select",
            lhs: vec![x_t.len()],
            rhs: p.w_b.shape().to_vec(),
        });
    }
    let n = p.n_state();
    let b = (0..n).map(|i| dot(p.w_b.row(i), source)).collect();
    let c = (0..n).map(|i| dot(p.w_c.row(i), source)).collect();
    let delta = softplus(dot(p.w_delta.row(0), source) + p.bias());
    Ok(Selected { b, c, delta })
}

/// Discrete parameters `(Ā, B̄) = (exp(Δ A), Δ B)` for a diagonal `A`.
pub fn discretize(a_diag: &[f64], b_t: &[f64], delta_t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta_t > 0.0) {
        return Err(Error::contract(format!("step size must be positive, got {delta_t}")));
    }
    if a_diag.len() != b_t.len() {
        return Err(Error::Shape {
            op: "discretize",
            lhs: vec![a_diag.len()],
            rhs: vec![b_t.len()],
        });
    }
    let abar = a_diag.iter().map(|a| (delta_t * a).exp()).collect();
    let bbar = b_t.iter().map(|b| delta_t * b).collect();
    Ok((abar, bbar))
}

/// Per-channel latent state for step-by-step (recurrent) evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    /// `[D, N]`, row `d` is the state of channel `d`.
    pub h: Tensor,
}

impl SsmState {
    pub fn zeros(d_model: usize, n_state: usize) -> Self {
        Self {
            h: Tensor::zeros(&[d_model, n_state]),
        }
    }

    /// Advances one timestep and returns `y_t`.
    pub fn step(&mut self, x_t: &[f64], p: &SsmParams) -> Result<Vec<f64>> {
        let d_model = self.h.shape()[0];
        if x_t.len() != d_model {
            return Err(Error::Shape {
                op: "SsmState::step",
                lhs: vec![x_t.len()],
                rhs: self.h.shape().to_vec(),
            });
        }
        let sel = select(x_t, p)?;
        let (abar, bbar) = discretize(p.a_diag.data(), &sel.b, sel.delta)?;
        let n = abar.len();
        let h = self.h.data_mut();
        let mut y = Vec::with_capacity(d_model);
        for (d, &x) in x_t.iter().enumerate() {
            let hd = &mut h[d * n..(d + 1) * n];
            for i in 0..n {
                hd[i] = abar[i] * hd[i] + bbar[i] * x;
            }
            y.push(dot(&sel.c, hd));
        }
        self.h.ensure_finite("ssm.step")?;
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn s4d_real_values() {
        let a16 = init_s4d_real(16).unwrap();
        let expect: Vec<f64> = (1..=16).map(|v| -(v as f64)).collect();
        assert_eq!(a16.data(), &expect[..]);
        assert_eq!(init_s4d_real(1).unwrap().data(), &[-1.0]);
        assert_eq!(init_s4d_real(4).unwrap().data(), &[-1.0, -2.0, -3.0, -4.0]);
        assert!(init_s4d_real(0).is_err());
    }

    #[test]
    fn zero_input_selects_zero_b_c_and_bias_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SsmParams::init(6, 4, Selection::Selective, &mut rng).unwrap();
        let sel = select(&[0.0; 6], &p).unwrap();
        assert!(sel.b.iter().chain(&sel.c).all(|&v| v == 0.0));
        assert!((0.001 - 1e-15..=0.1 + 1e-15).contains(&sel.delta));
        assert_eq!(sel.delta, softplus(p.bias()));
    }

    #[test]
    fn basis_vector_selects_first_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = SsmParams::init(3, 3, Selection::Selective, &mut rng).unwrap();
        p.w_b = Tensor::eye(3);
        let sel = select(&[1.0, 0.0, 0.0], &p).unwrap();
        assert_eq!(sel.b, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn select_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SsmParams::init(5, 3, Selection::Selective, &mut rng).unwrap();
        let x: Vec<f64> = Tensor::randn(&[5], 1.0, &mut rng).into_data();
        let sel = select(&x, &p).unwrap();
        for i in 0..3 {
            let mut b = 0.0;
            let mut c = 0.0;
            for j in 0..5 {
                b += p.w_b.at(&[i, j]) * x[j];
                c += p.w_c.at(&[i, j]) * x[j];
            }
            assert!((sel.b[i] - b).abs() < 1e-12 && (sel.c[i] - c).abs() < 1e-12);
        }
        let mut s = p.bias();
        for j in 0..5 {
            s += p.w_delta.at(&[0, j]) * x[j];
        }
        assert!((sel.delta - (1.0 + s.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn discretize_cases() {
        let (abar, bbar) = discretize(&[-1.0], &[2.0], 1.0).unwrap();
        assert!((abar[0] - 0.36787944117144233).abs() < 1e-15);
        assert_eq!(bbar, vec![2.0]);

        let (abar, bbar) = discretize(&[-3.0, -16.0], &[1.0, -1.0], 1e-300).unwrap();
        assert!(abar.iter().all(|&a| a == 1.0));
        assert!(bbar.iter().all(|&b| b.abs() < 1e-299));

        assert!(discretize(&[-1.0], &[1.0], 0.0).is_err());
        assert!(discretize(&[-1.0], &[1.0], -0.5).is_err());
    }

    #[test]
    fn s4d_real_decay_lies_in_unit_interval() {
        let a = init_s4d_real(16).unwrap();
        for delta in [1e-4, 0.001, 0.05, 0.1, 1.0, 10.0] {
            let (abar, _) = discretize(a.data(), &[0.0; 16], delta).unwrap();
            assert!(abar.iter().all(|&v| v > 0.0 && v < 1.0), "delta {delta}");
        }
    }
}
