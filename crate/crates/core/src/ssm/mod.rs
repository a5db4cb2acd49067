//! Selective state-space model: selection, discretization and the diagonal
//! linear recurrence.
//!
//! For each channel `d` the latent state `h_{t,d} ∈ R^N` evolves as
//!
//! ```text
//! h_{t,d} = exp(Δ_t a) ⊙ h_{t−1,d} + Δ_t b_t x_{t,d}
//! y_{t,d} = c_t · h_{t,d}
//! ```
//!
//! with `b_t = W_B x_t`, `c_t = W_C x_t` and scalar `Δ_t = softplus(W_Δ x_t + bias)`.

mod params;
mod scan;
mod selective;

pub use params::{
    discretize, init_delta_bias, init_s4d_real, select, Selected, Selection, SsmParams, SsmState,
    DELTA_INIT_RANGE,
};
pub use scan::{blelloch_inclusive, recurrence_parallel, recurrence_sequential, ScanElement, ScanMode};
pub use selective::{ssm_forward, ssm_on_tape, SelectiveSsm, SsmContext, SsmGrads, SsmVars};
