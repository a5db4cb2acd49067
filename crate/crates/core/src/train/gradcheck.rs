//! Central finite-difference check of every parameter gradient.

use crate::blocks::SequenceModel;
use crate::error::Result;
use crate::numerics::Tape;
use crate::train::tasks::{Batch, TaskSpec};
use crate::train::trainer::task_loss;

/// Denominator floor for relative errors, so exact zeros compare cleanly.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-parameter error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
    pub max_rel_err: f64,
    /// Parameter with that error.
    pub worst: String,
    /// Largest elementwise `relative_error` and where it occurred. Entries
    /// with near-zero gradients dominate this figure through round-off.
    pub max_elem_err: f64,
    pub worst_elem: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest `|a − n|` over all entries.
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Normwise relative error between two gradient vectors.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let sq = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = sq(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = sq(&mut analytic.iter().copied()).max(sq(&mut numeric.iter().copied()));
    diff / scale.max(REL_FLOOR)
}

fn loss_value(model: &SequenceModel, spec: &TaskSpec, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = task_loss(model, &mut tape, spec, batch)?;
    tape.value(loss).item()
}

/// How the numeric derivative of one scalar parameter is formed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(p + eps) - f(p - eps)) / 2eps`.
    Central { eps: f64 },
    /// Central differences at steps `h0, h0/1.4, h0/1.4², ...` combined by
    /// Richardson extrapolation (Ridders' method). Starting from a large
    /// step keeps round-off small for parameters with tiny gradients.
    Extrapolated { h0: f64 },
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_TABLE: usize = 10;

fn ridders(h0: f64, mut central: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut prev = vec![central(h0)?];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    let mut h = h0;
    for i in 1..RIDDERS_TABLE {
        h /= RIDDERS_SHRINK;
        let mut row = vec![central(h)?];
        let mut fac = c2;
        for j in 1..=i {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = next;
            }
            row.push(next);
        }
        if (row[i] - prev[i - 1]).abs() >= 2.0 * err {
            break;
        }
        prev = row;
    }
    Ok(best)
}

/// Compares the tape gradient of the deterministic-mode loss against a
/// finite-difference estimate for every scalar parameter.
pub fn grad_check(model: &SequenceModel, spec: &TaskSpec, batch: &Batch, stencil: Stencil) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let (loss, _) = task_loss(model, &mut tape, spec, batch)?;
    let grads = tape.backward(loss)?.into_param_grads(&model.store);

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        max_elem_err: 0.0,
        worst_elem: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = model.store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&grads) {
        let mut numerics = Vec::with_capacity(grad.numel());
        for i in 0..grad.numel() {
            let original = probe.store.get(id).data()[i];
            let mut central = |h: f64| -> Result<f64> {
                probe.store.value_mut(id).data_mut()[i] = original + h;
                let up = loss_value(&probe, spec, batch)?;
                probe.store.value_mut(id).data_mut()[i] = original - h;
                let down = loss_value(&probe, spec, batch)?;
                probe.store.value_mut(id).data_mut()[i] = original;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = match stencil {
                Stencil::Central { eps } => central(eps)?,
                Stencil::Extrapolated { h0 } => ridders(h0, central)?,
            };
            let analytic = grad.data()[i];
            let err = relative_error(analytic, numeric);
            numerics.push(numeric);
            report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
            report.checked += 1;
            if err > report.max_elem_err || report.worst_elem.is_empty() {
                report.max_elem_err = err;
                report.worst_elem = format!("{}[{i}]", model.store.name(id));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        let err = tensor_relative_error(grad.data(), &numerics);
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = err;
            report.worst = model.store.name(id).to_string();
        }
    }
    Ok(report)
}
