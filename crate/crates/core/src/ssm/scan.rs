//! The diagonal linear recurrence `h_t = ā_t ⊙ h_{t−1} + l_t` computed two
//! ways: a plain loop, and a chunked Blelloch scan over affine maps.
//!
//! Sequences are flat row-major `[L, N]` slices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Below this length the chunk-level scans stay on the calling thread.
const PARALLEL_MIN_LEN: usize = 2048;

/// How the recurrence is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Parallel { chunk: usize },
}

impl Default for ScanMode {
    fn default() -> Self {
        ScanMode::Parallel { chunk: 64 }
    }
}

impl ScanMode {
    pub fn run(self, decay: &[f64], load: &[f64], n: usize, out: &mut [f64]) {
        match self {
            ScanMode::Sequential => sequential_into(decay, load, n, out),
            ScanMode::Parallel { chunk } => parallel_into(decay, load, n, chunk.max(1), out),
        }
    }
}

/// One affine map `h ↦ decay ⊙ h + load`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement {
    pub decay: Vec<f64>,
    pub load: Vec<f64>,
}

impl ScanElement {
    pub fn new(decay: Vec<f64>, load: Vec<f64>) -> Result<Self> {
        if decay.len() != load.len() {
            return Err(Error::Shape {
                op: "ScanElement",
                lhs: vec![decay.len()],
                rhs: vec![load.len()],
            });
        }
        Ok(Self { decay, load })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            decay: vec![1.0; n],
            load: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.decay.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decay.is_empty()
    }

    /// `self` applied first, then `later`.
    pub fn combine(&self, later: &ScanElement) -> Result<ScanElement> {
        if self.len() != later.len() {
            return Err(Error::Shape {
                op: "scan_combine",
                lhs: vec![self.len()],
                rhs: vec![later.len()],
            });
        }
        let mut out = later.clone();
        combine_into(&self.decay, &self.load, &mut out.decay, &mut out.load);
        Ok(out)
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        self.decay
            .iter()
            .zip(&self.load)
            .zip(h)
            .map(|((a, l), h)| a * h + l)
            .collect()
    }
}

/// `(d2, l2) ← (d1, l1) ∘ (d2, l2)`.
#[inline]
fn combine_into(d1: &[f64], l1: &[f64], d2: &mut [f64], l2: &mut [f64]) {
    for i in 0..d2.len() {
        l2[i] += d2[i] * l1[i];
        d2[i] *= d1[i];
    }
}

fn check(decay: &Tensor, load: &Tensor) -> Result<(usize, usize)> {
    if decay.rank() != 2 || decay.shape() != load.shape() {
        return Err(Error::Shape {
            op: "recurrence",
            lhs: decay.shape().to_vec(),
            rhs: load.shape().to_vec(),
        });
    }
    Ok((decay.shape()[0], decay.shape()[1]))
}

/// Reference loop with `h_0 = 0`. Inputs and output are `[L, N]`.
pub fn recurrence_sequential(decay: &Tensor, load: &Tensor) -> Result<Tensor> {
    let (l, n) = check(decay, load)?;
    let mut out = vec![0.0; l * n];
    sequential_into(decay.data(), load.data(), n, &mut out);
    Ok(Tensor::from_parts(vec![l, n], out))
}

/// Chunked Blelloch scan; agrees with [`recurrence_sequential`].
pub fn recurrence_parallel(decay: &Tensor, load: &Tensor, chunk: usize) -> Result<Tensor> {
    let (l, n) = check(decay, load)?;
    if chunk == 0 {
        return Err(Error::contract("scan chunk size must be at least 1"));
    }
    let mut out = vec![0.0; l * n];
    parallel_into(decay.data(), load.data(), n, chunk, &mut out);
    Ok(Tensor::from_parts(vec![l, n], out))
}

pub(crate) fn sequential_into(decay: &[f64], load: &[f64], n: usize, out: &mut [f64]) {
    let l = decay.len() / n;
    if l == 0 {
        return;
    }
    out[..n].copy_from_slice(&load[..n]);
    for t in 1..l {
        let (prev, cur) = out[(t - 1) * n..(t + 1) * n].split_at_mut(n);
        let a = &decay[t * n..(t + 1) * n];
        let b = &load[t * n..(t + 1) * n];
        for i in 0..n {
            cur[i] = a[i] * prev[i] + b[i];
        }
    }
}

/// Inclusive Blelloch scan over `len` elements of width `n`, in place:
/// afterwards element `j` holds the composition of elements `0..=j`.
pub fn blelloch_inclusive(decay: &mut [f64], load: &mut [f64], n: usize) {
    let len = decay.len() / n;
    if len <= 1 {
        return;
    }
    let padded = len.next_power_of_two();
    let mut td = vec![1.0; padded * n];
    let mut tl = vec![0.0; padded * n];
    td[..len * n].copy_from_slice(decay);
    tl[..len * n].copy_from_slice(load);

    // Up-sweep: node i accumulates the composition of its subtree.
    let mut stride = 1;
    while stride < padded {
        let mut i = 2 * stride - 1;
        while i < padded {
            let left = i - stride;
            let (lo, hi) = td.split_at_mut(i * n);
            let (llo, lhi) = tl.split_at_mut(i * n);
            combine_into(
                &lo[left * n..(left + 1) * n],
                &llo[left * n..(left + 1) * n],
                &mut hi[..n],
                &mut lhi[..n],
            );
            i += 2 * stride;
        }
        stride *= 2;
    }

    // Down-sweep to the exclusive prefix.
    td[(padded - 1) * n..].fill(1.0);
    tl[(padded - 1) * n..].fill(0.0);
    let mut stride = padded / 2;
    let mut sub_d = vec![0.0; n];
    let mut sub_l = vec![0.0; n];
    let mut par_d = vec![0.0; n];
    let mut par_l = vec![0.0; n];
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < padded {
            let left = i - stride;
            // sub = left subtree total; left ← parent prefix; i ← parent prefix ∘ sub
            sub_d.copy_from_slice(&td[left * n..(left + 1) * n]);
            sub_l.copy_from_slice(&tl[left * n..(left + 1) * n]);
            let (lo, hi) = td.split_at_mut(i * n);
            lo[left * n..(left + 1) * n].copy_from_slice(&hi[..n]);
            let (llo, lhi) = tl.split_at_mut(i * n);
            llo[left * n..(left + 1) * n].copy_from_slice(&lhi[..n]);
            par_d.copy_from_slice(&hi[..n]);
            par_l.copy_from_slice(&lhi[..n]);
            hi[..n].copy_from_slice(&sub_d);
            lhi[..n].copy_from_slice(&sub_l);
            combine_into(&par_d, &par_l, &mut hi[..n], &mut lhi[..n]);
            i += 2 * stride;
        }
        stride /= 2;
    }

    // Inclusive = exclusive prefix ∘ own element.
    for j in 0..len {
        let r = j * n..(j + 1) * n;
        combine_into(&td[r.clone()], &tl[r.clone()], &mut decay[r.clone()], &mut load[r]);
    }
}

pub(crate) fn parallel_into(decay: &[f64], load: &[f64], n: usize, chunk: usize, out: &mut [f64]) {
    let l = decay.len() / n;
    if l == 0 {
        return;
    }
    let mut pd = decay.to_vec();
    out.copy_from_slice(load);
    let width = chunk * n;
    if l >= PARALLEL_MIN_LEN && l > chunk {
        pd.par_chunks_mut(width)
            .zip(out.par_chunks_mut(width))
            .for_each(|(d, o)| blelloch_inclusive(d, o, n));
    } else {
        for (d, o) in pd.chunks_mut(width).zip(out.chunks_mut(width)) {
            blelloch_inclusive(d, o, n);
        }
    }

    // Sequential carry across chunk boundaries.
    let mut carry = vec![0.0; n];
    for (d, o) in pd.chunks(width).zip(out.chunks_mut(width)) {
        for (dr, orow) in d.chunks_exact(n).zip(o.chunks_exact_mut(n)) {
            for i in 0..n {
                orow[i] += dr[i] * carry[i];
            }
        }
        carry.copy_from_slice(&o[o.len() - n..]);
    }
}
