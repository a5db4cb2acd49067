//! Time and memory scaling of the SSM scan against quadratic attention.

mod alloc;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use alloc::{is_counting, live_bytes, measure_peak, CountingAllocator};

use crate::blocks::reference_self_attention;
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ssm::{ssm_forward, ScanMode, Selection, SsmParams};

pub const BENCH_HEADER: &str = "kernel,seq_len,wall_time_ns,peak_bytes,trials";

/// How often a non-monotone median is re-measured before it is flagged.
pub const MONOTONE_RETRIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kernel {
    AttentionReference,
    SsmScanParallel,
    SsmScanSequential,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::AttentionReference, Kernel::SsmScanParallel, Kernel::SsmScanSequential];

    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::AttentionReference => "attention_reference",
            Kernel::SsmScanParallel => "ssm_scan_parallel",
            Kernel::SsmScanSequential => "ssm_scan_sequential",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub seq_len: usize,
    /// Median over trials; zero when `capped`.
    pub wall_time_ns: u64,
    pub peak_bytes: u64,
    pub trials: usize,
    /// The kernel was not run because its working set exceeded the cap or
    /// could not be allocated. `peak_bytes` then holds the requested size.
    pub capped: bool,
    /// The median stayed below the previous length's after all retries.
    pub flagged: bool,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        if self.capped {
            format!("{},{},capped,{},0", self.kernel, self.seq_len, self.peak_bytes)
        } else {
            format!(
                "{},{},{},{},{}",
                self.kernel, self.seq_len, self.wall_time_ns, self.peak_bytes, self.trials
            )
        }
    }
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub n_state: usize,
    pub trials: usize,
    pub chunk: usize,
    pub kernels: Vec<Kernel>,
    /// Attention lengths whose score matrix needs more bytes are recorded
    /// as capped rows.
    pub attention_mem_cap: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: (0..7).map(|i| 256 << i).collect(),
            d_model: 32,
            n_state: 16,
            trials: 5,
            chunk: 64,
            kernels: Kernel::ALL.to_vec(),
            attention_mem_cap: 3 << 30,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.windows(2).any(|w| w[0] >= w[1]) || self.lengths[0] == 0 {
            return Err(Error::Config("bench lengths must be positive and strictly ascending".into()));
        }
        if self.trials < 5 {
            return Err(Error::Config(format!("bench needs at least 5 trials, got {}", self.trials)));
        }
        if self.d_model == 0 || self.n_state == 0 || self.chunk == 0 || self.kernels.is_empty() {
            return Err(Error::Config("d_model, n_state, chunk and kernels must be non-empty".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self, prefix: &str) -> Vec<(String, String)> {
        let join = |v: Vec<String>| v.join(",");
        [
            ("lengths", join(self.lengths.iter().map(|l| l.to_string()).collect())),
            ("d_model", self.d_model.to_string()),
            ("n_state", self.n_state.to_string()),
            ("trials", self.trials.to_string()),
            ("chunk", self.chunk.to_string()),
            ("kernels", join(self.kernels.iter().map(|k| k.to_string()).collect())),
            ("attention_mem_cap", self.attention_mem_cap.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v))
        .collect()
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let key = |k: &str| format!("{prefix}{k}");
        let cfg = Self {
            lengths: kv.take_list(&key("lengths"))?.unwrap_or(d.lengths),
            d_model: kv.take_or(&key("d_model"), d.d_model)?,
            n_state: kv.take_or(&key("n_state"), d.n_state)?,
            trials: kv.take_or(&key("trials"), d.trials)?,
            chunk: kv.take_or(&key("chunk"), d.chunk)?,
            kernels: kv.take_list(&key("kernels"))?.unwrap_or(d.kernels),
            attention_mem_cap: kv.take_or(&key("attention_mem_cap"), d.attention_mem_cap)?,
            seed: kv.take_or(&key("seed"), d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Result of [`bench_scaling`].
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    /// Sorted by `(kernel, seq_len)`.
    pub rows: Vec<BenchRow>,
    /// `(seq_len, max |parallel − sequential|)` for every length where both
    /// scan kernels ran.
    pub scan_agreement: Vec<(usize, f64)>,
}

struct Instance {
    x: Tensor,
    params: SsmParams,
}

fn instance(cfg: &BenchConfig, l: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ l as u64);
    Ok(Instance {
        x: Tensor::randn(&[l, cfg.d_model], 1.0, &mut rng),
        params: SsmParams::init(cfg.d_model, cfg.n_state, Selection::Selective, &mut rng)?,
    })
}

fn run_kernel(kernel: Kernel, inst: &Instance, chunk: usize) -> Result<Option<Tensor>> {
    match kernel {
        Kernel::AttentionReference => reference_self_attention(&inst.x),
        Kernel::SsmScanParallel => ssm_forward(&inst.x, &inst.params, ScanMode::Parallel { chunk }).map(Some),
        Kernel::SsmScanSequential => ssm_forward(&inst.x, &inst.params, ScanMode::Sequential).map(Some),
    }
}

struct Measurement {
    median_ns: u64,
    peak_bytes: usize,
    output: Option<Tensor>,
}

/// One warmup run, then `trials` timed runs. `None` when the kernel could
/// not allocate its working set.
fn measure(kernel: Kernel, inst: &Instance, cfg: &BenchConfig) -> Result<Option<Measurement>> {
    let Some(output) = run_kernel(kernel, inst, cfg.chunk)? else {
        return Ok(None);
    };
    let mut times = Vec::with_capacity(cfg.trials);
    let mut peak = 0;
    for _ in 0..cfg.trials {
        let start = Instant::now();
        let (out, bytes) = measure_peak(|| run_kernel(kernel, inst, cfg.chunk));
        let elapsed = start.elapsed().as_nanos() as u64;
        if out?.is_none() {
            return Ok(None);
        }
        times.push(elapsed.max(1));
        peak = peak.max(bytes);
    }
    times.sort_unstable();
    Ok(Some(Measurement {
        median_ns: times[times.len() / 2],
        peak_bytes: peak,
        output: Some(output),
    }))
}

fn capped_row(kernel: Kernel, l: usize, bytes: usize) -> BenchRow {
    BenchRow {
        kernel,
        seq_len: l,
        wall_time_ns: 0,
        peak_bytes: bytes as u64,
        trials: 0,
        capped: true,
        flagged: false,
    }
}

/// Measures every configured kernel at every length. Kernels run one at a
/// time; `progress` sees each row as it is finalized.
pub fn bench_scaling(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRow)) -> Result<BenchReport> {
    cfg.validate()?;
    let mut kernels = cfg.kernels.clone();
    kernels.sort_unstable();
    kernels.dedup();

    let mut rows = Vec::new();
    let mut outputs: Vec<(Kernel, usize, Tensor)> = Vec::new();
    for &kernel in &kernels {
        let mut kernel_rows: Vec<BenchRow> = Vec::new();
        for &l in &cfg.lengths {
            let inst = instance(cfg, l)?;
            let score_bytes = l.saturating_mul(l).saturating_mul(8);
            if kernel == Kernel::AttentionReference && score_bytes > cfg.attention_mem_cap {
                kernel_rows.push(capped_row(kernel, l, score_bytes));
                continue;
            }
            let Some(mut m) = measure(kernel, &inst, cfg)? else {
                kernel_rows.push(capped_row(kernel, l, score_bytes));
                continue;
            };
            let mut flagged = false;
            if let Some(prev) = kernel_rows.iter().rev().find(|r| !r.capped) {
                let mut tries = 0;
                while m.median_ns < prev.wall_time_ns && tries < MONOTONE_RETRIES {
                    tries += 1;
                    match measure(kernel, &inst, cfg)? {
                        Some(again) => m = again,
                        None => break,
                    }
                }
                flagged = m.median_ns < prev.wall_time_ns;
            }
            if kernel != Kernel::AttentionReference {
                if let Some(out) = m.output.take() {
                    outputs.push((kernel, l, out));
                }
            }
            kernel_rows.push(BenchRow {
                kernel,
                seq_len: l,
                wall_time_ns: m.median_ns,
                peak_bytes: m.peak_bytes as u64,
                trials: cfg.trials,
                capped: false,
                flagged,
            });
        }
        for r in &kernel_rows {
            progress(r);
        }
        rows.extend(kernel_rows);
    }

    let mut scan_agreement = Vec::new();
    for &l in &cfg.lengths {
        let find = |k: Kernel| outputs.iter().find(|(kk, ll, _)| *kk == k && *ll == l).map(|(_, _, t)| t);
        if let (Some(p), Some(s)) = (find(Kernel::SsmScanParallel), find(Kernel::SsmScanSequential)) {
            scan_agreement.push((l, p.max_abs_diff(s)?));
        }
    }
    Ok(BenchReport { rows, scan_agreement })
}

/// Which column of a [`BenchRow`] to regress against `ln(seq_len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Time,
    Memory,
}

/// Least-squares slope of `ln(metric)` against `ln(seq_len)` for each kernel
/// present in `rows`, skipping capped rows. Needs four lengths per kernel.
pub fn fit_loglog_slope(rows: &[BenchRow], metric: Metric) -> Result<Vec<(Kernel, f64)>> {
    let mut kernels: Vec<Kernel> = rows.iter().map(|r| r.kernel).collect();
    kernels.sort_unstable();
    kernels.dedup();
    let mut out = Vec::new();
    for k in kernels {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.kernel == k && !r.capped)
            .map(|r| {
                let y = match metric {
                    Metric::Time => r.wall_time_ns,
                    Metric::Memory => r.peak_bytes,
                };
                ((r.seq_len as f64).ln(), (y.max(1) as f64).ln())
            })
            .collect();
        if pts.len() < 4 {
            return Err(Error::contract(format!(
                "slope fit for {k} needs at least 4 lengths, got {}",
                pts.len()
            )));
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        out.push((k, sxy / sxx));
    }
    Ok(out)
}

pub fn slope_of(slopes: &[(Kernel, f64)], kernel: Kernel) -> Option<f64> {
    slopes.iter().find(|(k, _)| *k == kernel).map(|(_, s)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(kernel: Kernel, f: impl Fn(f64) -> f64) -> Vec<BenchRow> {
        (0..6)
            .map(|i| {
                let l = 256usize << i;
                BenchRow {
                    kernel,
                    seq_len: l,
                    wall_time_ns: f(l as f64).round() as u64,
                    peak_bytes: (l * 64) as u64,
                    trials: 5,
                    capped: false,
                    flagged: false,
                }
            })
            .collect()
    }

    #[test]
    fn slope_of_linear_and_quadratic_rows() {
        let mut rows = synthetic(Kernel::SsmScanParallel, |l| 1000.0 * l);
        rows.extend(synthetic(Kernel::AttentionReference, |l| 3.0 * l * l));
        let t = fit_loglog_slope(&rows, Metric::Time).unwrap();
        assert!((slope_of(&t, Kernel::SsmScanParallel).unwrap() - 1.0).abs() < 1e-9);
        assert!((slope_of(&t, Kernel::AttentionReference).unwrap() - 2.0).abs() < 1e-9);
        let m = fit_loglog_slope(&rows, Metric::Memory).unwrap();
        assert!((slope_of(&m, Kernel::SsmScanParallel).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_points_is_a_contract_error() {
        let rows = synthetic(Kernel::SsmScanParallel, |l| l)[..3].to_vec();
        assert!(matches!(fit_loglog_slope(&rows, Metric::Time), Err(Error::Contract(_))));
    }

    #[test]
    fn capped_rows_are_excluded_from_fits() {
        let mut rows = synthetic(Kernel::AttentionReference, |l| l * l);
        rows[5] = capped_row(Kernel::AttentionReference, rows[5].seq_len, 1 << 40);
        let t = fit_loglog_slope(&rows, Metric::Time).unwrap();
        assert!((t[0].1 - 2.0).abs() < 1e-9);
        assert!(rows[5].csv_line().contains("capped"));
    }

    #[test]
    fn config_validation() {
        assert!(BenchConfig::default().validate().is_ok());
        assert!(BenchConfig { trials: 4, ..BenchConfig::default() }.validate().is_err());
        assert!(BenchConfig { lengths: vec![512, 256], ..BenchConfig::default() }.validate().is_err());
    }

    #[test]
    fn small_grid_runs_and_scans_agree() {
        let cfg = BenchConfig {
            lengths: vec![8, 16, 32, 64],
            d_model: 4,
            n_state: 4,
            chunk: 4,
            ..BenchConfig::default()
        };
        let report = bench_scaling(&cfg, |_| {}).unwrap();
        assert_eq!(report.rows.len(), 12);
        let keys: Vec<(Kernel, usize)> = report.rows.iter().map(|r| (r.kernel, r.seq_len)).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        assert!(report.rows.iter().all(|r| r.wall_time_ns > 0 && r.trials == 5));
        assert_eq!(report.scan_agreement.len(), 4);
        assert!(report.scan_agreement.iter().all(|&(_, d)| d < 1e-10));
    }

    #[test]
    fn attention_beyond_the_cap_is_recorded_not_run() {
        let cfg = BenchConfig {
            lengths: vec![8, 16],
            d_model: 4,
            kernels: vec![Kernel::AttentionReference],
            attention_mem_cap: 8 * 8 * 8,
            ..BenchConfig::default()
        };
        let report = bench_scaling(&cfg, |_| {}).unwrap();
        assert!(!report.rows[0].capped);
        assert!(report.rows[1].capped);
        assert_eq!(report.rows[1].peak_bytes, 16 * 16 * 8);
    }
}
