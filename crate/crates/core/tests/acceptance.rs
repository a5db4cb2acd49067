//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.
//!
//! Set `ACCEPTANCE_ONLY=3,9` to run a subset.

use std::process::ExitCode;
use std::time::Instant;

use bimamba::bench::{
    bench_scaling, fit_loglog_slope, is_counting, slope_of, BenchConfig, CountingAllocator, Kernel, Metric,
};
use bimamba::blocks::{BlockVariant, ModelConfig, SequenceModel};
use bimamba::numerics::{softplus, Tape, Tensor};
use bimamba::ssm::{
    discretize, init_delta_bias, init_s4d_real, recurrence_parallel, recurrence_sequential, ScanMode, Selection,
    DELTA_INIT_RANGE,
};
use bimamba::train::{
    eval_set, evaluate, grad_check, train_model, AdamW, Split, Stencil, TaskSpec, TrainConfig, TrainRun,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Criterion = fn() -> bimamba::Result<Verdict>;

fn main() -> ExitCode {
    let criteria: [(usize, &str, Criterion); 9] = [
        (1, "scan equivalence", scan_equivalence),
        (2, "gradient suite", gradient_suite),
        (3, "causality and bidirectionality", causality),
        (4, "initialization contract", initialization),
        (5, "selective copying vs fixed ablation", selective_copying),
        (6, "induction heads", induction_heads),
        (7, "sequence reversal through cross-attention", reversal),
        (8, "scaling slopes", scaling),
        (9, "checkpoint round-trip", checkpoint_round_trip),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    // A name filter passed through `cargo test -- <filter>` skips the suite
    // unless it names this target.
    if std::env::args().skip(1).any(|a| !a.starts_with('-') && a != "acceptance") {
        return ExitCode::SUCCESS;
    }

    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let v = run().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} [{status}] {name}: {} ({:.1}s)",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn random_recurrence(l: usize, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let decay = Tensor::from_fn(&[l, n], |_| rng.random_range(0.0..1.0));
    let load = Tensor::randn(&[l, n], 1.0, rng);
    (decay, load)
}

fn scan_equivalence() -> bimamba::Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lengths: Vec<usize> = (1..=64).collect();
    lengths.extend([1000, 4096]);
    lengths.extend((0..24).map(|_| rng.random_range(65..=4096)));
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &l in &lengths {
        let (decay, load) = random_recurrence(l, 4, &mut rng);
        let reference = recurrence_sequential(&decay, &load)?;
        for chunk in [1, 2, 7, 64, l] {
            let got = recurrence_parallel(&decay, &load, chunk)?;
            worst = worst.max(got.max_abs_diff(&reference)?);
            cases += 1;
        }
    }
    Ok(verdict(
        worst < 1e-10,
        format!("{cases} (L, chunk) cases, max |parallel - sequential| = {worst:.2e} (< 1e-10)"),
    ))
}

fn gradcheck_config(vocab: usize, variant: BlockVariant, decoder_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_in: 6,
        n_state: 3,
        expand: 2,
        conv_width: 3,
        dropout_p: 0.2,
        n_heads: 2,
        encoder_layers: 1,
        encoder_variant: variant,
        decoder_layers,
        selection: Selection::Selective,
        scan: ScanMode::Parallel { chunk: 3 },
    }
}

fn gradient_suite() -> bimamba::Result<Verdict> {
    let cases = [
        (
            "unidirectional",
            gradcheck_config(8, BlockVariant::Unidirectional, 0),
            TaskSpec::induction_heads(8, 8, 5),
        ),
        (
            "bidirectional",
            gradcheck_config(8, BlockVariant::Bidirectional, 0),
            TaskSpec::selective_copy(8, 8, 2, 5),
        ),
        (
            "decoder",
            gradcheck_config(8, BlockVariant::Bidirectional, 1),
            TaskSpec::seq_reverse(5, 8, 5),
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cfg, task) in cases {
        let model = SequenceModel::new(cfg, 3)?;
        let batch = task.batch(2, &mut ChaCha8Rng::seed_from_u64(task.seed));
        let r = grad_check(&model, &task, &batch, Stencil::Extrapolated { h0: 0.1 })?;
        pass &= r.max_rel_err < 1e-6;
        parts.push(format!("{name} {:.1e} ({}, {} params)", r.max_rel_err, r.worst, r.checked));
    }
    Ok(verdict(pass, format!("max relative error < 1e-6: {}", parts.join("; "))))
}

fn small_model(variant: BlockVariant, decoder_layers: usize, seed: u64) -> bimamba::Result<SequenceModel> {
    SequenceModel::new(
        ModelConfig {
            vocab_size: 10,
            d_in: 8,
            n_state: 4,
            expand: 2,
            conv_width: 3,
            n_heads: 2,
            encoder_layers: 2,
            encoder_variant: variant,
            decoder_layers,
            ..ModelConfig::default()
        },
        seed,
    )
}

fn causality() -> bimamba::Result<Verdict> {
    let (l, d, t0) = (12, 8, 7);
    let tokens: Vec<usize> = (0..l).map(|i| (3 * i + 1) % 10).collect();
    let mut changed = tokens.clone();
    for t in changed.iter_mut().skip(t0) {
        *t = (*t + 4) % 10;
    }
    let encode = |m: &SequenceModel, toks: &[usize]| -> bimamba::Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = m.encode(&mut tape, toks, 1)?;
        Ok(tape.value(v).data().to_vec())
    };

    let uni = small_model(BlockVariant::Unidirectional, 0, 1)?;
    let (a, b) = (encode(&uni, &tokens)?, encode(&uni, &changed)?);
    let uni_ok = a[..t0 * d] == b[..t0 * d] && a[t0 * d..] != b[t0 * d..];

    let bi = small_model(BlockVariant::Bidirectional, 0, 2)?;
    let (a, b) = (encode(&bi, &tokens)?, encode(&bi, &changed)?);
    let bi_ok = (0..t0).all(|t| a[t * d..(t + 1) * d] != b[t * d..(t + 1) * d]);

    let s2s = small_model(BlockVariant::Bidirectional, 2, 3)?;
    let logits = |src: &[usize], tgt: &[usize]| -> bimamba::Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = s2s.seq2seq(&mut tape, src, tgt, 1)?;
        Ok(tape.value(v).data().to_vec())
    };
    let v = 10;
    let (a, b) = (logits(&tokens, &tokens)?, logits(&tokens, &changed)?);
    let dec_causal = a[..t0 * v] == b[..t0 * v] && a[t0 * v..] != b[t0 * v..];
    let mut src = tokens.clone();
    src[l - 1] = (src[l - 1] + 1) % 10;
    let c = logits(&src, &tokens)?;
    let dec_reads_encoder = a[..v] != c[..v];

    Ok(verdict(
        uni_ok && bi_ok && dec_causal && dec_reads_encoder,
        format!(
            "unidirectional prefix bit-exact: {uni_ok}; bidirectional prefix moved: {bi_ok}; \
             decoder causal in targets: {dec_causal}; decoder step 0 sees last source token: {dec_reads_encoder}"
        ),
    ))
}

fn initialization() -> bimamba::Result<Verdict> {
    let a = init_s4d_real(16)?;
    let exact = a.data().iter().enumerate().all(|(n, &v)| v == -((n + 1) as f64));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (lo, hi) = DELTA_INIT_RANGE;
    let deltas: Vec<f64> = (0..10_000).map(|_| softplus(init_delta_bias(&mut rng))).collect();
    let in_range = deltas.iter().all(|&d| (lo..=hi).contains(&d));
    let mut abar_ok = true;
    for _ in 0..10_000 {
        let delta = 10f64.powf(rng.random_range(-4.0..1.0));
        let (abar, _) = discretize(a.data(), &[0.5; 16], delta)?;
        abar_ok &= abar.iter().all(|&v| v > 0.0 && v < 1.0);
    }
    Ok(verdict(
        exact && in_range && abar_ok,
        format!(
            "a_n = -(n+1) exactly: {exact}; 10k softplus(delta_bias) in [{lo}, {hi}]: {in_range}; \
             abar in (0,1) for 10k random delta: {abar_ok}"
        ),
    ))
}

fn capability_model(variant: BlockVariant, decoder_layers: usize, d_in: usize, selection: Selection) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_in,
        n_state: 16,
        expand: 2,
        conv_width: 4,
        dropout_p: 0.0,
        n_heads: 2,
        encoder_layers: 2,
        encoder_variant: variant,
        decoder_layers,
        selection,
        scan: ScanMode::Sequential,
    }
}

fn capability_train(steps: usize, target: Option<f64>) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        optimizer: AdamW { lr: 2e-3, weight_decay: 0.01, ..AdamW::default() },
        warmup: 200,
        clip_norm: 1.0,
        eval_every: 250,
        eval_size: 512,
        seed: 0,
        target_accuracy: target,
    }
}

/// Trains and returns (best eval accuracy, step it was reached, final eval accuracy).
fn run(task: TaskSpec, model: ModelConfig, train: TrainConfig) -> bimamba::Result<(f64, usize, f64)> {
    let seed = train.seed;
    let run = TrainRun::new(task, model.clone(), train);
    let out = train_model(run, SequenceModel::new(model, seed)?, |_| {})?;
    let evals = out.run.history.iter().filter(|r| r.split == Split::Eval);
    let best = evals.fold((0.0, 0), |acc, r| if r.accuracy > acc.0 { (r.accuracy, r.step) } else { acc });
    let last = out.run.last_eval().map_or(0.0, |r| r.accuracy);
    Ok((best.0, best.1, last))
}

const COPY_BUDGET: usize = 2000;

fn selective_copying() -> bimamba::Result<Verdict> {
    let task = TaskSpec::selective_copy(64, 16, 4, 1);
    let (_, _, selective) = run(
        task.clone(),
        capability_model(BlockVariant::Bidirectional, 0, 64, Selection::Selective),
        capability_train(COPY_BUDGET, None),
    )?;
    let (_, _, fixed) = run(
        task,
        capability_model(BlockVariant::Bidirectional, 0, 64, Selection::Fixed),
        capability_train(COPY_BUDGET, None),
    )?;
    Ok(verdict(
        selective >= 0.95 && selective - fixed >= 0.2,
        format!(
            "{COPY_BUDGET} steps each: selective {selective:.4} (>= 0.95), fixed {fixed:.4}, gap {:.4} (>= 0.2)",
            selective - fixed
        ),
    ))
}

fn induction_heads() -> bimamba::Result<Verdict> {
    let task = TaskSpec::induction_heads(128, 16, 1);
    let model = capability_model(BlockVariant::Unidirectional, 0, 32, Selection::Selective);
    let untrained = SequenceModel::new(model.clone(), 0)?;
    let (_, chance) = evaluate(&untrained, &task, &eval_set(&task, 2048, 64))?;
    let chance_ok = (chance - 1.0 / 16.0).abs() <= 0.05;
    let (best, step, _) = run(task, model, capability_train(10_000, Some(0.95)))?;
    Ok(verdict(
        best >= 0.95 && chance_ok,
        format!("untrained {chance:.4} (1/16 +- 0.05); trained {best:.4} at step {step} (>= 0.95)"),
    ))
}

fn reversal() -> bimamba::Result<Verdict> {
    let task = TaskSpec::seq_reverse(16, 16, 1);
    let model = capability_model(BlockVariant::Bidirectional, 2, 32, Selection::Selective);
    let (best, step, _) = run(task, model, capability_train(10_000, Some(0.99)))?;
    Ok(verdict(best >= 0.99, format!("token accuracy {best:.4} at step {step} (>= 0.99 within 10000)")))
}

fn scaling() -> bimamba::Result<Verdict> {
    if !is_counting() {
        return Ok(verdict(false, "counting allocator inactive"));
    }
    let cfg = BenchConfig {
        kernels: vec![Kernel::AttentionReference, Kernel::SsmScanParallel],
        ..BenchConfig::default()
    };
    let report = bench_scaling(&cfg, |_| {})?;
    let capped = report.rows.iter().filter(|r| r.capped).count();
    let time = fit_loglog_slope(&report.rows, Metric::Time)?;
    let mem = fit_loglog_slope(&report.rows, Metric::Memory)?;
    let get = |s: &[(Kernel, f64)], k| slope_of(s, k).unwrap_or(f64::NAN);
    let (ta, ts) = (get(&time, Kernel::AttentionReference), get(&time, Kernel::SsmScanParallel));
    let (ma, ms) = (get(&mem, Kernel::AttentionReference), get(&mem, Kernel::SsmScanParallel));
    let pass = ts <= 1.3 && ta >= 1.7 && ts + 0.4 < ta && (ma - 2.0).abs() <= 0.3 && (ms - 1.0).abs() <= 0.3;
    Ok(verdict(
        pass,
        format!(
            "time slope scan {ts:.3} (<= 1.3), attention {ta:.3} (>= 1.7); \
             memory slope attention {ma:.3} (2 +- 0.3), scan {ms:.3} (1 +- 0.3); {capped} capped rows"
        ),
    ))
}

fn checkpoint_round_trip() -> bimamba::Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let src: Vec<usize> = (0..24).map(|i| (i * 7 + 2) % 10).collect();
    let tgt: Vec<usize> = (0..24).map(|i| (i * 5 + 1) % 10).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, variant, dec) in [
        ("unidirectional", BlockVariant::Unidirectional, 0),
        ("bidirectional", BlockVariant::Bidirectional, 0),
        ("encoder-decoder", BlockVariant::Bidirectional, 2),
    ] {
        let model = small_model(variant, dec, 17)?;
        let path = dir.path().join(format!("{name}.ckpt"));
        model.save(&path)?;
        let back = SequenceModel::load(&path)?;
        let forward = |m: &SequenceModel| -> bimamba::Result<Vec<u64>> {
            let mut tape = Tape::new();
            let v = if dec > 0 { m.seq2seq(&mut tape, &src, &tgt, 2)? } else { m.encode(&mut tape, &src, 2)? };
            Ok(tape.value(v).data().iter().map(|x| x.to_bits()).collect())
        };
        let same = forward(&model)? == forward(&back)?;
        pass &= same;
        parts.push(format!("{name} {}", if same { "bit-exact" } else { "differs" }));
    }
    Ok(verdict(pass, parts.join(", ")))
}
