use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bimamba::bench::{
    bench_scaling, fit_loglog_slope, write_bench_csv, BenchConfig, CountingAllocator, Kernel, Metric,
};
use bimamba::blocks::{BlockVariant, ModelConfig, SequenceModel};
use bimamba::config::{render, KvMap};
use bimamba::ssm::{ScanMode, Selection};
use bimamba::train::{
    eval_set, evaluate, grad_check, train_model, write_metrics_csv, MetricRow, Split, Stencil, TaskKind, TaskSpec,
    TrainConfig, TrainRun,
};
use bimamba::{Error, Result};
use clap::{CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

/// Gradient checks above this error fail the command.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "bimamba", version, about = "Selective state-space models: training, gradient checks and scaling benchmarks")]
struct Cli {
    /// Config file (flat key=value with dotted sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent directory for the run's timestamped output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a synthetic task.
    Train { config: Option<PathBuf> },
    /// Compare analytic gradients with finite differences.
    Gradcheck { config: Option<PathBuf> },
    /// Time and memory scaling of the scan against attention.
    Bench { config: Option<PathBuf> },
    /// Evaluate a checkpoint on the configured task.
    Eval { checkpoint: PathBuf, config: Option<PathBuf> },
    /// Print every config key with its default.
    Schema,
}

/// A failure that should print usage and the config schema.
struct UsageError(Error);

enum Failure {
    Usage(UsageError),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(UsageError(e)),
            other => Failure::Run(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(Failure::Usage(UsageError(e))) => {
            eprintln!("error: {e}\n");
            eprintln!("{}", Cli::command().render_usage());
            eprintln!("\nconfig keys and defaults:\n{}", schema());
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> std::result::Result<ExitCode, Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads {n}: {e}")))?;
    }
    match &cli.command {
        Command::Schema => {
            println!("{}", schema());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config } => cmd_train(cli, load_kv(cli, config.as_deref())?),
        Command::Gradcheck { config } => cmd_gradcheck(cli, load_kv(cli, config.as_deref())?),
        Command::Bench { config } => cmd_bench(cli, load_kv(cli, config.as_deref())?),
        Command::Eval { checkpoint, config } => cmd_eval(cli, checkpoint, load_kv(cli, config.as_deref())?),
    }
}

fn load_kv(cli: &Cli, positional: Option<&Path>) -> Result<KvMap> {
    let path = match (positional, cli.config.as_deref()) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Config(format!(
                "two config files given: {} and {}",
                a.display(),
                b.display()
            )))
        }
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => return Ok(KvMap::default()),
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    KvMap::parse(&text)
}

fn apply_seed(cli: &Cli, kv: &mut KvMap, keys: &[&str]) {
    if let Some(seed) = cli.seed {
        for key in keys {
            kv.insert(*key, seed);
        }
    }
}

/// Creates `<out>/<label>-<timestamp>`, adding a suffix if that exists.
fn fresh_dir(out: &Path, label: &str) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = out.join(format!("{label}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn write_echo(dir: &Path, pairs: &[(String, String)]) -> Result<()> {
    fs::write(dir.join("run.cfg"), render(pairs))?;
    Ok(())
}

/// Model keys default to the task's vocabulary and, for seq2seq tasks, a
/// two-layer decoder.
fn model_base(task: &TaskSpec) -> ModelConfig {
    ModelConfig {
        vocab_size: task.vocab_size,
        decoder_layers: if task.kind.is_seq2seq() { 2 } else { 0 },
        ..ModelConfig::default()
    }
}

fn train_run(kv: &mut KvMap) -> Result<TrainRun> {
    let task = TaskSpec::from_kv(kv, "task.")?;
    let model = ModelConfig::from_kv_or(kv, "model.", &model_base(&task))?;
    let train = TrainConfig::from_kv(kv, "train.")?;
    let run = TrainRun::new(task, model, train);
    run.validate()?;
    Ok(run)
}

fn run_pairs(run: &TrainRun) -> Vec<(String, String)> {
    let mut pairs = run.task.to_pairs("task.");
    pairs.extend(run.model.to_pairs("model."));
    pairs.extend(run.train.to_pairs("train."));
    pairs
}

fn cmd_train(cli: &Cli, mut kv: KvMap) -> std::result::Result<ExitCode, Failure> {
    apply_seed(cli, &mut kv, &["task.seed", "train.seed"]);
    let run = train_run(&mut kv)?;
    kv.finish()?;
    let dir = fresh_dir(&cli.out, "train")?;
    write_echo(&dir, &run_pairs(&run))?;
    println!("output: {}", dir.display());

    let model = SequenceModel::new(run.model.clone(), run.train.seed)?;
    println!("parameters: {}", model.store.numel());
    let outcome = train_model(run, model, |r: &MetricRow| {
        println!("step {:>6} {:<5} loss {:.5} accuracy {:.4}", r.step, r.split, r.loss, r.accuracy);
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::Diverged { step, loss, initial, history }) => {
            write_metrics_csv(BufWriter::new(fs::File::create(dir.join("metrics.csv"))?), &history)?;
            return Err(Failure::Run(Error::Diverged { step, loss, initial, history }));
        }
        Err(e) => return Err(e.into()),
    };
    write_metrics_csv(BufWriter::new(fs::File::create(dir.join("metrics.csv"))?), &outcome.run.history)?;
    outcome.model.save(dir.join("model.ckpt"))?;
    if let Some(r) = outcome.run.last_eval() {
        println!("final eval at step {}: loss {:.5} accuracy {:.4}", r.step, r.loss, r.accuracy);
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug)]
struct GradcheckConfig {
    batch: usize,
    /// Plain central differences at this step; extrapolated when absent.
    eps: Option<f64>,
    h0: f64,
    seed: u64,
}

fn gradcheck_model_base(task: &TaskSpec) -> ModelConfig {
    ModelConfig {
        vocab_size: task.vocab_size,
        d_in: 8,
        n_state: 4,
        expand: 2,
        conv_width: 3,
        dropout_p: 0.0,
        n_heads: 2,
        encoder_layers: 1,
        encoder_variant: BlockVariant::Unidirectional,
        decoder_layers: if task.kind.is_seq2seq() { 1 } else { 0 },
        selection: Selection::Selective,
        scan: ScanMode::Parallel { chunk: 3 },
    }
}

fn cmd_gradcheck(cli: &Cli, mut kv: KvMap) -> std::result::Result<ExitCode, Failure> {
    apply_seed(cli, &mut kv, &["task.seed", "gradcheck.seed"]);
    let task = TaskSpec::from_kv_or(&mut kv, "task.", &TaskSpec::induction_heads(8, 8, 0))?;
    let model_cfg = ModelConfig::from_kv_or(&mut kv, "model.", &gradcheck_model_base(&task))?;
    let gc = GradcheckConfig {
        batch: kv.take_or("gradcheck.batch", 2)?,
        eps: kv.take("gradcheck.eps")?,
        h0: kv.take_or("gradcheck.h0", 0.1)?,
        seed: kv.take_or("gradcheck.seed", 0)?,
    };
    kv.finish()?;
    let run = TrainRun::new(task.clone(), model_cfg.clone(), TrainConfig::default());
    run.validate()?;

    let dir = fresh_dir(&cli.out, "gradcheck")?;
    let mut pairs = task.to_pairs("task.");
    pairs.extend(model_cfg.to_pairs("model."));
    pairs.push(("gradcheck.batch".into(), gc.batch.to_string()));
    if let Some(eps) = gc.eps {
        pairs.push(("gradcheck.eps".into(), eps.to_string()));
    }
    pairs.push(("gradcheck.h0".into(), gc.h0.to_string()));
    pairs.push(("gradcheck.seed".into(), gc.seed.to_string()));
    write_echo(&dir, &pairs)?;

    let model = SequenceModel::new(model_cfg, gc.seed)?;
    let batch = task.batch(gc.batch, &mut ChaCha8Rng::seed_from_u64(task.seed));
    let stencil = match gc.eps {
        Some(eps) => Stencil::Central { eps },
        None => Stencil::Extrapolated { h0: gc.h0 },
    };
    let report = grad_check(&model, &task, &batch, stencil)?;
    println!("checked {} parameters with {stencil:?}", report.checked);
    println!("max relative error {:.3e} (worst parameter {})", report.max_rel_err, report.worst);
    println!(
        "max elementwise error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        report.max_elem_err, report.worst_elem, report.analytic, report.numeric
    );
    fs::write(
        dir.join("gradcheck.txt"),
        format!(
            "max_rel_err={:e}\nworst={}\nmax_elem_err={:e}\nworst_elem={}\n",
            report.max_rel_err, report.worst, report.max_elem_err, report.worst_elem
        ),
    )?;
    if report.max_rel_err < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", report.max_rel_err);
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_bench(cli: &Cli, mut kv: KvMap) -> std::result::Result<ExitCode, Failure> {
    apply_seed(cli, &mut kv, &["bench.seed"]);
    let cfg = BenchConfig::from_kv(&mut kv, "bench.")?;
    kv.finish()?;
    let dir = fresh_dir(&cli.out, "bench")?;
    write_echo(&dir, &cfg.to_pairs("bench."))?;
    println!("output: {}", dir.display());

    let report = bench_scaling(&cfg, |r| {
        let flag = if r.flagged { " (non-monotone)" } else { "" };
        println!("{}{flag}", r.csv_line());
    })?;
    write_bench_csv(BufWriter::new(fs::File::create(dir.join("bench.csv"))?), &report.rows)?;

    for (l, diff) in &report.scan_agreement {
        println!("scan agreement L={l}: max |parallel - sequential| = {diff:.3e}");
    }
    for metric in [Metric::Time, Metric::Memory] {
        match fit_loglog_slope(&report.rows, metric) {
            Ok(slopes) => {
                for (k, s) in slopes {
                    println!("{metric:?} slope {k}: {s:.3}");
                }
            }
            Err(e) => println!("{metric:?} slopes unavailable: {e}"),
        }
    }
    if !bimamba::bench::is_counting() {
        println!("note: allocation counting inactive, peak_bytes are zero");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, mut kv: KvMap) -> std::result::Result<ExitCode, Failure> {
    apply_seed(cli, &mut kv, &["task.seed"]);
    let model = SequenceModel::load(checkpoint)?;
    let task = TaskSpec::from_kv(&mut kv, "task.")?;
    let stated = ModelConfig::from_kv_or(&mut kv, "model.", &model.config)?;
    let train = TrainConfig::from_kv(&mut kv, "train.")?;
    kv.finish()?;
    if stated != model.config {
        return Err(Error::Config("model.* keys disagree with the checkpoint header".into()).into());
    }
    TrainRun::new(task.clone(), model.config.clone(), train.clone()).validate()?;

    let dir = fresh_dir(&cli.out, "eval")?;
    let mut pairs = vec![("eval.checkpoint".to_string(), checkpoint.display().to_string())];
    pairs.extend(task.to_pairs("task."));
    pairs.extend(model.config.to_pairs("model."));
    pairs.extend(train.to_pairs("train."));
    write_echo(&dir, &pairs)?;

    let batches = eval_set(&task, train.eval_size, train.batch_size);
    let (loss, accuracy) = evaluate(&model, &task, &batches)?;
    let row = MetricRow { step: 0, split: Split::Eval, loss, accuracy };
    write_metrics_csv(BufWriter::new(fs::File::create(dir.join("metrics.csv"))?), &[row])?;
    println!("eval {}: loss {loss:.5} accuracy {accuracy:.4}", task.kind);
    Ok(ExitCode::SUCCESS)
}

fn schema() -> String {
    let task = TaskSpec::selective_copy(64, 16, 4, 0);
    let mut pairs = task.to_pairs("task.");
    pairs.extend(ModelConfig::default().to_pairs("model."));
    pairs.extend(TrainConfig::default().to_pairs("train."));
    pairs.push(("train.target_accuracy".into(), "<unset>".into()));
    pairs.extend(BenchConfig::default().to_pairs("bench."));
    pairs.extend([
        ("gradcheck.batch".to_string(), "2".to_string()),
        ("gradcheck.eps".to_string(), "<unset: extrapolated differences>".to_string()),
        ("gradcheck.h0".to_string(), "0.1".to_string()),
        ("gradcheck.seed".to_string(), "0".to_string()),
    ]);
    let kinds = [TaskKind::SelectiveCopy, TaskKind::InductionHeads, TaskKind::SeqReverse, TaskKind::SeqIdentity]
        .map(|k| k.as_str())
        .join("|");
    format!(
        "{}# task.kind: {kinds}\n# model.encoder_variant: unidirectional|bidirectional\n# model.scan: parallel|sequential\n# bench.kernels: {}\n",
        render(&pairs),
        Kernel::ALL.map(|k| k.as_str()).join(",")
    )
}
