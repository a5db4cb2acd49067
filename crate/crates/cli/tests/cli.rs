use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bimamba(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bimamba"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn run_dirs(out: &Path, label: &str) -> Vec<PathBuf> {
    let mut dirs: Vec<_> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(label))
        .collect();
    dirs.sort();
    dirs
}

const TINY_TRAIN: &str = "\
task.kind=selective_copy
task.seq_len=12
task.vocab_size=8
task.n_memorize=2
model.d_in=8
model.n_state=4
model.encoder_layers=1
train.steps=6
train.batch_size=4
train.warmup=2
train.eval_every=3
train.eval_size=8
";

#[test]
fn unknown_flag_exits_with_usage_status() {
    let out = tempfile::tempdir().unwrap();
    let o = bimamba(&["train", "--no-such-flag"], out.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_config_prints_schema_and_exits_2() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("bad.cfg");
    fs::write(&cfg, "model.d_in=eight\n").unwrap();
    let o = bimamba(&["train", cfg.to_str().unwrap()], out.path());
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("model.d_in=eight"), "{err}");
    assert!(err.contains("Usage"), "{err}");
    assert!(err.contains("train.steps=") && err.contains("bench.lengths="), "{err}");

    fs::write(&cfg, "model.colour=blue\n").unwrap();
    let o = bimamba(&["train", cfg.to_str().unwrap()], out.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("model.colour"));

    fs::write(&cfg, "no equals sign\n").unwrap();
    let o = bimamba(&["train", cfg.to_str().unwrap()], out.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn schema_lists_every_section() {
    let out = tempfile::tempdir().unwrap();
    let o = bimamba(&["schema"], out.path());
    assert!(o.status.success());
    let s = text(&o.stdout);
    for key in ["task.kind=", "model.scan=", "train.lr=", "bench.trials=", "gradcheck.h0="] {
        assert!(s.contains(key), "{key} missing from\n{s}");
    }
}

#[test]
fn train_then_eval_round_trip() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("tiny.cfg");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    let o = bimamba(&["--config", cfg.to_str().unwrap(), "train"], out.path());
    assert!(o.status.success(), "{}", text(&o.stderr));

    let dirs = run_dirs(out.path(), "train-");
    assert_eq!(dirs.len(), 1);
    let run = &dirs[0];
    let echo = fs::read_to_string(run.join("run.cfg")).unwrap();
    assert!(echo.contains("train.steps=6") && echo.contains("model.d_in=8") && echo.contains("train.lr="));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,split,loss,accuracy"));
    assert!(lines.any(|l| l.starts_with("6,eval,")), "{metrics}");
    assert!(run.join("model.ckpt").exists());

    let ckpt = run.join("model.ckpt");
    let o = bimamba(&["eval", ckpt.to_str().unwrap(), cfg.to_str().unwrap()], out.path());
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("accuracy"));

    // The same config written twice must land in distinct directories.
    let o = bimamba(&["train", cfg.to_str().unwrap(), "--seed", "4"], out.path());
    assert!(o.status.success());
    let dirs = run_dirs(out.path(), "train-");
    assert_eq!(dirs.len(), 2);
    let echo = fs::read_to_string(dirs[1].join("run.cfg")).unwrap_or_default()
        + &fs::read_to_string(dirs[0].join("run.cfg")).unwrap();
    assert!(echo.contains("train.seed=4"));
}

#[test]
fn eval_rejects_a_mismatched_model_section() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("tiny.cfg");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    assert!(bimamba(&["train", cfg.to_str().unwrap()], out.path()).status.success());
    let ckpt = run_dirs(out.path(), "train-")[0].join("model.ckpt");
    fs::write(&cfg, TINY_TRAIN.replace("model.d_in=8", "model.d_in=16")).unwrap();
    let o = bimamba(&["eval", ckpt.to_str().unwrap(), cfg.to_str().unwrap()], out.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_default_passes() {
    let out = tempfile::tempdir().unwrap();
    let o = bimamba(&["gradcheck"], out.path());
    let stdout = text(&o.stdout);
    assert!(o.status.success(), "{stdout}{}", text(&o.stderr));
    assert!(stdout.contains("max relative error"), "{stdout}");
    assert!(stdout.contains("worst parameter"), "{stdout}");
}

#[test]
fn bench_writes_csv() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("bench.cfg");
    fs::write(&cfg, "bench.lengths=16,32,64,128\nbench.d_model=4\nbench.n_state=2\nbench.chunk=8\n").unwrap();
    let o = bimamba(&["bench", cfg.to_str().unwrap()], out.path());
    assert!(o.status.success(), "{}", text(&o.stderr));
    let dir = &run_dirs(out.path(), "bench-")[0];
    let csv = fs::read_to_string(dir.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kernel,seq_len,wall_time_ns,peak_bytes,trials"));
    assert_eq!(lines.count(), 12);
    // The binary installs the counting allocator, so peaks are real.
    assert!(!text(&o.stdout).contains("allocation counting inactive"));
}
