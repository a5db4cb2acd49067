use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ModelConfig, SequenceModel};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::train::optim::{clip_global_norm, AdamW, OptimizerState, Schedule};
use crate::train::tasks::{Batch, TaskSpec};

/// Mixed into the task seed so the eval set never overlaps the training stream.
const EVAL_STREAM: u64 = 0x0005_EED0_E7A1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "step,split,loss,accuracy";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{:.17e},{:.17e}", r.step, r.split, r.loss, r.accuracy)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub warmup: usize,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_size: usize,
    /// Seeds parameter init and dropout masks.
    pub seed: u64,
    /// Stop as soon as eval accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            optimizer: AdamW::default(),
            warmup: 1000,
            clip_norm: 1.0,
            eval_every: 250,
            eval_size: 512,
            seed: 0,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(Error::Config("batch_size, eval_every and eval_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0, eps and clip_norm > 0".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak: self.optimizer.lr,
            warmup: self.warmup,
            total: self.steps,
        }
    }

    pub fn to_pairs(&self, prefix: &str) -> Vec<(String, String)> {
        let o = &self.optimizer;
        let mut pairs = vec![
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", o.lr.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("warmup", self.warmup.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_size", self.eval_size.to_string()),
            ("seed", self.seed.to_string()),
        ];
        if let Some(t) = self.target_accuracy {
            pairs.push(("target_accuracy", t.to_string()));
        }
        pairs.into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let key = |k: &str| format!("{prefix}{k}");
        let cfg = Self {
            steps: kv.take_or(&key("steps"), d.steps)?,
            batch_size: kv.take_or(&key("batch_size"), d.batch_size)?,
            optimizer: AdamW {
                lr: kv.take_or(&key("lr"), d.optimizer.lr)?,
                beta1: kv.take_or(&key("beta1"), d.optimizer.beta1)?,
                beta2: kv.take_or(&key("beta2"), d.optimizer.beta2)?,
                eps: kv.take_or(&key("eps"), d.optimizer.eps)?,
                weight_decay: kv.take_or(&key("weight_decay"), d.optimizer.weight_decay)?,
            },
            warmup: kv.take_or(&key("warmup"), d.warmup)?,
            clip_norm: kv.take_or(&key("clip_norm"), d.clip_norm)?,
            eval_every: kv.take_or(&key("eval_every"), d.eval_every)?,
            eval_size: kv.take_or(&key("eval_size"), d.eval_size)?,
            seed: kv.take_or(&key("seed"), d.seed)?,
            target_accuracy: kv.take(&key("target_accuracy"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TaskSpec {
    pub fn to_pairs(&self, prefix: &str) -> Vec<(String, String)> {
        [
            ("kind", self.kind.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("n_memorize", self.n_memorize.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v))
        .collect()
    }

    pub fn from_kv(kv: &mut KvMap, prefix: &str) -> Result<Self> {
        Self::from_kv_or(kv, prefix, &Self::selective_copy(64, 16, 4, 0))
    }

    /// Like [`Self::from_kv`], with absent keys taken from `base`.
    pub fn from_kv_or(kv: &mut KvMap, prefix: &str, base: &Self) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let spec = Self {
            kind: kv.take_or(&key("kind"), base.kind)?,
            seq_len: kv.take_or(&key("seq_len"), base.seq_len)?,
            vocab_size: kv.take_or(&key("vocab_size"), base.vocab_size)?,
            n_memorize: kv.take_or(&key("n_memorize"), base.n_memorize)?,
            seed: kv.take_or(&key("seed"), base.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub history: Vec<MetricRow>,
}

impl TrainRun {
    pub fn new(task: TaskSpec, model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            task,
            model,
            train,
            history: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocab_size {} differs from model vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.kind.is_seq2seq() != (self.model.decoder_layers > 0) {
            return Err(Error::Config(format!(
                "task {} {} a decoder",
                self.task.kind,
                if self.task.kind.is_seq2seq() { "needs" } else { "does not use" }
            )));
        }
        Ok(())
    }

    pub fn last_eval(&self) -> Option<&MetricRow> {
        self.history.iter().rev().find(|r| r.split == Split::Eval)
    }

    /// Deterministic evaluation batches.
    pub fn eval_set(&self) -> Vec<Batch> {
        eval_set(&self.task, self.train.eval_size, self.train.batch_size)
    }
}

pub fn eval_set(task: &TaskSpec, size: usize, batch_size: usize) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ EVAL_STREAM);
    let mut out = Vec::new();
    let mut left = size;
    while left > 0 {
        let n = left.min(batch_size);
        out.push(task.batch(n, &mut rng));
        left -= n;
    }
    out
}

/// Mean cross-entropy of the task's targets and the logits it was computed from.
pub fn task_loss(model: &SequenceModel, tape: &mut Tape, spec: &TaskSpec, batch: &Batch) -> Result<(Var, Var)> {
    let logits = if spec.kind.is_seq2seq() {
        model.seq2seq(tape, &batch.inputs, &batch.decoder_inputs, batch.size)?
    } else {
        model.classify(tape, &batch.inputs, batch.size, &spec.readout_positions())?
    };
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    Ok((loss, logits))
}

/// Fraction of rows whose argmax equals the target.
pub fn accuracy(logits: &Tensor, targets: &[usize]) -> f64 {
    let v = logits.cols();
    let hits = logits
        .data()
        .chunks_exact(v)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
            best.0 == t
        })
        .count();
    hits as f64 / targets.len().max(1) as f64
}

/// Token-weighted mean loss and accuracy in deterministic mode.
pub fn evaluate(model: &SequenceModel, spec: &TaskSpec, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut loss, mut hits, mut count) = (0.0, 0.0, 0usize);
    for b in batches {
        let mut tape = Tape::new();
        let (l, logits) = task_loss(model, &mut tape, spec, b)?;
        let n = b.targets.len();
        loss += tape.value(l).item()? * n as f64;
        hits += accuracy(tape.value(logits), &b.targets) * n as f64;
        count += n;
    }
    let count = count.max(1) as f64;
    Ok((loss / count, hits / count))
}

pub struct TrainOutcome {
    pub run: TrainRun,
    pub model: SequenceModel,
    pub optimizer: OptimizerState,
}

/// Trains a freshly initialized model.
pub fn train(run: TrainRun) -> Result<TrainOutcome> {
    run.validate()?;
    let model = SequenceModel::new(run.model.clone(), run.train.seed)?;
    train_model(run, model, |_| {})
}

/// Trains `model` in place, calling `on_metric` for every appended row.
pub fn train_model(mut run: TrainRun, mut model: SequenceModel, mut on_metric: impl FnMut(&MetricRow)) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = run.train.clone();
    let schedule = cfg.schedule();
    let eval_batches = run.eval_set();
    let mut data_rng = ChaCha8Rng::seed_from_u64(run.task.seed);
    let mut opt = OptimizerState::new(&model.store, cfg.optimizer.clone());

    let mut initial: Option<f64> = None;
    let mut over = 0usize;
    let (mut window_loss, mut window_acc, mut window_n) = (0.0, 0.0, 0usize);

    let mut push = |run: &mut TrainRun, row: MetricRow| {
        on_metric(&row);
        run.history.push(row);
    };

    let (l0, a0) = evaluate(&model, &run.task, &eval_batches)?;
    push(&mut run, MetricRow { step: 0, split: Split::Eval, loss: l0, accuracy: a0 });
    if cfg.target_accuracy.is_some_and(|t| a0 >= t) {
        return Ok(TrainOutcome { run, model, optimizer: opt });
    }

    for step in 0..cfg.steps {
        let batch = run.task.batch(cfg.batch_size, &mut data_rng);
        let mut tape = Tape::training(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64));
        let (loss, logits) = task_loss(&model, &mut tape, &run.task, &batch)?;
        let loss_value = tape.value(loss).item()?;
        window_acc += accuracy(tape.value(logits), &batch.targets);
        let mut grads = tape.backward(loss)?.into_param_grads(&model.store);
        drop(tape);

        let init = *initial.get_or_insert(loss_value);
        if loss_value > 10.0 * init {
            over += 1;
            if over >= 100 {
                return Err(Error::Diverged {
                    step,
                    loss: loss_value,
                    initial: init,
                    history: run.history,
                });
            }
        } else {
            over = 0;
        }

        clip_global_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut model.store, &grads, schedule.lr(step))?;
        window_loss += loss_value;
        window_n += 1;

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let n = window_n as f64;
            push(
                &mut run,
                MetricRow { step: done, split: Split::Train, loss: window_loss / n, accuracy: window_acc / n },
            );
            (window_loss, window_acc, window_n) = (0.0, 0.0, 0);
            let (l, a) = evaluate(&model, &run.task, &eval_batches)?;
            push(&mut run, MetricRow { step: done, split: Split::Eval, loss: l, accuracy: a });
            if cfg.target_accuracy.is_some_and(|t| a >= t) {
                break;
            }
        }
    }
    Ok(TrainOutcome { run, model, optimizer: opt })
}
