//! Synthetic tasks, AdamW, the training loop and gradient checking.

mod gradcheck;
mod optim;
pub mod tasks;
mod trainer;

pub use gradcheck::{grad_check, relative_error, tensor_relative_error, GradCheckReport, Stencil, REL_FLOOR};
pub use optim::{clip_global_norm, AdamW, OptimizerState, Schedule};
pub use tasks::{gen_induction_heads, gen_selective_copy, gen_seq_reverse, Batch, Example, TaskKind, TaskSpec};
pub use trainer::{
    accuracy, eval_set, evaluate, task_loss, train, train_model, write_metrics_csv, MetricRow, Split, TrainConfig,
    TrainOutcome, TrainRun, METRICS_HEADER,
};
