//! Selective state-space (Mamba) layers built from scratch on a small
//! reverse-mode tape: the SSM core with sequential and parallel scans, the
//! unidirectional, bidirectional and cross-attention decoder blocks, a
//! training harness for synthetic sequence tasks, and scaling benchmarks.

pub mod bench;
pub mod config;
pub mod blocks;
pub mod error;
pub mod numerics;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Tensor;
