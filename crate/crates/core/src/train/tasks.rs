//! Synthetic sequence tasks.
//!
//! Token layout per task:
//! * selective copy: `0` is noise, `1` marks a query slot, `2..V` are content.
//!   The last `n_memorize` positions are query slots; content sits at sorted
//!   random positions before them.
//! * induction heads: `V-1` is the trigger, `0..V-1` are ordinary tokens.
//! * reversal: `0` is the decoder start token, `1..V` are content.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const NOISE: usize = 0;
pub const MARKER: usize = 1;
pub const START: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    SelectiveCopy,
    InductionHeads,
    SeqReverse,
    /// Reversal's control: the target is the source itself.
    SeqIdentity,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SelectiveCopy => "selective_copy",
            TaskKind::InductionHeads => "induction_heads",
            TaskKind::SeqReverse => "seq_reverse",
            TaskKind::SeqIdentity => "seq_identity",
        }
    }

    pub fn is_seq2seq(self) -> bool {
        matches!(self, TaskKind::SeqReverse | TaskKind::SeqIdentity)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selective_copy" => Ok(TaskKind::SelectiveCopy),
            "induction_heads" => Ok(TaskKind::InductionHeads),
            "seq_reverse" => Ok(TaskKind::SeqReverse),
            "seq_identity" => Ok(TaskKind::SeqIdentity),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Selective copy only.
    pub n_memorize: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn selective_copy(seq_len: usize, vocab_size: usize, n_memorize: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::SelectiveCopy,
            seq_len,
            vocab_size,
            n_memorize,
            seed,
        }
    }

    pub fn induction_heads(seq_len: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::InductionHeads,
            seq_len,
            vocab_size,
            n_memorize: 0,
            seed,
        }
    }

    pub fn seq_reverse(seq_len: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::SeqReverse,
            seq_len,
            vocab_size,
            n_memorize: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} is below 4", self.vocab_size));
        }
        if self.seq_len == 0 {
            return fail("seq_len must be positive".into());
        }
        match self.kind {
            TaskKind::SelectiveCopy => {
                if self.n_memorize >= self.seq_len || 2 * self.n_memorize > self.seq_len {
                    return fail(format!(
                        "n_memorize {} needs {} content slots plus as many query slots within seq_len {}",
                        self.n_memorize, self.n_memorize, self.seq_len
                    ));
                }
            }
            TaskKind::InductionHeads => {
                if self.seq_len < 3 {
                    return fail("induction heads needs seq_len >= 3".into());
                }
            }
            TaskKind::SeqReverse | TaskKind::SeqIdentity => {}
        }
        Ok(())
    }

    /// Number of target tokens per example.
    pub fn targets_per_example(&self) -> usize {
        match self.kind {
            TaskKind::SelectiveCopy => self.n_memorize,
            TaskKind::InductionHeads => 1,
            TaskKind::SeqReverse | TaskKind::SeqIdentity => self.seq_len,
        }
    }

    /// Encoder positions whose states are classified; empty for seq2seq.
    pub fn readout_positions(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::SelectiveCopy => (self.seq_len - self.n_memorize..self.seq_len).collect(),
            TaskKind::InductionHeads => vec![self.seq_len - 1],
            TaskKind::SeqReverse | TaskKind::SeqIdentity => Vec::new(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        match self.kind {
            TaskKind::SelectiveCopy => sample_selective_copy(self, rng),
            TaskKind::InductionHeads => sample_induction_heads(self, rng),
            TaskKind::SeqReverse => sample_seq2seq(self, rng, true),
            TaskKind::SeqIdentity => sample_seq2seq(self, rng, false),
        }
    }

    pub fn batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Batch {
        Batch::from_examples(&(0..size).map(|_| self.sample(rng)).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Teacher-forced decoder inputs; empty for classification tasks.
    pub decoder_inputs: Vec<usize>,
}

/// Equal-length examples flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub decoder_inputs: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[Example]) -> Self {
        Self {
            size: examples.len(),
            inputs: examples.iter().flat_map(|e| e.inputs.iter().copied()).collect(),
            targets: examples.iter().flat_map(|e| e.targets.iter().copied()).collect(),
            decoder_inputs: examples.iter().flat_map(|e| e.decoder_inputs.iter().copied()).collect(),
        }
    }
}

fn sample_selective_copy<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Example {
    let (l, n) = (spec.seq_len, spec.n_memorize);
    let mut inputs = vec![NOISE; l];
    let mut positions = sample(rng, l - n, n).into_vec();
    positions.sort_unstable();
    let targets: Vec<usize> = positions.iter().map(|_| rng.random_range(2..spec.vocab_size)).collect();
    for (&p, &t) in positions.iter().zip(&targets) {
        inputs[p] = t;
    }
    for slot in &mut inputs[l - n..] {
        *slot = MARKER;
    }
    Example {
        inputs,
        targets,
        decoder_inputs: Vec::new(),
    }
}

fn sample_induction_heads<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Example {
    let (l, trigger) = (spec.seq_len, spec.vocab_size - 1);
    let mut inputs: Vec<usize> = (0..l).map(|_| rng.random_range(0..trigger)).collect();
    let p = rng.random_range(0..l - 2);
    inputs[p] = trigger;
    inputs[l - 1] = trigger;
    Example {
        targets: vec![inputs[p + 1]],
        inputs,
        decoder_inputs: Vec::new(),
    }
}

fn sample_seq2seq<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R, reverse: bool) -> Example {
    let inputs: Vec<usize> = (0..spec.seq_len).map(|_| rng.random_range(1..spec.vocab_size)).collect();
    let mut targets = inputs.clone();
    if reverse {
        targets.reverse();
    }
    let decoder_inputs = std::iter::once(START).chain(targets[..targets.len() - 1].iter().copied()).collect();
    Example {
        inputs,
        targets,
        decoder_inputs,
    }
}

fn seeded(spec: &TaskSpec) -> Result<ChaCha8Rng> {
    spec.validate()?;
    Ok(ChaCha8Rng::seed_from_u64(spec.seed))
}

pub fn gen_selective_copy(spec: &TaskSpec) -> Result<Example> {
    if spec.kind != TaskKind::SelectiveCopy {
        return Err(Error::contract(format!("expected selective_copy, got {}", spec.kind)));
    }
    Ok(sample_selective_copy(spec, &mut seeded(spec)?))
}

pub fn gen_induction_heads(spec: &TaskSpec) -> Result<Example> {
    if spec.kind != TaskKind::InductionHeads {
        return Err(Error::contract(format!("expected induction_heads, got {}", spec.kind)));
    }
    Ok(sample_induction_heads(spec, &mut seeded(spec)?))
}

pub fn gen_seq_reverse(spec: &TaskSpec) -> Result<Example> {
    if spec.kind != TaskKind::SeqReverse {
        return Err(Error::contract(format!("expected seq_reverse, got {}", spec.kind)));
    }
    Ok(sample_seq2seq(spec, &mut seeded(spec)?, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selective_copy_layout() {
        let spec = TaskSpec::selective_copy(64, 16, 4, 3);
        let ex = gen_selective_copy(&spec).unwrap();
        assert_eq!(ex.inputs.len(), 64);
        assert_eq!(&ex.inputs[60..], &[MARKER; 4]);
        let content: Vec<usize> = ex.inputs[..60].iter().copied().filter(|&t| t != NOISE).collect();
        assert_eq!(content, ex.targets);
        assert!(ex.targets.iter().all(|&t| (2..16).contains(&t)));
        assert_eq!(ex, gen_selective_copy(&spec).unwrap());
    }

    #[test]
    fn selective_copy_with_nothing_to_memorize() {
        let ex = gen_selective_copy(&TaskSpec::selective_copy(8, 4, 0, 0)).unwrap();
        assert!(ex.targets.is_empty());
        assert!(ex.inputs.iter().all(|&t| t == NOISE));
    }

    #[test]
    fn induction_trigger_appears_twice() {
        let spec = TaskSpec::induction_heads(32, 16, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ex = spec.sample(&mut rng);
            let at: Vec<usize> = (0..32).filter(|&i| ex.inputs[i] == 15).collect();
            assert_eq!(at.len(), 2);
            assert_eq!(at[1], 31);
            assert_eq!(ex.targets, vec![ex.inputs[at[0] + 1]]);
        }
    }

    #[test]
    fn minimal_induction_instance() {
        let ex = gen_induction_heads(&TaskSpec::induction_heads(4, 4, 5)).unwrap();
        assert_eq!(ex.inputs[3], 3);
        let p = ex.inputs.iter().position(|&t| t == 3).unwrap();
        assert!(p <= 1);
        assert_eq!(ex.targets[0], ex.inputs[p + 1]);
    }

    #[test]
    fn reversal_and_teacher_forcing() {
        let ex = gen_seq_reverse(&TaskSpec::seq_reverse(3, 16, 4)).unwrap();
        let mut rev = ex.inputs.clone();
        rev.reverse();
        assert_eq!(ex.targets, rev);
        assert_eq!(ex.decoder_inputs, vec![START, rev[0], rev[1]]);

        let one = gen_seq_reverse(&TaskSpec::seq_reverse(1, 16, 4)).unwrap();
        assert_eq!(one.targets, one.inputs);
        assert_eq!(one.decoder_inputs, vec![START]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(TaskSpec::selective_copy(8, 16, 8, 0).validate().is_err());
        assert!(TaskSpec::selective_copy(8, 3, 2, 0).validate().is_err());
        assert!(gen_induction_heads(&TaskSpec::selective_copy(8, 16, 2, 0)).is_err());
    }
}
