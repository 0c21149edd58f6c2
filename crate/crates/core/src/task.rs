//! Synthetic sequence tasks for the training harness.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::model::Example;
use crate::position::TokenWithLocation;
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", deny_unknown_fields)]
pub enum TaskSpec {
    /// Reproduce the input sequence; locations are contiguous.
    Copy { n: usize, vocab: usize },
    /// Locations advance by gaps drawn uniformly from `1..=max_gap`; the
    /// target at each position is the token whose corpus location is
    /// closest, ties going to the earlier position.
    Gap { n: usize, vocab: usize, max_gap: u64 },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Copy { n, vocab } if n == 0 || vocab == 0 => {
                Err(GamError::Config("copy task needs n ≥ 1 and vocab ≥ 1".into()))
            }
            TaskSpec::Gap { n, vocab, max_gap } if n < 2 || vocab == 0 || max_gap == 0 => {
                Err(GamError::Config("gap task needs n ≥ 2, vocab ≥ 1 and max_gap ≥ 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn vocab(&self) -> usize {
        match *self {
            TaskSpec::Copy { vocab, .. } | TaskSpec::Gap { vocab, .. } => vocab,
        }
    }

    pub fn seq_len(&self) -> usize {
        match *self {
            TaskSpec::Copy { n, .. } | TaskSpec::Gap { n, .. } => n,
        }
    }
}

/// Position of the corpus-nearest other element; ties go to the earlier one.
pub fn nearest_by_gap(locations: &[u64], alpha: usize) -> usize {
    (0..locations.len())
        .filter(|&b| b != alpha)
        .min_by_key(|&b| (locations[alpha].abs_diff(locations[b]), b))
        .expect("sequence has at least two elements")
}

/// `batch_size` examples, a pure function of `(task, seed)`.
pub fn gen_batch(task: &TaskSpec, seed: u64, batch_size: usize) -> Result<Vec<Example>> {
    task.validate()?;
    let mut rng = rng_from_seed(seed);
    let n = task.seq_len();
    let vocab = task.vocab();
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let (locations, targets) = match *task {
            TaskSpec::Copy { .. } => ((0..n as u64).collect::<Vec<_>>(), ids.clone()),
            TaskSpec::Gap { max_gap, .. } => {
                let mut locs = Vec::with_capacity(n);
                let mut at = 0u64;
                for i in 0..n {
                    if i > 0 {
                        at += rng.random_range(1..=max_gap);
                    }
                    locs.push(at);
                }
                let targets = (0..n).map(|a| ids[nearest_by_gap(&locs, a)]).collect();
                (locs, targets)
            }
        };
        let tokens = ids
            .iter()
            .zip(&locations)
            .map(|(&token_id, &corpus_location)| TokenWithLocation { token_id, corpus_location })
            .collect();
        batch.push(Example { tokens, targets });
    }
    Ok(batch)
}
