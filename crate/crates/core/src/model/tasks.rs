//! Synthetic training tasks.
//!
//! All three exercise position-sensitive attention:
//!
//! * `copy`: random tokens, a separator, then the same tokens again. Only the
//!   echoed half is scored.
//! * `induction`: a random block followed by its exact repeat. Only the
//!   repeat is scored, so the model must look back one block length.
//! * `char-corpus`: windows of a small English text shipped with the crate,
//!   one token per character.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::forward::Example;

/// The text behind the `char-corpus` task.
pub const CORPUS: &str = include_str!("../../data/corpus.txt");

/// Token reserved as the copy separator.
pub const SEPARATOR: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Induction,
    CharCorpus,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Copy, Task::Induction, Task::CharCorpus];

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Induction => "induction",
            Task::CharCorpus => "char-corpus",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(Task::Copy),
            "induction" | "induction-heads" => Ok(Task::Induction),
            "char-corpus" | "corpus" | "chars" => Ok(Task::CharCorpus),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// Sorted distinct characters of [`CORPUS`]; a character's token is its index.
pub fn corpus_alphabet() -> Vec<char> {
    let mut chars: Vec<char> = CORPUS.chars().collect();
    chars.sort_unstable();
    chars.dedup();
    chars
}

/// Draws batches of one task.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    task: Task,
    vocab: usize,
    /// Tokens per example.
    seq_len: usize,
    corpus: Vec<usize>,
}

impl TaskSampler {
    /// `seq_len` is the full example length; copy uses `(seq_len − 1) / 2`
    /// payload tokens and induction `seq_len / 2`.
    pub fn new(task: Task, vocab: usize, seq_len: usize) -> Result<Self> {
        let corpus = match task {
            Task::Copy | Task::Induction => {
                if seq_len < 3 {
                    return Err(Error::Config(format!("{task} needs at least 3 tokens per example")));
                }
                if vocab < 3 {
                    return Err(Error::Config(format!("{task} needs a vocabulary of at least 3")));
                }
                Vec::new()
            }
            Task::CharCorpus => {
                let alphabet = corpus_alphabet();
                if vocab < alphabet.len() {
                    return Err(Error::Config(format!(
                        "char-corpus needs a vocabulary of at least {}, got {vocab}",
                        alphabet.len()
                    )));
                }
                let ids: Vec<usize> = CORPUS
                    .chars()
                    .map(|c| alphabet.binary_search(&c).expect("alphabet covers corpus"))
                    .collect();
                if ids.len() <= seq_len {
                    return Err(Error::Config(format!("corpus is shorter than {seq_len} tokens")));
                }
                if seq_len < 2 {
                    return Err(Error::Config("char-corpus needs at least 2 tokens per example".into()));
                }
                ids
            }
        };
        Ok(TaskSampler {
            task,
            vocab,
            seq_len,
            corpus,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Example {
        match self.task {
            Task::Copy => {
                let k = (self.seq_len - 1) / 2;
                let payload: Vec<usize> = (0..k).map(|_| rng.random_range(1..self.vocab)).collect();
                let mut tokens = payload.clone();
                tokens.push(SEPARATOR);
                tokens.extend(&payload);
                let loss_mask = (0..tokens.len()).map(|t| t > k).collect();
                Example { tokens, loss_mask }
            }
            Task::Induction => {
                let k = self.seq_len / 2;
                let block: Vec<usize> = (0..k).map(|_| rng.random_range(0..self.vocab)).collect();
                let mut tokens = block.clone();
                tokens.extend(&block);
                let loss_mask = (0..tokens.len()).map(|t| t >= k).collect();
                Example { tokens, loss_mask }
            }
            Task::CharCorpus => {
                let start = rng.random_range(0..self.corpus.len() - self.seq_len);
                Example::dense(self.corpus[start..start + self.seq_len].to_vec())
            }
        }
    }

    pub fn batch(&self, size: usize, rng: &mut impl Rng) -> Vec<Example> {
        (0..size).map(|_| self.sample(rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn copy_echoes_payload_after_separator() {
        let s = TaskSampler::new(Task::Copy, 10, 9).unwrap();
        let ex = s.sample(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(ex.tokens.len(), 9);
        assert_eq!(ex.tokens[4], SEPARATOR);
        assert_eq!(ex.tokens[..4], ex.tokens[5..]);
        assert_eq!(ex.loss_mask.iter().filter(|&&m| m).count(), 4);
        assert!(!ex.loss_mask[4] && ex.loss_mask[5]);
    }

    #[test]
    fn induction_repeats_block() {
        let s = TaskSampler::new(Task::Induction, 10, 8).unwrap();
        let ex = s.sample(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(ex.tokens[..4], ex.tokens[4..]);
        assert!(ex.loss_mask[4] && !ex.loss_mask[3]);
    }

    #[test]
    fn corpus_fits_default_vocab() {
        assert!(corpus_alphabet().len() <= 64);
        let s = TaskSampler::new(Task::CharCorpus, 64, 32).unwrap();
        let ex = s.sample(&mut ChaCha8Rng::seed_from_u64(5));
        assert!(ex.tokens.iter().all(|&t| t < 64));
        assert!(TaskSampler::new(Task::CharCorpus, 8, 32).is_err());
    }

    #[test]
    fn task_names_roundtrip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert_eq!("induction-heads".parse::<Task>().unwrap(), Task::Induction);
    }
}
