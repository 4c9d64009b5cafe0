//! Synthetic sequence-classification tasks.
//!
//! Every sequence starts with [`CLS`] at position 0. Token id [`PAD`] is
//! reserved and never generated. Datasets are deterministic functions of the
//! spec, and the three splits never share a sequence.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ckd_core::model::{Example, TokenSequence};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, HarnessError, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
/// Marker token of the parity and token-copy tasks.
pub const MARK: usize = 2;
/// Maximum distance between the two tokens of a local-pattern bigram.
pub const LOCAL_GAP: usize = 8;
/// Minimum distance between the two tokens of a local-pattern decoy.
pub const DECOY_GAP: usize = LOCAL_GAP + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label = parity of the number of [`MARK`] tokens.
    Parity,
    /// Class `c` is signalled by tokens `a_c … b_c` at most [`LOCAL_GAP`]
    /// apart; a decoy pair of another class appears at least [`DECOY_GAP`] apart.
    LocalPattern,
    /// Label = the token following the single [`MARK`], modulo the class count.
    TokenCopy,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::LocalPattern => "local-pattern",
            TaskKind::TokenCopy => "token-copy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        [TaskKind::Parity, TaskKind::LocalPattern, TaskKind::TokenCopy]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::LocalPattern,
            vocab_size: 24,
            seq_len: 20,
            num_classes: 4,
            train_size: 2000,
            dev_size: 300,
            test_size: 300,
            seed: 7,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (v, n, c) = (self.vocab_size, self.seq_len, self.num_classes);
        if c < 2 {
            return config_err("tasks need at least two classes");
        }
        match self.kind {
            TaskKind::Parity => {
                if c != 2 {
                    return config_err("parity has exactly two classes");
                }
                if v < 4 || n < 2 {
                    return config_err("parity needs vocab ≥ 4 and seq_len ≥ 2");
                }
            }
            TaskKind::LocalPattern => {
                if v < 2 + 2 * c + 2 {
                    return config_err(format!("local-pattern with {c} classes needs vocab ≥ {}", 4 + 2 * c));
                }
                if n < DECOY_GAP + 4 {
                    return config_err(format!("local-pattern needs seq_len ≥ {}", DECOY_GAP + 4));
                }
            }
            TaskKind::TokenCopy => {
                if v < 3 + c {
                    return config_err(format!("token-copy with {c} classes needs vocab ≥ {}", 3 + c));
                }
                if n < 3 {
                    return config_err("token-copy needs seq_len ≥ 3");
                }
            }
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return config_err("every split needs at least one example");
        }
        Ok(())
    }

    /// `(a_c, b_c)` tokens of a local-pattern class.
    pub fn bigram(&self, class: usize) -> (usize, usize) {
        (3 + 2 * class, 4 + 2 * class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

fn parity_example(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Example {
    let n = spec.seq_len;
    let label = rng.random_range(0..2);
    let mut ids = vec![CLS];
    ids.extend((1..n).map(|_| {
        if rng.random_bool(0.25) {
            MARK
        } else {
            rng.random_range(3..spec.vocab_size)
        }
    }));
    if ids.iter().filter(|&&t| t == MARK).count() % 2 != label {
        let p = rng.random_range(1..n);
        ids[p] = if ids[p] == MARK {
            rng.random_range(3..spec.vocab_size)
        } else {
            MARK
        };
    }
    Example {
        tokens: TokenSequence::unpadded(ids),
        label,
    }
}

fn local_pattern_example(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Example {
    let (n, c) = (spec.seq_len, spec.num_classes);
    let label = rng.random_range(0..c);
    let filler = 3 + 2 * c..spec.vocab_size;
    let mut ids = vec![CLS];
    ids.extend((1..n).map(|_| rng.random_range(filler.clone())));

    let (a, b) = spec.bigram(label);
    let gap = rng.random_range(1..=LOCAL_GAP);
    let i = rng.random_range(1..n - gap);
    ids[i] = a;
    ids[i + gap] = b;

    // decoy: another class's tokens, well beyond the gap
    let other = (label + rng.random_range(1..c)) % c;
    let (da, db) = spec.bigram(other);
    let free: Vec<usize> = (1..n).filter(|&p| p != i && p != i + gap).collect();
    let far: Vec<(usize, usize)> = free
        .iter()
        .flat_map(|&p| free.iter().map(move |&q| (p, q)))
        .filter(|&(p, q)| q >= p + DECOY_GAP)
        .collect();
    if let Some(&(p, q)) = far.choose(rng) {
        let (x, y) = if rng.random_bool(0.5) { (da, db) } else { (db, da) };
        ids[p] = x;
        ids[q] = y;
    }
    Example {
        tokens: TokenSequence::unpadded(ids),
        label,
    }
}

fn token_copy_example(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Example {
    let (n, c) = (spec.seq_len, spec.num_classes);
    let label = rng.random_range(0..c);
    let values = 3..spec.vocab_size;
    let mut ids = vec![CLS];
    ids.extend((1..n).map(|_| rng.random_range(values.clone())));
    let p = rng.random_range(1..n - 1);
    ids[p] = MARK;
    let choices: Vec<usize> = values.filter(|v| v % c == label).collect();
    ids[p + 1] = *choices.choose(rng).expect("validated vocabulary");
    Example {
        tokens: TokenSequence::unpadded(ids),
        label,
    }
}

/// Label implied by the sequence, recomputed from the task rule.
pub fn label_of(spec: &TaskSpec, ids: &[usize]) -> Option<usize> {
    match spec.kind {
        TaskKind::Parity => Some(ids.iter().filter(|&&t| t == MARK).count() % 2),
        TaskKind::TokenCopy => {
            let p = ids.iter().position(|&t| t == MARK)?;
            ids.get(p + 1).map(|v| v % spec.num_classes)
        }
        TaskKind::LocalPattern => (0..spec.num_classes).find(|&c| {
            let (a, b) = spec.bigram(c);
            let pa = ids.iter().position(|&t| t == a);
            let pb = ids.iter().position(|&t| t == b);
            matches!((pa, pb), (Some(x), Some(y)) if y > x && y - x <= LOCAL_GAP)
        }),
    }
}

pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train_size + spec.dev_size + spec.test_size;
    let mut seen = HashSet::with_capacity(total);
    let mut all = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while all.len() < total {
        attempts += 1;
        if attempts > 50 * total + 1000 {
            return config_err(format!(
                "could only draw {} distinct sequences of the {total} requested",
                all.len()
            ));
        }
        let ex = match spec.kind {
            TaskKind::Parity => parity_example(spec, &mut rng),
            TaskKind::LocalPattern => local_pattern_example(spec, &mut rng),
            TaskKind::TokenCopy => token_copy_example(spec, &mut rng),
        };
        if seen.insert(ex.tokens.ids.clone()) {
            all.push(ex);
        }
    }
    let test = all.split_off(spec.train_size + spec.dev_size);
    let dev = all.split_off(spec.train_size);
    Ok(Dataset {
        spec: spec.clone(),
        train: all,
        dev,
        test,
    })
}
