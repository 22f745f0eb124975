//! Synthetic symbol corpora: copy, bigram chain, and bracket languages.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ebt_autodiff::rng::{derive_seed, seeded, standard_normal, EngineRng};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EbtError, Result};

pub const MAX_VOCAB: usize = 64;
pub const MAX_SEQ_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusKind {
    /// Second half of each sequence repeats the first half.
    Copy,
    /// Samples from a fixed random first-order Markov chain over symbols.
    Ngram,
    /// Bracket completion over `k = (V - 1) / 2` types with bounded nesting
    /// depth. The first half is a random prefix that leaves at least one
    /// bracket open; the second half closes every open bracket in order and
    /// then pads. Symbol `i < k` opens type `i`, `k + i` closes it, and
    /// `V - 1` is the pad.
    Dyck { max_depth: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub kind: CorpusKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub sequences: Vec<Vec<usize>>,
}

fn check(kind: CorpusKind, v: usize, s: usize) -> Result<()> {
    if v == 0 || v > MAX_VOCAB || s < 2 || s > MAX_SEQ_LEN {
        return Err(EbtError::contract(format!(
            "corpus needs 1 <= V <= {MAX_VOCAB} and 2 <= S <= {MAX_SEQ_LEN}, got V={v} S={s}"
        )));
    }
    match kind {
        CorpusKind::Copy if s % 2 != 0 => Err(EbtError::contract(format!("copy task needs even S, got {s}"))),
        CorpusKind::Dyck { max_depth } => {
            if v < 3 || v % 2 == 0 || s % 2 != 0 || s < 4 || max_depth == 0 {
                Err(EbtError::contract(format!(
                    "dyck needs odd V >= 3, even S >= 4 and max_depth >= 1, got V={v} S={s} depth={max_depth}"
                )))
            } else {
                Ok(())
            }
        }
        CorpusKind::Ngram if v < 2 => Err(EbtError::contract("ngram needs V >= 2")),
        _ => Ok(()),
    }
}

/// Fixed random transition matrix. Rows are softmax of scaled Gaussians so
/// each symbol has a few likely successors.
#[derive(Clone, Debug)]
pub struct BigramChain {
    pub vocab_size: usize,
    /// Row-major `P[a][b] = P(next = b | current = a)`.
    pub transition: Vec<f64>,
    pub stationary: Vec<f64>,
}

impl BigramChain {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut transition = Vec::with_capacity(vocab_size * vocab_size);
        for _ in 0..vocab_size {
            let z: Vec<f64> = standard_normal(&mut rng, vocab_size).into_iter().map(|v| (2.0 * v).exp()).collect();
            let total: f64 = z.iter().sum();
            transition.extend(z.into_iter().map(|v| v / total));
        }
        let mut pi = vec![1.0 / vocab_size as f64; vocab_size];
        for _ in 0..10_000 {
            let mut next = vec![0.0; vocab_size];
            for a in 0..vocab_size {
                for b in 0..vocab_size {
                    next[b] += pi[a] * transition[a * vocab_size + b];
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(x, y)| (x - y).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        Self { vocab_size, transition, stationary: pi }
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.transition[a * self.vocab_size..(a + 1) * self.vocab_size]
    }

    fn sample(probs: &[f64], rng: &mut EngineRng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    pub fn sample_sequence(&self, len: usize, rng: &mut EngineRng) -> Vec<usize> {
        let mut seq = vec![Self::sample(&self.stationary, rng)];
        while seq.len() < len {
            let last = *seq.last().unwrap();
            seq.push(Self::sample(self.row(last), rng));
        }
        seq
    }
}

fn copy_sequence(v: usize, s: usize, rng: &mut EngineRng) -> Vec<usize> {
    let half: Vec<usize> = (0..s / 2).map(|_| rng.gen_range(0..v)).collect();
    half.iter().chain(half.iter()).copied().collect()
}

fn dyck_sequence(v: usize, s: usize, max_depth: usize, rng: &mut EngineRng) -> Vec<usize> {
    let k = (v - 1) / 2;
    let half = s / 2;
    let cap = max_depth.min(half);
    let mut stack = Vec::new();
    let mut out = Vec::with_capacity(s);
    for i in 0..half {
        let remaining = half - i;
        // Keep depth >= 1 reachable at the end of the prefix. With depth
        // capped at 1 and an even prefix that is impossible, and the prefix
        // closes fully.
        let can_open = stack.len() < cap;
        let can_close = stack.len() > 1 || (stack.len() == 1 && remaining > 1);
        if can_open && (!can_close || rng.gen_bool(0.5)) {
            let t = rng.gen_range(0..k);
            stack.push(t);
            out.push(t);
        } else {
            out.push(k + stack.pop().unwrap());
        }
    }
    while let Some(t) = stack.pop() {
        out.push(k + t);
    }
    out.resize(s, v - 1);
    out
}

/// `count` sequences of length `S` from one generator stream.
pub fn gen_corpus(kind: CorpusKind, vocab_size: usize, seq_len: usize, count: usize, seed: u64) -> Result<ToyCorpus> {
    check(kind, vocab_size, seq_len)?;
    let mut rng = seeded(derive_seed(seed, 1));
    let chain = matches!(kind, CorpusKind::Ngram).then(|| BigramChain::new(vocab_size, chain_seed(seed)));
    let sequences = (0..count).map(|_| sample_one(kind, vocab_size, seq_len, chain.as_ref(), &mut rng)).collect();
    Ok(ToyCorpus { kind, vocab_size, seq_len, seed, sequences })
}

/// The chain is tied to the corpus seed so train and validation share it.
pub fn chain_seed(seed: u64) -> u64 {
    derive_seed(seed, 0xC4A1)
}

fn sample_one(kind: CorpusKind, v: usize, s: usize, chain: Option<&BigramChain>, rng: &mut EngineRng) -> Vec<usize> {
    match kind {
        CorpusKind::Copy => copy_sequence(v, s, rng),
        CorpusKind::Ngram => chain.unwrap().sample_sequence(s, rng),
        CorpusKind::Dyck { max_depth } => dyck_sequence(v, s, max_depth, rng),
    }
}

/// Train and validation corpora with no sequence in common. Validation draws
/// from its own stream and rejects anything present in train.
pub fn gen_splits(
    kind: CorpusKind,
    vocab_size: usize,
    seq_len: usize,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(ToyCorpus, ToyCorpus)> {
    let train = gen_corpus(kind, vocab_size, seq_len, n_train, seed)?;
    let seen: HashSet<&Vec<usize>> = train.sequences.iter().collect();
    let chain = matches!(kind, CorpusKind::Ngram).then(|| BigramChain::new(vocab_size, chain_seed(seed)));
    let mut rng = seeded(derive_seed(seed, 2));
    let mut val = Vec::with_capacity(n_val);
    let mut attempts = 0usize;
    while val.len() < n_val {
        attempts += 1;
        if attempts > 100 * (n_val + 10) {
            return Err(EbtError::contract(format!(
                "could not draw {n_val} validation sequences disjoint from train; the language is too small"
            )));
        }
        let s = sample_one(kind, vocab_size, seq_len, chain.as_ref(), &mut rng);
        if !seen.contains(&s) {
            val.push(s);
        }
    }
    let val = ToyCorpus { kind, vocab_size, seq_len, seed, sequences: val };
    Ok((train, val))
}

impl ToyCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Per-target-position loss weights for next-token prediction with
    /// context `seq[..S-1]` and targets `seq[1..]`. Copy and bracket
    /// completion score only the second half; their first halves are random
    /// and carry no signal.
    pub fn target_weights(&self) -> Vec<f64> {
        let s = self.seq_len;
        (1..s)
            .map(|j| match self.kind {
                CorpusKind::Copy | CorpusKind::Dyck { .. } if j < s / 2 => 0.0,
                _ => 1.0,
            })
            .collect()
    }

    /// Newline-delimited, space-separated symbol ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Parses the text layout written by [`ToyCorpus::save`].
    pub fn parse_sequences(text: &str) -> Result<Vec<Vec<usize>>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                line.split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|e| EbtError::config(format!("corpus line {}: {e}", i + 1))))
                    .collect()
            })
            .collect()
    }
}

/// Brackets balance and every prefix closes only what it opened. Pad
/// symbols may appear only at the end.
pub fn is_balanced(seq: &[usize], vocab_size: usize) -> bool {
    let k = (vocab_size - 1) / 2;
    let pad = vocab_size - 1;
    let body = seq.iter().position(|&t| t == pad).unwrap_or(seq.len());
    if seq[body..].iter().any(|&t| t != pad) {
        return false;
    }
    let mut stack = Vec::new();
    for &t in &seq[..body] {
        if t < k {
            stack.push(t);
        } else if stack.pop() != Some(t - k) {
            return false;
        }
    }
    stack.is_empty()
}

/// Smooth multichannel sequences (sums of random sinusoids plus noise),
/// standardized to zero mean and unit variance over the whole dataset.
#[derive(Clone, Debug)]
pub struct ContinuousCorpus {
    pub seq_len: usize,
    pub feature_dim: usize,
    /// Each sequence is row-major `[seq_len, feature_dim]`.
    pub sequences: Vec<Vec<f64>>,
}

pub fn gen_continuous(count: usize, seq_len: usize, feature_dim: usize, seed: u64) -> Result<ContinuousCorpus> {
    if seq_len < 2 || feature_dim == 0 {
        return Err(EbtError::contract("continuous corpus needs seq_len >= 2 and feature_dim >= 1"));
    }
    let mut rng = seeded(derive_seed(seed, 3));
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let mut seq = vec![0.0; seq_len * feature_dim];
        for f in 0..feature_dim {
            for _ in 0..2 {
                let freq = rng.gen_range(0.05..0.4);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(0.5..1.5);
                for t in 0..seq_len {
                    seq[t * feature_dim + f] += amp * (freq * t as f64 + phase).sin();
                }
            }
        }
        for (x, n) in seq.iter_mut().zip(standard_normal(&mut rng, seq_len * feature_dim)) {
            *x += 0.05 * n;
        }
        sequences.push(seq);
    }
    let all: Vec<f64> = sequences.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
    let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len().max(1) as f64;
    let sd = var.sqrt().max(1e-12);
    for seq in &mut sequences {
        for x in seq.iter_mut() {
            *x = (*x - mean) / sd;
        }
    }
    Ok(ContinuousCorpus { seq_len, feature_dim, sequences })
}
