// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unigram and bigram tables, KL divergences between them, and the entropy
//! floors they imply.
//!
//! Bigrams never cross a sequence boundary. KL divergences use add-`eps`
//! smoothing over the full vocabulary on both sides. The bigram KL averages
//! per-context divergences with weights from `Q`'s unigram distribution.
//!
//! The order-2 entropy floor is the conditional entropy `H(X_i | X_{i-1})`
//! under the table's bigram counts, with contexts weighted by how often they
//! appear as a context. It never exceeds [`successor_entropy`], the entropy of
//! the successor marginal of the same counts.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{read_token_shard, TokenShard};

/// Default smoothing mass per vocabulary entry.
pub const DEFAULT_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramTable {
    pub vocab_size: usize,
    pub unigram: Vec<u64>,
    /// Context token to successor counts.
    pub bigram: BTreeMap<u32, BTreeMap<u32, u64>>,
    pub total_tokens: u64,
}

impl NgramTable {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            unigram: vec![0; vocab_size],
            bigram: BTreeMap::new(),
            total_tokens: 0,
        }
    }

    pub fn add_sequence(&mut self, seq: &[u32]) -> Result<()> {
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        for &t in seq {
            self.unigram[t as usize] += 1;
        }
        self.total_tokens += seq.len() as u64;
        for w in seq.windows(2) {
            *self.bigram.entry(w[0]).or_default().entry(w[1]).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Combine counts of two tables over the same vocabulary.
    pub fn merge(mut self, other: NgramTable) -> Result<NgramTable> {
        if self.vocab_size != other.vocab_size {
            return Err(Error::InvalidInput(format!(
                "vocabulary sizes differ: {} vs {}",
                self.vocab_size, other.vocab_size
            )));
        }
        for (a, b) in self.unigram.iter_mut().zip(&other.unigram) {
            *a += b;
        }
        self.total_tokens += other.total_tokens;
        for (c, succ) in other.bigram {
            let dst = self.bigram.entry(c).or_default();
            for (x, n) in succ {
                *dst.entry(x).or_insert(0) += n;
            }
        }
        Ok(self)
    }

    /// Bigram count with context `c`.
    pub fn context_total(&self, c: u32) -> u64 {
        self.bigram.get(&c).map_or(0, |s| s.values().sum())
    }

    pub fn n_bigrams(&self) -> u64 {
        self.bigram.values().flat_map(|s| s.values()).sum()
    }

    /// Add-`eps` smoothed unigram probability.
    pub fn unigram_prob(&self, x: u32, eps: f64) -> f64 {
        (self.unigram[x as usize] as f64 + eps) / (self.total_tokens as f64 + self.vocab_size as f64 * eps)
    }

    /// Add-`eps` smoothed successor probability given context `c`.
    pub fn conditional_prob(&self, c: u32, x: u32, eps: f64) -> f64 {
        let n = self.bigram.get(&c).and_then(|s| s.get(&x)).copied().unwrap_or(0);
        (n as f64 + eps) / (self.context_total(c) as f64 + self.vocab_size as f64 * eps)
    }
}

/// Count one table over many shards, in parallel over shards.
pub fn count_ngrams(shards: &[TokenShard], vocab_size: usize) -> Result<NgramTable> {
    shards
        .par_iter()
        .map(|s| {
            let mut t = NgramTable::new(vocab_size);
            for seq in s.sequences() {
                t.add_sequence(seq)?;
            }
            Ok(t)
        })
        .try_reduce(|| NgramTable::new(vocab_size), |a, b| a.merge(b))
}

/// [`count_ngrams`] over `.toks` files.
pub fn count_ngram_files(paths: &[impl AsRef<Path> + Sync], vocab_size: usize) -> Result<NgramTable> {
    paths
        .par_iter()
        .map(|p| {
            let shard = read_token_shard(p)?;
            count_ngrams(std::slice::from_ref(&shard), vocab_size)
        })
        .try_reduce(|| NgramTable::new(vocab_size), |a, b| a.merge(b))
}

fn check_pair(p: &NgramTable, q: &NgramTable, eps: f64) -> Result<()> {
    if p.vocab_size != q.vocab_size {
        return Err(Error::InvalidInput(format!(
            "vocabulary sizes differ: {} vs {}",
            p.vocab_size, q.vocab_size
        )));
    }
    if p.total_tokens == 0 || q.total_tokens == 0 {
        return Err(Error::InvalidInput("empty n-gram table".into()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("smoothing must be positive, got {eps}")));
    }
    Ok(())
}

fn kl_term(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p / q).ln()
    } else {
        0.0
    }
}

/// `D_KL(P || Q)` of the smoothed unigram distributions, in nats.
pub fn unigram_kl(p: &NgramTable, q: &NgramTable, eps: f64) -> Result<f64> {
    check_pair(p, q, eps)?;
    let kl: f64 = (0..p.vocab_size as u32)
        .map(|x| kl_term(p.unigram_prob(x, eps), q.unigram_prob(x, eps)))
        .sum();
    Ok(kl.max(0.0))
}

/// KL between the smoothed successor distributions of one context. Tokens
/// unseen after `c` in both tables share one probability on each side and are
/// summed in closed form.
pub fn context_kl(p: &NgramTable, q: &NgramTable, c: u32, eps: f64) -> f64 {
    let v = p.vocab_size as f64;
    let np = p.context_total(c) as f64;
    let nq = q.context_total(c) as f64;
    let empty = BTreeMap::new();
    let sp = p.bigram.get(&c).unwrap_or(&empty);
    let sq = q.bigram.get(&c).unwrap_or(&empty);
    let mut support: Vec<u32> = sp.keys().chain(sq.keys()).copied().collect();
    support.sort_unstable();
    support.dedup();
    let prob = |n: u64, total: f64| (n as f64 + eps) / (total + v * eps);
    let mut kl = 0.0;
    for x in &support {
        let a = prob(sp.get(x).copied().unwrap_or(0), np);
        let b = prob(sq.get(x).copied().unwrap_or(0), nq);
        kl += kl_term(a, b);
    }
    let unseen = v - support.len() as f64;
    if unseen > 0.0 {
        kl += unseen * kl_term(prob(0, np), prob(0, nq));
    }
    kl.max(0.0)
}

/// `sum_c w(c) D_KL(P(.|c) || Q(.|c))` with `w` the empirical unigram
/// distribution of `Q`.
pub fn bigram_kl(p: &NgramTable, q: &NgramTable, eps: f64) -> Result<f64> {
    check_pair(p, q, eps)?;
    let total = q.total_tokens as f64;
    let kl: f64 = q
        .unigram
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(c, &n)| n as f64 / total * context_kl(p, q, c as u32, eps))
        .sum();
    Ok(kl)
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a u64>, total: f64) -> f64 {
    counts
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Order 1: unigram entropy. Order 2: conditional entropy of a token given
/// its predecessor.
pub fn entropy_floor(table: &NgramTable, order: u8) -> Result<f64> {
    if table.total_tokens == 0 {
        return Err(Error::InvalidInput("empty n-gram table".into()));
    }
    match order {
        1 => Ok(entropy_of_counts(table.unigram.iter(), table.total_tokens as f64)),
        2 => {
            let n = table.n_bigrams() as f64;
            if n == 0.0 {
                return Ok(0.0);
            }
            Ok(table
                .bigram
                .values()
                .map(|succ| {
                    let nc: u64 = succ.values().sum();
                    nc as f64 / n * entropy_of_counts(succ.values(), nc as f64)
                })
                .sum())
        }
        o => Err(Error::InvalidInput(format!("entropy order must be 1 or 2, got {o}"))),
    }
}

/// Entropy of the distribution of tokens that follow some context.
pub fn successor_entropy(table: &NgramTable) -> f64 {
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for succ in table.bigram.values() {
        for (&x, &n) in succ {
            *counts.entry(x).or_insert(0) += n;
        }
    }
    entropy_of_counts(counts.values(), table.n_bigrams() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramReport {
    pub vocab_size: usize,
    pub smoothing: f64,
    pub p_tokens: u64,
    pub q_tokens: u64,
    pub unigram_kl: f64,
    pub bigram_kl: f64,
    pub q_unigram_entropy: f64,
    pub q_bigram_entropy: f64,
}

pub fn ngram_report(p: &NgramTable, q: &NgramTable, eps: f64) -> Result<NgramReport> {
    Ok(NgramReport {
        vocab_size: q.vocab_size,
        smoothing: eps,
        p_tokens: p.total_tokens,
        q_tokens: q.total_tokens,
        unigram_kl: unigram_kl(p, q, eps)?,
        bigram_kl: bigram_kl(p, q, eps)?,
        q_unigram_entropy: entropy_floor(q, 1)?,
        q_bigram_entropy: entropy_floor(q, 2)?,
    })
}
