// SPDX-License-Identifier: MIT OR Apache-2.0

//! Top-activation index and rule-based feature classifiers.
//!
//! A *sample* is one token sequence; a feature's top samples are the `K`
//! sequences with the highest maximum activation, ties broken by
//! `(shard, sequence)`. Each kept sample carries its full token list and the
//! sparse activations of the feature over it.
//!
//! Classifiers (priority order when several match):
//!
//! - **previous-token**: the tokens preceding activations agree (largest
//!   stemmed group share above 0.8) while the activating tokens themselves do
//!   not (share below 0.3);
//! - **induction**: at least 20 activations on a token `A`, followed by `B`,
//!   where `A B` already occurred earlier in the sequence and the feature did
//!   not fire on that first `A`;
//! - **context-sensitive**: more than 4000 activations inside the top samples
//!   but fewer than 2M activations per 100M corpus tokens (pro-rated).
//!
//! Stemming strips surrounding whitespace and folds case.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crosscoder::{forward, CrosscoderModel};
use crate::error::{Error, Result};
use crate::store::{read_activation_batches, read_token_shard, SnapshotManifest, TokenShard};

pub const TOP_SAMPLES: usize = 20;
pub const PREV_CONSISTENCY_MIN: f64 = 0.8;
pub const SELF_CONSISTENCY_MAX: f64 = 0.3;
pub const INDUCTION_MIN_INSTANCES: usize = 20;
pub const CONTEXT_MIN_IN_SAMPLE: u64 = 4000;
pub const CONTEXT_MAX_TOTAL: f64 = 2_000_000.0;
pub const CONTEXT_REFERENCE_TOKENS: f64 = 100_000_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopSample {
    pub shard: usize,
    pub sequence: usize,
    /// Global row of the sequence's first token.
    pub start_row: u64,
    pub max_activation: f32,
    pub tokens: Vec<u32>,
    /// `(position, activation)` for every position where the feature fires.
    pub activations: Vec<(u32, f32)>,
}

impl TopSample {
    pub fn activation_at(&self, pos: usize) -> f32 {
        self.activations
            .binary_search_by_key(&(pos as u32), |&(p, _)| p)
            .map_or(0.0, |i| self.activations[i].1)
    }

    /// Tokens in `[pos - radius, pos + radius]`, clipped to the sequence.
    pub fn window(&self, pos: usize, radius: usize) -> &[u32] {
        let lo = pos.saturating_sub(radius);
        let hi = (pos + radius + 1).min(self.tokens.len());
        &self.tokens[lo.min(hi)..hi]
    }

    fn key(&self) -> (f32, usize, usize) {
        (self.max_activation, self.shard, self.sequence)
    }
}

/// `a` ranks before `b`: higher maximum first, then lower shard and sequence.
fn ranks_before(a: &TopSample, b: &TopSample) -> bool {
    let (ma, sa, qa) = a.key();
    let (mb, sb, qb) = b.key();
    ma > mb || (ma == mb && (sa, qa) < (sb, qb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub feature: usize,
    pub samples: Vec<TopSample>,
    /// Positions in the whole corpus where the feature fires.
    pub total_activations: u64,
}

/// One activation event of a feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationEvent {
    pub shard: usize,
    pub sequence: usize,
    pub position: u32,
    pub strength: f32,
}

impl FeatureEntry {
    fn new(feature: usize) -> Self {
        Self {
            feature,
            samples: Vec::new(),
            total_activations: 0,
        }
    }

    fn offer(&mut self, sample: TopSample, k: usize) {
        if k == 0 {
            return;
        }
        if self.samples.len() == k && !ranks_before(&sample, self.samples.last().expect("k > 0")) {
            return;
        }
        let at = self.samples.partition_point(|s| ranks_before(s, &sample));
        self.samples.insert(at, sample);
        self.samples.truncate(k);
    }

    /// Activation events in the top samples, strongest first.
    pub fn events(&self) -> Vec<ActivationEvent> {
        let mut ev: Vec<ActivationEvent> = self
            .samples
            .iter()
            .flat_map(|s| {
                s.activations.iter().map(move |&(position, strength)| ActivationEvent {
                    shard: s.shard,
                    sequence: s.sequence,
                    position,
                    strength,
                })
            })
            .collect();
        ev.sort_by(|a, b| {
            b.strength
                .total_cmp(&a.strength)
                .then((a.shard, a.sequence, a.position).cmp(&(b.shard, b.sequence, b.position)))
        });
        ev
    }

    pub fn in_sample_activations(&self) -> u64 {
        self.samples.iter().map(|s| s.activations.len() as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub snapshot: usize,
    pub k: usize,
    pub total_tokens: u64,
    pub n_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopActivationIndex {
    pub header: IndexHeader,
    pub features: Vec<FeatureEntry>,
}

impl TopActivationIndex {
    /// JSON lines: the header, then one feature entry per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n").map_err(io)?;
        for f in &self.features {
            serde_json::to_writer(&mut w, f)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty index", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: IndexHeader = serde_json::from_str(&first)?;
        let mut features = Vec::with_capacity(header.n_features);
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                features.push(serde_json::from_str(&line)?);
            }
        }
        if features.len() != header.n_features {
            return Err(Error::Format(format!(
                "{}: header declares {} features, found {}",
                path.display(),
                header.n_features,
                features.len()
            )));
        }
        Ok(Self { header, features })
    }
}

struct SeqRef {
    shard: usize,
    sequence: usize,
    start_row: u64,
    len: usize,
}

/// Build an index from token shards and an activation source returning the
/// `count x n_features` activations of global rows `start..start + count`.
///
/// Sequences are processed in chunks of roughly `chunk_rows` rows in
/// parallel; partial indices are merged with the same total order, so the
/// result does not depend on scheduling.
pub fn build_top_index_with<F>(
    shards: &[TokenShard],
    n_features: usize,
    k: usize,
    snapshot: usize,
    chunk_rows: usize,
    activations: F,
) -> Result<TopActivationIndex>
where
    F: Fn(u64, usize) -> Result<Array2<f32>> + Sync,
{
    let mut seqs = Vec::new();
    let mut row = 0u64;
    for (shard, s) in shards.iter().enumerate() {
        for (sequence, &len) in s.seq_lengths.iter().enumerate() {
            seqs.push(SeqRef {
                shard,
                sequence,
                start_row: row,
                len: len as usize,
            });
            row += len as u64;
        }
    }
    let total_tokens = row;
    let mut chunks: Vec<std::ops::Range<usize>> = Vec::new();
    let mut begin = 0;
    let mut rows_in = 0;
    for (i, s) in seqs.iter().enumerate() {
        rows_in += s.len;
        if rows_in >= chunk_rows.max(1) {
            chunks.push(begin..i + 1);
            begin = i + 1;
            rows_in = 0;
        }
    }
    if begin < seqs.len() {
        chunks.push(begin..seqs.len());
    }

    let partials: Vec<Vec<FeatureEntry>> = chunks
        .par_iter()
        .map(|range| {
            let mut local: Vec<FeatureEntry> = (0..n_features).map(FeatureEntry::new).collect();
            let first = &seqs[range.start];
            let n_rows: usize = seqs[range.clone()].iter().map(|s| s.len).sum();
            if n_rows == 0 {
                return Ok(local);
            }
            let acts = activations(first.start_row, n_rows)?;
            if acts.dim() != (n_rows, n_features) {
                return Err(Error::Shape(format!(
                    "activation source returned {:?}, expected ({n_rows}, {n_features})",
                    acts.dim()
                )));
            }
            let mut offset = 0;
            for s in &seqs[range.clone()] {
                let block = acts.slice(ndarray::s![offset..offset + s.len, ..]);
                for (f, col) in block.columns().into_iter().enumerate() {
                    let fired: Vec<(u32, f32)> = col
                        .iter()
                        .enumerate()
                        .filter(|(_, &v)| v > 0.0)
                        .map(|(p, &v)| (p as u32, v))
                        .collect();
                    if fired.is_empty() {
                        continue;
                    }
                    local[f].total_activations += fired.len() as u64;
                    let max = fired.iter().map(|x| x.1).fold(f32::MIN, f32::max);
                    local[f].offer(
                        TopSample {
                            shard: s.shard,
                            sequence: s.sequence,
                            start_row: s.start_row,
                            max_activation: max,
                            tokens: Vec::new(),
                            activations: fired,
                        },
                        k,
                    );
                }
                offset += s.len;
            }
            Ok(local)
        })
        .collect::<Result<_>>()?;

    let mut features: Vec<FeatureEntry> = (0..n_features).map(FeatureEntry::new).collect();
    for part in partials {
        for (dst, src) in features.iter_mut().zip(part) {
            dst.total_activations += src.total_activations;
            for s in src.samples {
                dst.offer(s, k);
            }
        }
    }
    let offsets: Vec<Vec<usize>> = shards.iter().map(TokenShard::sequence_offsets).collect();
    for entry in &mut features {
        for s in &mut entry.samples {
            let start = offsets[s.shard][s.sequence];
            let len = shards[s.shard].seq_lengths[s.sequence] as usize;
            s.tokens = shards[s.shard].tokens[start..start + len].to_vec();
        }
    }
    Ok(TopActivationIndex {
        header: IndexHeader {
            snapshot,
            k,
            total_tokens,
            n_features,
        },
        features,
    })
}

/// Index the crosscoder's features at `snapshot` over the manifest's token
/// shards (rows aligned one-to-one with tokens).
pub fn build_top_index(
    model: &CrosscoderModel<f32>,
    manifest: &SnapshotManifest,
    snapshot: usize,
    k: usize,
) -> Result<TopActivationIndex> {
    if snapshot >= model.n_snapshots() {
        return Err(Error::InvalidInput(format!("snapshot {snapshot} out of range")));
    }
    let shards: Vec<TokenShard> = manifest
        .token_paths()
        .iter()
        .map(read_token_shard)
        .collect::<Result<_>>()?;
    if shards.is_empty() {
        return Err(Error::InvalidInput("manifest lists no token shards".into()));
    }
    let all: Vec<usize> = (0..manifest.n_snapshots()).collect();
    let stream = read_activation_batches(manifest, &all, 4096)?;
    let n_tokens: u64 = shards.iter().map(|s| s.n_tokens() as u64).sum();
    if n_tokens != stream.total_rows() {
        return Err(Error::Alignment(format!(
            "token shards hold {n_tokens} tokens but activation shards hold {} rows",
            stream.total_rows()
        )));
    }
    build_top_index_with(&shards, model.n_features(), k, snapshot, 4096, |start, count| {
        let batch = stream.read_range(start, count)?;
        let rec = forward(model, &batch.views())?;
        Ok(rec.snapshots.into_iter().nth(snapshot).expect("snapshot in range").acts)
    })
}

/// Token id to string table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

impl Vocabulary {
    /// A JSON array of strings indexed by token id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            tokens: serde_json::from_str(&text)?,
        })
    }

    /// String for `id`; ids outside the table render as their number.
    pub fn text(&self, id: u32) -> String {
        self.tokens.get(id as usize).cloned().unwrap_or_else(|| id.to_string())
    }
}

pub fn stem(token: &str) -> String {
    token.trim().to_lowercase()
}

/// Share of the largest group after stemming; 0 for an empty list.
pub fn consistency<I: IntoIterator<Item = String>>(tokens: I) -> f64 {
    let mut groups: HashMap<String, usize> = HashMap::new();
    let mut n = 0usize;
    for t in tokens {
        *groups.entry(stem(&t)).or_insert(0) += 1;
        n += 1;
    }
    match groups.values().max() {
        Some(&m) if n > 0 => m as f64 / n as f64,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleClass {
    PreviousToken,
    Induction,
    ContextSensitive,
    None,
}

impl RuleClass {
    pub fn name(self) -> &'static str {
        match self {
            RuleClass::PreviousToken => "previous-token",
            RuleClass::Induction => "induction",
            RuleClass::ContextSensitive => "context-sensitive",
            RuleClass::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreviousTokenEvidence {
    pub prev_consistency: f64,
    pub self_consistency: f64,
    pub matched: bool,
}

pub fn classify_previous_token(entry: &FeatureEntry, vocab: &Vocabulary) -> PreviousTokenEvidence {
    let mut prev = Vec::new();
    let mut own = Vec::new();
    for s in &entry.samples {
        for &(p, _) in &s.activations {
            let p = p as usize;
            own.push(vocab.text(s.tokens[p]));
            if p > 0 {
                prev.push(vocab.text(s.tokens[p - 1]));
            }
        }
    }
    let prev_consistency = consistency(prev);
    let self_consistency = consistency(own);
    PreviousTokenEvidence {
        prev_consistency,
        self_consistency,
        matched: prev_consistency > PREV_CONSISTENCY_MIN && self_consistency < SELF_CONSISTENCY_MAX,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InductionEvidence {
    pub instances: usize,
    pub matched: bool,
}

/// Count activations on `A` (followed by `B`) where `A B` occurred earlier in
/// the sequence and the feature was silent on the first such `A`.
pub fn induction_instances(sample: &TopSample) -> usize {
    let toks = &sample.tokens;
    let mut first_seen: HashMap<(u32, u32), usize> = HashMap::new();
    for q in 0..toks.len().saturating_sub(1) {
        first_seen.entry((toks[q], toks[q + 1])).or_insert(q);
    }
    sample
        .activations
        .iter()
        .filter(|&&(p, _)| {
            let p = p as usize;
            if p + 1 >= toks.len() {
                return false;
            }
            match first_seen.get(&(toks[p], toks[p + 1])) {
                Some(&q) if q < p => sample.activation_at(q) <= 0.0,
                _ => false,
            }
        })
        .count()
}

pub fn classify_induction(entry: &FeatureEntry) -> InductionEvidence {
    let instances: usize = entry.samples.iter().map(induction_instances).sum();
    InductionEvidence {
        instances,
        matched: instances >= INDUCTION_MIN_INSTANCES,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextEvidence {
    pub in_sample: u64,
    pub total: u64,
    /// Total-activation cap pro-rated to the corpus size.
    pub cap: f64,
    pub matched: bool,
}

pub fn classify_context_sensitive(entry: &FeatureEntry, total_activations: u64, corpus_tokens: u64) -> ContextEvidence {
    let in_sample = entry.in_sample_activations();
    let cap = CONTEXT_MAX_TOTAL * corpus_tokens as f64 / CONTEXT_REFERENCE_TOKENS;
    ContextEvidence {
        in_sample,
        total: total_activations,
        cap,
        matched: in_sample > CONTEXT_MIN_IN_SAMPLE && (total_activations as f64) < cap,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleVerdict {
    pub feature: usize,
    pub class: RuleClass,
    pub previous_token: PreviousTokenEvidence,
    pub induction: InductionEvidence,
    pub context: ContextEvidence,
}

pub fn classify(entry: &FeatureEntry, vocab: &Vocabulary, corpus_tokens: u64) -> RuleVerdict {
    let previous_token = classify_previous_token(entry, vocab);
    let induction = classify_induction(entry);
    let context = classify_context_sensitive(entry, entry.total_activations, corpus_tokens);
    let class = if previous_token.matched {
        RuleClass::PreviousToken
    } else if induction.matched {
        RuleClass::Induction
    } else if context.matched {
        RuleClass::ContextSensitive
    } else {
        RuleClass::None
    };
    RuleVerdict {
        feature: entry.feature,
        class,
        previous_token,
        induction,
        context,
    }
}

pub fn classify_index(index: &TopActivationIndex, vocab: &Vocabulary) -> Vec<RuleVerdict> {
    index
        .features
        .par_iter()
        .map(|e| classify(e, vocab, index.header.total_tokens))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary {
            tokens: words.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn sample(tokens: Vec<u32>, fire: &[usize]) -> TopSample {
        TopSample {
            shard: 0,
            sequence: 0,
            start_row: 0,
            max_activation: 1.0,
            tokens,
            activations: fire.iter().map(|&p| (p as u32, 1.0)).collect(),
        }
    }

    fn entry(samples: Vec<TopSample>) -> FeatureEntry {
        FeatureEntry {
            feature: 0,
            samples,
            total_activations: 0,
        }
    }

    #[test]
    fn stemming_is_idempotent_and_case_blind() {
        assert_eq!(stem("  The "), "the");
        assert_eq!(stem(&stem(" The")), stem(" The"));
        assert_eq!(consistency([" the".to_string(), "The".into(), "the ".into()]), 1.0);
        assert_eq!(consistency(Vec::<String>::new()), 0.0);
    }

    #[test]
    fn previous_token_thresholds() {
        // Tokens: 0 " the", 1 "The", 2.. distinct words.
        let v = vocab(&[" the", "The", "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "x"]);
        let build = |n_prev_the: usize, n_same: usize| {
            // 20 activations; the first `n_prev_the` are preceded by the/The;
            // the first `n_same` activate on token "x".
            let mut s = Vec::new();
            for i in 0..20usize {
                let prev = if i < n_prev_the { (i % 2) as u32 } else { 2 + (i % 11) as u32 };
                let own = if i < n_same { 13 } else { 2 + ((i + 5) % 11) as u32 };
                s.push(sample(vec![prev, own], &[1]));
            }
            classify_previous_token(&entry(s), &v)
        };
        let e = build(20, 0);
        assert_eq!(e.prev_consistency, 1.0);
        assert!(build(17, 5).matched); // 0.85 / 0.25
        assert!(!build(15, 5).matched); // 0.75
        assert!(!build(16, 5).matched); // exactly 0.8
        assert!(!build(17, 6).matched); // exactly 0.3
        assert!(!build(20, 20).matched);
    }

    #[test]
    fn induction_needs_silent_first_occurrence() {
        // A=1, B=2: "1 2 ... 1 2", firing on the second 1 only.
        let toks = vec![1, 2, 5, 6, 1, 2, 7];
        assert_eq!(induction_instances(&sample(toks.clone(), &[4])), 1);
        assert_eq!(induction_instances(&sample(toks.clone(), &[0, 4])), 0);
        assert_eq!(induction_instances(&sample(toks, &[6])), 0);
        let mk = |n: usize| entry((0..n).map(|_| sample(vec![1, 2, 3, 1, 2], &[3])).collect());
        assert!(!classify_induction(&mk(19)).matched);
        assert!(classify_induction(&mk(20)).matched);
    }

    #[test]
    fn context_sensitive_thresholds() {
        let dense = |n: usize| entry(vec![sample(vec![0; n], &(0..n).collect::<Vec<_>>())]);
        assert!(classify_context_sensitive(&dense(5000), 10_000, 100_000_000).matched);
        assert!(!classify_context_sensitive(&dense(3999), 10_000, 100_000_000).matched);
        assert!(!classify_context_sensitive(&dense(4000), 10_000, 100_000_000).matched);
        assert!(!classify_context_sensitive(&dense(5000), 5_000_000, 100_000_000).matched);
        assert!(!classify_context_sensitive(&dense(5000), 2_000_000, 100_000_000).matched);
        // Pro-rated: 1M tokens allow fewer than 20k activations.
        assert!(classify_context_sensitive(&dense(5000), 19_999, 1_000_000).matched);
        assert!(!classify_context_sensitive(&dense(5000), 20_000, 1_000_000).matched);
    }

    #[test]
    fn index_keeps_top_k_by_max() {
        let shard = TokenShard::from_sequences([vec![1u32, 2, 3], vec![4, 5], vec![6, 7, 8, 9]]);
        // feature 0 fires with the row index as strength on odd rows; feature 1 never.
        let idx = build_top_index_with(std::slice::from_ref(&shard), 2, 2, 0, 3, |start, count| {
            Ok(Array2::from_shape_fn((count, 2), |(r, f)| {
                let g = start + r as u64;
                if f == 0 && g % 2 == 1 {
                    g as f32
                } else {
                    0.0
                }
            }))
        })
        .unwrap();
        let e = &idx.features[0];
        assert_eq!(e.total_activations, 4);
        assert_eq!(e.samples.len(), 2);
        assert_eq!((e.samples[0].sequence, e.samples[0].max_activation), (2, 7.0));
        assert_eq!(e.samples[0].tokens, vec![6, 7, 8, 9]);
        assert_eq!(e.samples[1].sequence, 1);
        assert!(idx.features[1].samples.is_empty());
        assert_eq!(idx.header.total_tokens, 9);
    }

    #[test]
    fn priority_prefers_previous_token() {
        let v = vocab(&["a", "b", "c", "d", "e", "f", "g", "h"]);
        // Preceded by "a" always, activating tokens varied; also dense.
        let toks: Vec<u32> = (0..10_000).map(|i| if i % 2 == 0 { 0 } else { 1 + (i % 7) as u32 }).collect();
        let fire: Vec<usize> = (0..10_000).filter(|i| i % 2 == 1).collect();
        let e = FeatureEntry {
            feature: 3,
            samples: vec![sample(toks, &fire)],
            total_activations: 5000,
        };
        let verdict = classify(&e, &v, 100_000_000);
        assert!(verdict.context.matched);
        assert_eq!(verdict.class, RuleClass::PreviousToken);
    }
}
