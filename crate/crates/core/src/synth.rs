// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multi-snapshot activations with planted features.
//!
//! For snapshot `k` and token `x`:
//!
//! ```text
//! a_k(x) = sum_i s_i(k) c_i(x) g_i + rho(k) d(x) + sigma eta(x)
//! ```
//!
//! `c_i(x) >= 0` fires with probability `p_i`; `d(x)` is a rank-`r` component
//! fixed by the token id; `eta` is standard Gaussian noise drawn
//! independently per snapshot. Tokens and codes are shared by all snapshots,
//! so rows stay aligned.
//!
//! Strength schedules are sigmoids in `log10(step)`: emergent features rise,
//! initialization features decay.
//!
//! Output layout:
//!
//! ```text
//! out/manifest.json
//! out/ground_truth.json
//! out/vocab.json
//! out/tokens/shard_0000.toks
//! out/acts/snap_00/shard_0000.acts
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{write_task_file, MetricHead, TaskRecord};
use crate::crosscoder::CrosscoderModel;
use crate::error::{Error, Result};
use crate::evolution::FeatureClass;
use crate::rules::{FeatureEntry, IndexHeader, RuleClass, TopActivationIndex, TopSample, Vocabulary};
use crate::stats::{median, pearson};
use crate::store::{write_activation_shard, write_token_shard, SnapshotEntry, SnapshotManifest, TokenShard};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// Stream ids keep the random sources of different stages independent.
const STREAM_TOKEN_MODEL: u64 = 1;
const STREAM_SHARD: u64 = 1 << 20;
const STREAM_NOISE: u64 = 1 << 40;
const STREAM_TASK: u64 = 1 << 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Magnitude {
    Exponential { mean: f64 },
    Constant { value: f64 },
}

impl Magnitude {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Magnitude::Exponential { mean } => {
                let e: f64 = Exp::new(1.0).map(|d| d.sample(rng)).unwrap_or(1.0);
                mean * e
            }
            Magnitude::Constant { value } => value,
        }
    }

    /// Draw conditioned on being at least the mean. For the exponential
    /// this is `mean + Exp(mean)` by memorylessness.
    fn sample_strong<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Magnitude::Exponential { mean } => mean + self.sample(rng),
            Magnitude::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub d_model: usize,
    pub n_true_features: usize,
    pub n_snapshots: usize,
    pub n_tokens: usize,
    pub shard_tokens: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Snapshot `k` sits at step `10^(max_log_step * k / (K - 1))`.
    pub max_log_step: f64,
    /// Share of features that decay instead of emerge.
    pub init_fraction: f64,
    pub firing_prob_range: (f64, f64),
    pub magnitude: Magnitude,
    pub noise_sigma: f64,
    pub dense_rank: usize,
    /// `rho(k)` per snapshot; empty means no dense component.
    pub dense_amplitude: Vec<f64>,
    /// Sigmoid centres in `log10(step)` for emergent features.
    pub onset_range: (f64, f64),
    /// Sigmoid centres in `log10(step)` for initialization features.
    pub init_onset_range: (f64, f64),
    pub steepness_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_true_features: 100,
            n_snapshots: 5,
            n_tokens: 500_000,
            shard_tokens: 100_000,
            seq_len: 128,
            vocab_size: 1000,
            max_log_step: 4.0,
            init_fraction: 0.2,
            firing_prob_range: (0.01, 0.05),
            magnitude: Magnitude::Exponential { mean: 1.0 },
            noise_sigma: 0.05,
            dense_rank: 4,
            dense_amplitude: Vec::new(),
            onset_range: (0.5, 3.5),
            init_onset_range: (1.0, 3.0),
            steepness_range: (2.0, 5.0),
        }
    }
}

impl SynthConfig {
    /// A dense low-rank phase in the early snapshots, replaced by sparse
    /// emergent features later.
    pub fn dense_to_sparse() -> Self {
        let n_snapshots = 8;
        Self {
            n_snapshots,
            n_tokens: 200_000,
            n_true_features: 60,
            max_log_step: 4.0,
            init_fraction: 0.3,
            dense_amplitude: vec![0.0, 0.9, 0.9, 0.75, 0.45, 0.18, 0.06, 0.0],
            onset_range: (2.6, 3.4),
            init_onset_range: (0.2, 0.5),
            steepness_range: (6.0, 8.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.d_model < 8 {
            return bad(format!("d_model must be at least 8, got {}", self.d_model));
        }
        if self.n_true_features == 0 || self.n_snapshots == 0 || self.n_tokens == 0 {
            return bad("feature, snapshot and token counts must be positive".into());
        }
        if self.shard_tokens == 0 || self.seq_len == 0 || self.vocab_size < 2 {
            return bad("shard_tokens and seq_len must be positive and vocab_size at least 2".into());
        }
        let (lo, hi) = self.firing_prob_range;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return bad(format!("firing_prob_range {lo}..{hi} is not a sub-range of [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.init_fraction) {
            return bad("init_fraction must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if self.dense_rank > self.d_model {
            return bad("dense_rank exceeds d_model".into());
        }
        if !self.dense_amplitude.is_empty() && self.dense_amplitude.len() != self.n_snapshots {
            return bad(format!(
                "dense_amplitude has {} entries for {} snapshots",
                self.dense_amplitude.len(),
                self.n_snapshots
            ));
        }
        if !(self.max_log_step >= 0.0) {
            return bad("max_log_step must be non-negative".into());
        }
        let m = match self.magnitude {
            Magnitude::Exponential { mean } => mean,
            Magnitude::Constant { value } => value,
        };
        if !(m >= 0.0) || !m.is_finite() {
            return bad("magnitude must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Log-spaced, strictly increasing snapshot steps.
    pub fn steps(&self) -> Vec<u64> {
        let k = self.n_snapshots;
        let mut out: Vec<u64> = Vec::with_capacity(k);
        for i in 0..k {
            let frac = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
            let s = 10f64.powf(self.max_log_step * frac).round() as u64;
            let s = match out.last() {
                Some(&p) if s <= p => p + 1,
                _ => s,
            };
            out.push(s);
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Planted features and schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub steps: Vec<u64>,
    /// Unit vectors, one per true feature.
    pub directions: Vec<Vec<f64>>,
    /// `s_i(k)`, one row per feature.
    pub schedules: Vec<Vec<f64>>,
    pub firing_probs: Vec<f64>,
    pub classes: Vec<FeatureClass>,
    pub onsets: Vec<f64>,
    pub steepness: Vec<f64>,
    pub magnitude: Magnitude,
    pub dense_amplitude: Vec<f64>,
    /// Orthonormal rows spanning the dense component.
    pub dense_basis: Vec<Vec<f64>>,
    /// Per-token coefficients of the dense component.
    pub dense_embedding: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    /// Scalar applied to every snapshot so mean row norm is `sqrt(d_model)`;
    /// zero until data is written.
    pub norm_scalar: f64,
}

impl GroundTruth {
    pub fn n_features(&self) -> usize {
        self.directions.len()
    }

    pub fn d_model(&self) -> usize {
        self.directions.first().map_or(0, Vec::len)
    }

    pub fn n_snapshots(&self) -> usize {
        self.steps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_features();
        let d = self.d_model();
        let k = self.n_snapshots();
        let bad = |m: &str| Err(Error::InvalidInput(format!("ground truth: {m}")));
        if n == 0 || d == 0 || k == 0 {
            return bad("empty");
        }
        if self.directions.iter().any(|g| g.len() != d) {
            return bad("directions have unequal lengths");
        }
        if self.directions.iter().any(|g| (g.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() > 1e-6) {
            return bad("directions must be unit vectors");
        }
        if self.schedules.len() != n || self.schedules.iter().any(|s| s.len() != k) {
            return bad("schedule shape does not match features x snapshots");
        }
        if self.schedules.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("schedule values must lie in [0, 1]");
        }
        if self.firing_probs.len() != n || self.firing_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("firing probabilities must lie in [0, 1], one per feature");
        }
        if self.dense_amplitude.len() != k {
            return bad("dense_amplitude needs one entry per snapshot");
        }
        if self.dense_basis.iter().any(|b| b.len() != d) {
            return bad("dense basis rows must have length d_model");
        }
        let r = self.dense_basis.len();
        if self.dense_embedding.iter().any(|e| e.len() != r) {
            return bad("dense embedding width must equal the basis rank");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let gt: GroundTruth = serde_json::from_str(&text)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

fn unit_gaussian<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn orthonormal_rows<R: Rng>(rng: &mut R, r: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(r);
    while rows.len() < r {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &rows {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= dot * c);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows
}

/// Draw directions, schedules and firing rates for `cfg`.
pub fn ground_truth(cfg: &SynthConfig, seed: u64) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = cfg.steps();
    let n = cfg.n_true_features;
    let n_init = (cfg.init_fraction * n as f64).round() as usize;
    let mut out = GroundTruth {
        seed,
        steps: steps.clone(),
        directions: Vec::with_capacity(n),
        schedules: Vec::with_capacity(n),
        firing_probs: Vec::with_capacity(n),
        classes: Vec::with_capacity(n),
        onsets: Vec::with_capacity(n),
        steepness: Vec::with_capacity(n),
        magnitude: cfg.magnitude,
        dense_amplitude: if cfg.dense_amplitude.is_empty() {
            vec![0.0; cfg.n_snapshots]
        } else {
            cfg.dense_amplitude.clone()
        },
        dense_basis: Vec::new(),
        dense_embedding: Vec::new(),
        noise_sigma: cfg.noise_sigma,
        norm_scalar: 0.0,
    };
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    for i in 0..n {
        out.directions.push(unit_gaussian(&mut rng, cfg.d_model));
        let class = if i < n_init { FeatureClass::Initialization } else { FeatureClass::Emergent };
        let onset = match class {
            FeatureClass::Initialization => uniform(&mut rng, cfg.init_onset_range),
            FeatureClass::Emergent => uniform(&mut rng, cfg.onset_range),
        };
        let beta = uniform(&mut rng, cfg.steepness_range);
        let schedule: Vec<f64> = steps
            .iter()
            .map(|&s| {
                let rise = sigmoid(beta * ((s.max(1) as f64).log10() - onset));
                match class {
                    FeatureClass::Initialization => 1.0 - rise,
                    FeatureClass::Emergent => rise,
                }
            })
            .collect();
        out.schedules.push(schedule);
        out.firing_probs.push(uniform(&mut rng, cfg.firing_prob_range));
        out.classes.push(class);
        out.onsets.push(onset);
        out.steepness.push(beta);
    }
    if out.dense_amplitude.iter().any(|&a| a != 0.0) {
        out.dense_basis = orthonormal_rows(&mut rng, cfg.dense_rank, cfg.d_model);
        out.dense_embedding = (0..cfg.vocab_size)
            .map(|_| (0..cfg.dense_rank).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
    }
    Ok(out)
}

/// Zipf unigram plus a few preferred successors per token.
#[derive(Debug, Clone)]
struct TokenModel {
    unigram: WeightedIndex<f64>,
    successors: Vec<[u32; 4]>,
}

impl TokenModel {
    fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_TOKEN_MODEL);
        let weights: Vec<f64> = (0..vocab).map(|r| 1.0 / ((r + 1) as f64).powf(1.1)).collect();
        let successors = (0..vocab)
            .map(|_| std::array::from_fn(|_| rng.random_range(0..vocab as u32)))
            .collect();
        Self {
            unigram: WeightedIndex::new(weights).expect("positive weights"),
            successors,
        }
    }

    fn sequence<R: Rng>(&self, rng: &mut R, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let t = if i > 0 && rng.random_bool(0.5) {
                self.successors[out[i - 1] as usize][rng.random_range(0..4)]
            } else {
                self.unigram.sample(rng) as u32
            };
            out.push(t);
        }
        out
    }
}

/// Tokens and sparse codes of one shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardLatents {
    pub seq_lengths: Vec<u32>,
    pub tokens: Vec<u32>,
    /// `(feature, c_i(x))` for each firing feature, per token.
    pub codes: Vec<Vec<(u32, f64)>>,
}

fn shard_rows(cfg: &SynthConfig, shard: usize) -> usize {
    cfg.shard_tokens.min(cfg.n_tokens - shard * cfg.shard_tokens)
}

fn n_shards(cfg: &SynthConfig) -> usize {
    cfg.n_tokens.div_ceil(cfg.shard_tokens)
}

fn sample_codes<R: Rng>(gt: &GroundTruth, rng: &mut R, skip: &[bool]) -> Vec<(u32, f64)> {
    let mut codes = Vec::new();
    for (i, &p) in gt.firing_probs.iter().enumerate() {
        if rng.random::<f64>() < p && !skip.get(i).copied().unwrap_or(false) {
            codes.push((i as u32, gt.magnitude.sample(rng)));
        }
    }
    codes
}

/// Regenerate the tokens and codes of `shard`.
pub fn shard_latents(cfg: &SynthConfig, gt: &GroundTruth, shard: usize) -> ShardLatents {
    let tm = TokenModel::new(cfg.vocab_size, gt.seed);
    shard_latents_with(cfg, gt, &tm, shard)
}

fn shard_latents_with(cfg: &SynthConfig, gt: &GroundTruth, tm: &TokenModel, shard: usize) -> ShardLatents {
    let rows = shard_rows(cfg, shard);
    let mut rng = ChaCha8Rng::seed_from_u64(gt.seed);
    rng.set_stream(STREAM_SHARD + shard as u64);
    let mut seq_lengths = Vec::new();
    let mut tokens = Vec::with_capacity(rows);
    let mut codes = Vec::with_capacity(rows);
    let mut left = rows;
    while left > 0 {
        let len = cfg.seq_len.min(left);
        seq_lengths.push(len as u32);
        tokens.extend(tm.sequence(&mut rng, len));
        left -= len;
    }
    for _ in 0..rows {
        codes.push(sample_codes(gt, &mut rng, &[]));
    }
    ShardLatents {
        seq_lengths,
        tokens,
        codes,
    }
}

/// One activation row without noise.
fn clean_row(gt: &GroundTruth, k: usize, token: u32, codes: &[(u32, f64)], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for &(i, c) in codes {
        let w = gt.schedules[i as usize][k] * c;
        if w != 0.0 {
            out.iter_mut().zip(&gt.directions[i as usize]).for_each(|(a, g)| *a += w * g);
        }
    }
    let rho = gt.dense_amplitude[k];
    if rho != 0.0 {
        if let Some(e) = gt.dense_embedding.get(token as usize) {
            for (coef, b) in e.iter().zip(&gt.dense_basis) {
                out.iter_mut().zip(b).for_each(|(a, v)| *a += rho * coef * v);
            }
        }
    }
}

fn noise_rng(seed: u64, shard: usize, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_NOISE + ((shard as u64) << 12) + k as u64);
    rng
}

fn render_rows(gt: &GroundTruth, lat: &ShardLatents, k: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let d = gt.d_model();
    let mut out = Array2::<f32>::zeros((lat.tokens.len(), d));
    let mut acc = vec![0.0f64; d];
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        clean_row(gt, k, lat.tokens[r], &lat.codes[r], &mut acc);
        if gt.noise_sigma > 0.0 {
            for a in acc.iter_mut() {
                *a += gt.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        row.iter_mut().zip(&acc).for_each(|(o, &a)| *o = a as f32);
    }
    out
}

fn row_norm_sum(rows: &Array2<f32>) -> f64 {
    rows.rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
        .sum()
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub manifest: SnapshotManifest,
    pub ground_truth: GroundTruth,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn synthetic_vocab(n: usize) -> Vocabulary {
    Vocabulary {
        tokens: (0..n).map(|i| format!(" t{i}")).collect(),
    }
}

fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string(&vocab.tokens)? + "\n").map_err(|e| Error::io(path, e))
}

/// Draw a ground truth and write the dataset under `out`.
pub fn generate_snapshots(cfg: &SynthConfig, seed: u64, out: impl AsRef<Path>) -> Result<SynthOutput> {
    let gt = ground_truth(cfg, seed)?;
    write_dataset(cfg, gt, out)
}

/// Write shards, manifest, vocabulary and ground truth for a given `gt`.
/// Shards are generated in parallel with per-shard random streams.
pub fn write_dataset(cfg: &SynthConfig, mut gt: GroundTruth, out: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    gt.validate()?;
    if gt.d_model() != cfg.d_model || gt.n_snapshots() != cfg.n_snapshots {
        return Err(Error::Shape("ground truth does not match the generator config".into()));
    }
    if gt.dense_amplitude.iter().any(|&a| a != 0.0) && gt.dense_embedding.len() < cfg.vocab_size {
        return Err(Error::InvalidInput("dense embedding does not cover the vocabulary".into()));
    }
    let out = out.as_ref();
    create_dir(&out.join("tokens"))?;
    let k = gt.n_snapshots();
    for t in 0..k {
        create_dir(&out.join(format!("acts/snap_{t:02}")))?;
    }
    let tm = TokenModel::new(cfg.vocab_size, gt.seed);
    let shards = n_shards(cfg);
    let tok_rel = |j: usize| PathBuf::from(format!("tokens/shard_{j:04}.toks"));
    let act_rel = |t: usize, j: usize| PathBuf::from(format!("acts/snap_{t:02}/shard_{j:04}.acts"));
    let norm_sums: Vec<f64> = (0..shards)
        .into_par_iter()
        .map(|j| {
            let lat = shard_latents_with(cfg, &gt, &tm, j);
            write_token_shard(
                out.join(tok_rel(j)),
                &TokenShard {
                    seq_lengths: lat.seq_lengths.clone(),
                    tokens: lat.tokens.clone(),
                },
            )?;
            let mut sum = 0.0;
            for t in 0..k {
                let rows = render_rows(&gt, &lat, t, &mut noise_rng(gt.seed, j, t));
                sum += row_norm_sum(&rows);
                write_activation_shard(out.join(act_rel(t, j)), rows.view())?;
            }
            Ok(sum)
        })
        .collect::<Result<_>>()?;
    let mean = norm_sums.iter().sum::<f64>() / (cfg.n_tokens * k) as f64;
    if !(mean > 0.0) {
        return Err(Error::Degenerate("generated activations are all zero".into()));
    }
    gt.norm_scalar = (cfg.d_model as f64).sqrt() / mean;
    let snapshots = (0..k)
        .map(|t| SnapshotEntry {
            step: gt.steps[t],
            activation_shard_paths: (0..shards).map(|j| act_rel(t, j)).collect(),
            norm_scalar: gt.norm_scalar,
        })
        .collect();
    let mut manifest = SnapshotManifest::new(cfg.d_model, snapshots);
    manifest.token_shard_paths = (0..shards).map(tok_rel).collect();
    manifest.tokenizer_name = "synthetic".into();
    manifest.set_base_dir(out);
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    gt.save(out.join(GROUND_TRUTH_FILE))?;
    save_vocab(&synthetic_vocab(cfg.vocab_size), &out.join(VOCAB_FILE))?;
    Ok(SynthOutput {
        manifest_path,
        manifest,
        ground_truth: gt,
    })
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub true_feature: usize,
    pub feature: usize,
    pub peak_snapshot: usize,
    pub cosine: f64,
    /// Pearson(decoder norm trajectory, strength schedule); `None` when
    /// either series is constant.
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub n_true: usize,
    /// Sorted by true feature.
    pub matches: Vec<FeatureMatch>,
}

impl MatchReport {
    /// Share of true features matched with cosine at least `min_cosine`.
    pub fn fraction_matched(&self, min_cosine: f64) -> f64 {
        if self.n_true == 0 {
            return 0.0;
        }
        self.matches.iter().filter(|m| m.cosine >= min_cosine).count() as f64 / self.n_true as f64
    }

    /// Median Pearson over matches with cosine at least `min_cosine`.
    pub fn median_pearson(&self, min_cosine: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .matches
            .iter()
            .filter(|m| m.cosine >= min_cosine)
            .filter_map(|m| m.pearson)
            .collect();
        median(&v)
    }

    pub fn cosines(&self) -> Vec<f64> {
        self.matches.iter().map(|m| m.cosine).collect()
    }
}

/// Greedy one-to-one assignment of crosscoder features to true directions,
/// comparing each feature's decoder column at its peak-norm snapshot.
pub fn match_features(model: &CrosscoderModel<f32>, gt: &GroundTruth) -> Result<MatchReport> {
    let f = model.n_features();
    if f == 0 {
        return Err(Error::InvalidInput("checkpoint has no features".into()));
    }
    if model.d_model() != gt.d_model() || model.n_snapshots() != gt.n_snapshots() {
        return Err(Error::Shape(format!(
            "checkpoint is {}x{} (d_model x snapshots), ground truth is {}x{}",
            model.d_model(),
            model.n_snapshots(),
            gt.d_model(),
            gt.n_snapshots()
        )));
    }
    let k = model.n_snapshots();
    let norms: Vec<Vec<f64>> = (0..f)
        .map(|j| {
            (0..k)
                .map(|t| model.decoder_column(t, j).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let peaks: Vec<usize> = norms
        .iter()
        .map(|n| n.iter().enumerate().fold(0, |b, (t, &v)| if v > n[b] { t } else { b }))
        .collect();
    let units: Vec<Option<Vec<f64>>> = (0..f)
        .map(|j| {
            let nrm = norms[j][peaks[j]];
            (nrm > 0.0).then(|| model.decoder_column(peaks[j], j).iter().map(|&v| v as f64 / nrm).collect())
        })
        .collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(gt.n_features() * f);
    for (i, g) in gt.directions.iter().enumerate() {
        for (j, u) in units.iter().enumerate() {
            if let Some(u) = u {
                let c: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
                pairs.push((c, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut true_used = vec![false; gt.n_features()];
    let mut feat_used = vec![false; f];
    let mut matches = Vec::new();
    for (c, i, j) in pairs {
        if true_used[i] || feat_used[j] {
            continue;
        }
        true_used[i] = true;
        feat_used[j] = true;
        matches.push(FeatureMatch {
            true_feature: i,
            feature: j,
            peak_snapshot: peaks[j],
            cosine: c,
            pearson: if k >= 2 { pearson(&norms[j], &gt.schedules[i]).ok() } else { None },
        });
    }
    matches.sort_by_key(|m| m.true_feature);
    Ok(MatchReport {
        n_true: gt.n_features(),
        matches,
    })
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub n_pairs: usize,
    pub n_causal: usize,
    /// Snapshot the metric head reads; defaults to the last.
    pub snapshot: Option<usize>,
    /// Causal features are drawn from those with at least this strength at
    /// the head's snapshot.
    pub min_strength: f64,
    /// Chance that each causal feature fires in a clean row. At least one
    /// always fires. Keep it low: dense clean rows sit outside the
    /// distribution the dictionary was trained on and leak into its error.
    pub causal_fire_prob: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_pairs: 256,
            n_causal: 10,
            snapshot: None,
            min_strength: 0.5,
            causal_fire_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTruth {
    pub causal: Vec<usize>,
    pub snapshot: usize,
    pub n_pairs: usize,
    pub head: MetricHead,
}

#[derive(Debug, Clone)]
pub struct TaskOutput {
    pub manifest_path: PathBuf,
    pub task_path: PathBuf,
    pub head_path: PathBuf,
    pub truth: TaskTruth,
}

pub const TASK_FILE: &str = "task.jsonl";
pub const HEAD_FILE: &str = "head.json";
pub const TASK_TRUTH_FILE: &str = "task_truth.json";

/// Write clean/corrupted pairs as their own dataset under `out`.
///
/// Rows `0..n` are clean and rows `n..2n` their corruptions. A pair shares
/// its token, background codes and noise; only the causal features differ,
/// being silenced in the corrupted row. The head is `m(a) = v . a` with `v`
/// the sum of the causal directions.
pub fn generate_task(
    cfg: &SynthConfig,
    gt: &GroundTruth,
    task: &TaskConfig,
    seed: u64,
    out: impl AsRef<Path>,
) -> Result<TaskOutput> {
    cfg.validate()?;
    gt.validate()?;
    if task.n_pairs == 0 || task.n_causal == 0 {
        return Err(Error::InvalidInput("task needs at least one pair and one causal feature".into()));
    }
    if !(gt.norm_scalar > 0.0) {
        return Err(Error::InvalidInput("ground truth has no norm scalar; write the dataset first".into()));
    }
    let k = gt.n_snapshots();
    let snapshot = task.snapshot.unwrap_or(k - 1);
    if snapshot >= k {
        return Err(Error::InvalidInput(format!("task snapshot {snapshot} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_TASK);
    let mut eligible: Vec<usize> = (0..gt.n_features())
        .filter(|&i| gt.schedules[i][snapshot] >= task.min_strength)
        .collect();
    if eligible.len() < task.n_causal {
        return Err(Error::InvalidInput(format!(
            "only {} features reach strength {} at snapshot {snapshot}",
            eligible.len(),
            task.min_strength
        )));
    }
    eligible.shuffle(&mut rng);
    let mut causal: Vec<usize> = eligible[..task.n_causal].to_vec();
    causal.sort_unstable();
    let mut is_causal = vec![false; gt.n_features()];
    causal.iter().for_each(|&i| is_causal[i] = true);

    let tm = TokenModel::new(cfg.vocab_size, gt.seed);
    let n = task.n_pairs;
    let mut tokens = Vec::with_capacity(n);
    let mut background = Vec::with_capacity(n);
    let mut fired = Vec::with_capacity(n);
    for _ in 0..n {
        tokens.push(tm.unigram.sample(&mut rng) as u32);
        background.push(sample_codes(gt, &mut rng, &is_causal));
        let mut on: Vec<(u32, f64)> = causal
            .iter()
            .filter(|_| rng.random_bool(task.causal_fire_prob.clamp(0.0, 1.0)))
            .map(|&i| (i as u32, 0.0))
            .collect();
        if on.is_empty() {
            on.push((causal[rng.random_range(0..causal.len())] as u32, 0.0));
        }
        for c in on.iter_mut() {
            c.1 = gt.magnitude.sample_strong(&mut rng);
        }
        fired.push(on);
    }

    let out = out.as_ref();
    create_dir(out)?;
    let d = gt.d_model();
    let mut acc = vec![0.0f64; d];
    let mut snapshots = Vec::with_capacity(k);
    for t in 0..k {
        let mut nrng = noise_rng(seed, usize::MAX >> 16, t);
        let mut rows = Array2::<f32>::zeros((2 * n, d));
        for j in 0..n {
            let noise: Vec<f64> = (0..d).map(|_| gt.noise_sigma * nrng.sample::<f64, _>(StandardNormal)).collect();
            let mut clean_codes = background[j].clone();
            clean_codes.extend_from_slice(&fired[j]);
            for (r, codes) in [(j, &clean_codes), (n + j, &background[j])] {
                clean_row(gt, t, tokens[j], codes, &mut acc);
                rows.row_mut(r)
                    .iter_mut()
                    .zip(acc.iter().zip(&noise))
                    .for_each(|(o, (a, e))| *o = (a + e) as f32);
            }
        }
        let rel = PathBuf::from(format!("task_snap_{t:02}.acts"));
        write_activation_shard(out.join(&rel), rows.view())?;
        snapshots.push(SnapshotEntry {
            step: gt.steps[t],
            activation_shard_paths: vec![rel],
            norm_scalar: gt.norm_scalar,
        });
    }
    let tok_rel = PathBuf::from("task.toks");
    let mut all_tokens = tokens.clone();
    all_tokens.extend_from_slice(&tokens);
    write_token_shard(out.join(&tok_rel), &TokenShard::from_sequences(all_tokens.iter().map(|&t| vec![t])))?;
    let mut manifest = SnapshotManifest::new(d, snapshots);
    manifest.token_shard_paths = vec![tok_rel];
    manifest.tokenizer_name = "synthetic".into();
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;

    let mut v = vec![0.0; d];
    for &i in &causal {
        v.iter_mut().zip(&gt.directions[i]).for_each(|(a, g)| *a += g);
    }
    let head = MetricHead::Affine { v, offset: 0.0 };
    let head_path = out.join(HEAD_FILE);
    fs::write(&head_path, serde_json::to_string_pretty(&head)? + "\n").map_err(|e| Error::io(&head_path, e))?;
    let records: Vec<TaskRecord> = (0..n)
        .map(|j| TaskRecord {
            clean_row: j as u64,
            corrupted_row: Some((n + j) as u64),
            label: format!("pair{j}"),
        })
        .collect();
    let task_path = out.join(TASK_FILE);
    write_task_file(&task_path, &records)?;
    let truth = TaskTruth {
        causal,
        snapshot,
        n_pairs: n,
        head,
    };
    let truth_path = out.join(TASK_TRUTH_FILE);
    fs::write(&truth_path, serde_json::to_string_pretty(&truth)? + "\n").map_err(|e| Error::io(&truth_path, e))?;
    Ok(TaskOutput {
        manifest_path,
        task_path,
        head_path,
        truth,
    })
}

// ---------------------------------------------------------------------------
// Rule streams
// ---------------------------------------------------------------------------

/// Top-activation index whose features embed known rule patterns.
#[derive(Debug, Clone)]
pub struct RuleStreams {
    pub index: TopActivationIndex,
    pub vocab: Vocabulary,
    /// Construction label per feature.
    pub labels: Vec<RuleClass>,
}

const RULE_TRIGGERS: usize = 16;
const RULE_VOCAB: usize = 2000;
const RULE_CORPUS: u64 = 100_000_000;

fn rule_vocab() -> Vocabulary {
    let mut tokens = Vec::with_capacity(RULE_VOCAB);
    for i in 0..RULE_TRIGGERS {
        tokens.push(format!(" trig{i}"));
        tokens.push(format!("Trig{i}"));
    }
    for i in tokens.len()..RULE_VOCAB {
        tokens.push(format!(" w{i}"));
    }
    Vocabulary { tokens }
}

fn filler<R: Rng>(rng: &mut R, len: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.random_range((2 * RULE_TRIGGERS) as u32..RULE_VOCAB as u32))
        .collect()
}

fn top_sample<R: Rng>(rng: &mut R, sequence: usize, tokens: Vec<u32>, mut fire: Vec<usize>) -> TopSample {
    fire.sort_unstable();
    fire.dedup();
    let activations: Vec<(u32, f32)> = fire.iter().map(|&p| (p as u32, rng.random_range(0.5f32..3.0))).collect();
    TopSample {
        shard: 0,
        sequence,
        start_row: 0,
        max_activation: activations.iter().map(|a| a.1).fold(0.0, f32::max),
        tokens,
        activations,
    }
}

/// Previous-token pattern: fires on the token after a trigger (any casing),
/// plus a fraction `noise` of firings after random tokens.
fn previous_token_samples<R: Rng>(rng: &mut R, trigger: usize, noise: f64) -> Vec<TopSample> {
    (0..20)
        .map(|s| {
            let mut toks = filler(rng, 256);
            let mut fire = Vec::new();
            for _ in 0..10 {
                let p = rng.random_range(1..255);
                if rng.random_bool(noise) {
                    fire.push(p + 1);
                } else {
                    toks[p] = (2 * trigger + rng.random_range(0..2)) as u32;
                    fire.push(p + 1);
                }
            }
            top_sample(rng, s, toks, fire)
        })
        .collect()
}

/// Repeated segment; fires inside the second copy on `rate` of positions.
fn induction_samples<R: Rng>(rng: &mut R, rate: f64) -> Vec<TopSample> {
    (0..20)
        .map(|s| {
            let seg = filler(rng, 100);
            let mut toks = filler(rng, 20);
            toks.extend_from_slice(&seg);
            toks.extend(filler(rng, 20));
            let second = toks.len();
            toks.extend_from_slice(&seg);
            toks.extend(filler(rng, 16));
            let fire: Vec<usize> = (second..second + seg.len() - 1).filter(|_| rng.random_bool(rate)).collect();
            top_sample(rng, s, toks, fire)
        })
        .collect()
}

/// Fires on a contiguous span of `span` positions in every sample.
fn span_samples<R: Rng>(rng: &mut R, span: usize) -> Vec<TopSample> {
    (0..20)
        .map(|s| {
            let toks = filler(rng, 512);
            let start = rng.random_range(0..512 - span);
            top_sample(rng, s, toks, (start..start + span).collect())
        })
        .collect()
}

/// Scattered firings on random tokens.
fn scattered_samples<R: Rng>(rng: &mut R, per_sample: usize) -> Vec<TopSample> {
    (0..20)
        .map(|s| {
            let toks = filler(rng, 256);
            let fire = (0..per_sample).map(|_| rng.random_range(0..256)).collect();
            top_sample(rng, s, toks, fire)
        })
        .collect()
}

/// `n_per_class` features for each rule class plus as many negatives.
/// Negatives include near misses: weak previous-token consistency, too few
/// induction instances, and span features that exceed the corpus-wide cap.
pub fn rule_streams(n_per_class: usize, seed: u64) -> RuleStreams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let cap = 2_000_000u64;
    let mut push = |samples: Vec<TopSample>, total_extra: u64, label: RuleClass, features: &mut Vec<FeatureEntry>| {
        let in_sample: u64 = samples.iter().map(|s| s.activations.len() as u64).sum();
        features.push(FeatureEntry {
            feature: features.len(),
            samples,
            total_activations: in_sample + total_extra,
        });
        labels.push(label);
    };
    for i in 0..n_per_class {
        let s = previous_token_samples(&mut rng, i % RULE_TRIGGERS, 0.05);
        push(s, rng.random_range(0..100_000), RuleClass::PreviousToken, &mut features);
        let s = induction_samples(&mut rng, 0.1);
        push(s, rng.random_range(0..100_000), RuleClass::Induction, &mut features);
        let span = rng.random_range(220..300);
        let s = span_samples(&mut rng, span);
        push(s, rng.random_range(0..1_000_000), RuleClass::ContextSensitive, &mut features);
        let (s, extra) = match i % 4 {
            0 => (previous_token_samples(&mut rng, i % RULE_TRIGGERS, 0.4), 50_000),
            1 => (induction_samples(&mut rng, 0.004), 50_000),
            2 => {
                let span = rng.random_range(220..300);
                (span_samples(&mut rng, span), cap + rng.random_range(1..1_000_000))
            }
            _ => (scattered_samples(&mut rng, 12), 5_000_000),
        };
        push(s, extra, RuleClass::None, &mut features);
    }
    let n = features.len();
    RuleStreams {
        index: TopActivationIndex {
            header: IndexHeader {
                snapshot: 0,
                k: 20,
                total_tokens: RULE_CORPUS,
                n_features: n,
            },
            features,
        },
        vocab: rule_vocab(),
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{read_activation_shard, read_token_shard};

    fn tiny() -> SynthConfig {
        SynthConfig {
            d_model: 8,
            n_true_features: 6,
            n_snapshots: 3,
            n_tokens: 500,
            shard_tokens: 200,
            seq_len: 64,
            vocab_size: 50,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn steps_are_log_spaced() {
        assert_eq!(SynthConfig::default().steps(), vec![1, 10, 100, 1000, 10000]);
        let c = SynthConfig {
            n_snapshots: 40,
            max_log_step: 1.0,
            ..SynthConfig::default()
        };
        assert!(c.steps().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn schedules_have_the_right_shape() {
        let gt = ground_truth(&SynthConfig::default(), 3).unwrap();
        gt.validate().unwrap();
        for (s, c) in gt.schedules.iter().zip(&gt.classes) {
            let rising = s.windows(2).all(|w| w[1] >= w[0]);
            let falling = s.windows(2).all(|w| w[1] <= w[0]);
            match c {
                FeatureClass::Emergent => assert!(rising),
                FeatureClass::Initialization => assert!(falling),
            }
        }
        assert_eq!(gt.classes.iter().filter(|c| **c == FeatureClass::Initialization).count(), 20);
    }

    #[test]
    fn degenerate_generator_reproduces_one_direction() {
        let cfg = SynthConfig {
            n_true_features: 1,
            noise_sigma: 0.0,
            firing_prob_range: (1.0, 1.0),
            magnitude: Magnitude::Constant { value: 1.0 },
            ..tiny()
        };
        let mut gt = ground_truth(&cfg, 1).unwrap();
        gt.schedules = vec![vec![1.0; 3]];
        let dir = tempfile::tempdir().unwrap();
        let out = write_dataset(&cfg, gt.clone(), dir.path()).unwrap();
        for t in 0..3 {
            for p in out.manifest.activation_paths(t) {
                let a = read_activation_shard(p).unwrap();
                for row in a.rows() {
                    for (x, g) in row.iter().zip(&gt.directions[0]) {
                        assert_eq!(*x, *g as f32);
                    }
                }
            }
        }
        assert!((out.ground_truth.norm_scalar - 8f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn null_schedule_contributes_nothing() {
        let cfg = tiny();
        let mut gt = ground_truth(&cfg, 5).unwrap();
        gt.schedules[2] = vec![0.0; 3];
        let mut without = gt.clone();
        without.firing_probs[2] = 0.0;
        let lat = shard_latents(&cfg, &gt, 0);
        let mut lat_without = lat.clone();
        lat_without.codes.iter_mut().for_each(|c| c.retain(|&(i, _)| i != 2));
        for t in 0..3 {
            let a = render_rows(&gt, &lat, t, &mut noise_rng(5, 0, t));
            let b = render_rows(&without, &lat_without, t, &mut noise_rng(5, 0, t));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn generation_is_deterministic_and_readable() {
        let cfg = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let oa = generate_snapshots(&cfg, 11, a.path()).unwrap();
        generate_snapshots(&cfg, 11, b.path()).unwrap();
        for rel in ["acts/snap_02/shard_0002.acts", "tokens/shard_0001.toks", "ground_truth.json"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        let m = SnapshotManifest::load(&oa.manifest_path).unwrap();
        assert_eq!(m.n_rows().unwrap(), 500);
        let toks = read_token_shard(&m.token_paths()[2]).unwrap();
        assert_eq!(toks.n_tokens(), 100);
        assert_eq!(GroundTruth::load(a.path().join(GROUND_TRUTH_FILE)).unwrap(), oa.ground_truth);
    }

    #[test]
    fn planted_checkpoint_matches_perfectly() {
        let cfg = tiny();
        let gt = ground_truth(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = CrosscoderModel::<f32>::random_init(6, 8, gt.steps.clone(), 0.1, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        for (i, &j) in perm.iter().enumerate() {
            for t in 0..3 {
                for r in 0..8 {
                    m.w_dec[t][[r, j]] = (gt.directions[i][r] * gt.schedules[i][t]) as f32;
                }
            }
        }
        let rep = match_features(&m, &gt).unwrap();
        assert_eq!(rep.fraction_matched(0.9999), 1.0);
        for mt in &rep.matches {
            assert_eq!(perm[mt.true_feature], mt.feature);
            assert!((mt.pearson.unwrap() - 1.0).abs() < 1e-5);
        }
        let empty = CrosscoderModel::<f32>::zeros(0, 8, gt.steps.clone());
        assert!(match_features(&empty, &gt).is_err());
    }

    #[test]
    fn rule_streams_label_counts() {
        let r = rule_streams(4, 0);
        assert_eq!(r.index.features.len(), 16);
        assert_eq!(r.labels.iter().filter(|l| **l == RuleClass::None).count(), 4);
    }
}
