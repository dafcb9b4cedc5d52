// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logistic probes predicting whether a feature fires from the raw activation
//! row at one snapshot, and the correlation of probe error with decoder norm.
//!
//! Labels are `1[f_i^t(x) > 0]` from the crosscoder forward pass. Negatives
//! are subsampled to at most ten times the positives and 10% of the rows are
//! held out; the held-out BCE is the reported probe error.
//!
//! Training is full-batch Adam with a backtracking guard: a step that would
//! raise the training BCE is halved until it does not, so the training loss
//! never increases from one epoch to the next.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crosscoder::{forward, CrosscoderModel};
use crate::error::{Error, Result};
use crate::stats::pearson;
use crate::store::{read_activation_batches, SnapshotManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub heldout_fraction: f64,
    /// Cap on negatives per positive.
    pub max_negative_ratio: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            heldout_fraction: 0.1,
            max_negative_ratio: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub feature: usize,
    pub snapshot_step: u64,
    pub w: Vec<f64>,
    pub b: f64,
}

impl ProbeModel {
    pub fn probability(&self, a: ArrayView1<'_, f64>) -> f64 {
        sigmoid(self.w.iter().zip(a).map(|(w, x)| w * x).sum::<f64>() + self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub model: ProbeModel,
    pub bce_train: f64,
    pub bce_heldout: f64,
    /// Training BCE after every epoch, starting with the initial value.
    pub train_curve: Vec<f64>,
    /// Only one class present among the used rows.
    pub degenerate: bool,
    pub n_positive: usize,
    pub n_negative: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean binary cross-entropy of `sigmoid(x w + b)` on the given rows.
pub fn bce(x: ArrayView2<'_, f64>, y: &[f64], w: ArrayView1<'_, f64>, b: f64, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let s: f64 = rows
        .iter()
        .map(|&r| {
            let z = x.row(r).dot(&w) + b;
            softplus(z) - y[r] * z
        })
        .sum();
    s / rows.len() as f64
}

/// Fit a logistic probe on rows of `x` with boolean `labels`.
pub fn train_probe(x: ArrayView2<'_, f64>, labels: &[bool], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("probe needs at least one row".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if !(0.0..1.0).contains(&cfg.heldout_fraction) {
        return Err(Error::InvalidInput("heldout_fraction must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pos: Vec<usize> = (0..n).filter(|&r| labels[r]).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&r| !labels[r]).collect();
    if !pos.is_empty() {
        let cap = pos.len().saturating_mul(cfg.max_negative_ratio.max(1));
        if neg.len() > cap {
            neg.shuffle(&mut rng);
            neg.truncate(cap);
            neg.sort_unstable();
        }
    }
    let degenerate = pos.is_empty() || neg.is_empty();
    let (n_positive, n_negative) = (pos.len(), neg.len());
    let mut used: Vec<usize> = pos.drain(..).chain(neg.drain(..)).collect();
    used.shuffle(&mut rng);
    let n_held = ((used.len() as f64 * cfg.heldout_fraction).round() as usize).min(used.len().saturating_sub(1));
    let held: Vec<usize> = used[..n_held].to_vec();
    let train: Vec<usize> = used[n_held..].to_vec();

    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let d = x.ncols();
    // Contiguous copy of the training rows; the logits of the accepted
    // point are kept so each epoch costs one pass for the gradient and one
    // per line-search trial.
    let xt = x.select(Axis(0), &train);
    let yt: Vec<f64> = train.iter().map(|&r| y[r]).collect();
    let mean_loss = |z: &Array1<f64>| {
        if yt.is_empty() {
            return 0.0;
        }
        z.iter().zip(&yt).map(|(&zi, &yi)| softplus(zi) - yi * zi).sum::<f64>() / yt.len() as f64
    };
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0f64;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = Array1::<f64>::zeros(d + 1);
    let mut v = Array1::<f64>::zeros(d + 1);
    let mut z = Array1::<f64>::zeros(train.len());
    let mut loss = mean_loss(&z);
    let mut curve = vec![loss];
    let inv = 1.0 / train.len() as f64;
    for epoch in 1..=cfg.epochs {
        let mut g = Array1::<f64>::zeros(d + 1);
        for (row, (&zi, &yi)) in xt.rows().into_iter().zip(z.iter().zip(&yt)) {
            let err = sigmoid(zi) - yi;
            g.slice_mut(ndarray::s![..d]).scaled_add(err * inv, &row);
            g[d] += err * inv;
        }
        m = &m * b1 + &(&g * (1.0 - b1));
        v = &v * b2 + &(g.mapv(|x| x * x) * (1.0 - b2));
        let bc1 = 1.0 - b1.powi(epoch as i32);
        let bc2 = 1.0 - b2.powi(epoch as i32);
        let dir: Array1<f64> = m
            .iter()
            .zip(&v)
            .map(|(mi, vi)| (mi / bc1) / ((vi / bc2).sqrt() + eps))
            .collect();
        let mut lr = cfg.learning_rate;
        for _ in 0..30 {
            let w_new = &w - &(dir.slice(ndarray::s![..d]).to_owned() * lr);
            let b_new = b - dir[d] * lr;
            let z_new = xt.dot(&w_new) + b_new;
            let l = mean_loss(&z_new);
            if l <= loss {
                w = w_new;
                b = b_new;
                z = z_new;
                loss = l;
                break;
            }
            lr *= 0.5;
        }
        curve.push(loss);
    }
    let bce_heldout = if held.is_empty() {
        loss
    } else {
        bce(x, &y, w.view(), b, &held)
    };
    Ok(ProbeResult {
        model: ProbeModel {
            feature: 0,
            snapshot_step: 0,
            w: w.to_vec(),
            b,
        },
        bce_train: loss,
        bce_heldout,
        train_curve: curve,
        degenerate,
        n_positive,
        n_negative,
    })
}

/// Pearson correlation of probe error with decoder norm across snapshots.
pub fn norm_error_correlation(errors: &[f64], norms: &[f64]) -> Result<f64> {
    if errors.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 snapshots, got {}",
            errors.len()
        )));
    }
    pearson(errors, norms)
}

/// One probe outcome in the CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub feature: usize,
    pub snapshot: usize,
    pub step: u64,
    pub bce_train: f64,
    pub bce_heldout: f64,
    pub decoder_norm: f64,
    pub degenerate: bool,
    pub n_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCorrelation {
    pub feature: usize,
    /// `None` when fewer than three non-degenerate snapshots remain or a
    /// series is constant.
    pub pearson: Option<f64>,
    pub n_snapshots: usize,
}

/// Train a probe for every (feature, snapshot) pair on the first `max_rows`
/// rows of `manifest`.
pub fn probe_features(
    model: &CrosscoderModel<f32>,
    manifest: &SnapshotManifest,
    features: &[usize],
    max_rows: usize,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeRow>> {
    if let Some(&f) = features.iter().find(|&&f| f >= model.n_features()) {
        return Err(Error::InvalidInput(format!("feature {f} out of range")));
    }
    let all: Vec<usize> = (0..manifest.n_snapshots()).collect();
    let stream = read_activation_batches(manifest, &all, 4096)?;
    let rows = (stream.total_rows() as usize).min(max_rows);
    if rows == 0 {
        return Err(Error::InvalidInput("no rows to probe".into()));
    }
    let batch = stream.read_range(0, rows)?;
    let views = batch.views();
    let rec = forward(model, &views)?;
    let x: Vec<ndarray::Array2<f64>> = batch.snapshots.iter().map(|a| a.mapv(|v| v as f64)).collect();
    let pairs: Vec<(usize, usize)> = features
        .iter()
        .flat_map(|&f| (0..model.n_snapshots()).map(move |t| (f, t)))
        .collect();
    pairs
        .par_iter()
        .map(|&(f, t)| {
            let labels: Vec<bool> = rec.snapshots[t].acts.column(f).iter().map(|&v| v > 0.0).collect();
            let c = ProbeConfig {
                seed: cfg.seed ^ ((f as u64) << 20) ^ t as u64,
                ..cfg.clone()
            };
            let r = train_probe(x[t].view(), &labels, &c)?;
            let col = model.decoder_column(t, f);
            Ok(ProbeRow {
                feature: f,
                snapshot: t,
                step: model.steps[t],
                bce_train: r.bce_train,
                bce_heldout: r.bce_heldout,
                decoder_norm: col.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt(),
                degenerate: r.degenerate,
                n_positive: r.n_positive,
            })
        })
        .collect()
}

/// Per-feature Pearson(held-out BCE, decoder norm), skipping degenerate
/// snapshots.
pub fn feature_correlations(rows: &[ProbeRow]) -> Vec<FeatureCorrelation> {
    let mut features: Vec<usize> = rows.iter().map(|r| r.feature).collect();
    features.sort_unstable();
    features.dedup();
    features
        .into_iter()
        .map(|f| {
            let (errs, norms): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.feature == f && !r.degenerate)
                .map(|r| (r.bce_heldout, r.decoder_norm))
                .unzip();
            FeatureCorrelation {
                feature: f,
                pearson: norm_error_correlation(&errs, &norms).ok(),
                n_snapshots: errs.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Axis};
    use rand::Rng;

    #[test]
    fn separable_data_reaches_low_heldout_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Array2<f64> = Array2::from_shape_fn((600, 3), |_| rng.random_range(-1.0..1.0));
        // Margin: drop points near the plane x0 + x1 = 0.
        let keep: Vec<usize> = (0..600).filter(|&r| (x[[r, 0]] + x[[r, 1]]).abs() > 0.3).collect();
        let x = x.select(Axis(0), &keep);
        let labels: Vec<bool> = x.rows().into_iter().map(|r| r[0] + r[1] > 0.0).collect();
        let r = train_probe(x.view(), &labels, &ProbeConfig { epochs: 400, ..Default::default() }).unwrap();
        assert!(r.bce_heldout < 0.05, "{}", r.bce_heldout);
        assert!(!r.degenerate);
    }

    #[test]
    fn training_curve_never_rises() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((300, 4), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<bool> = (0..300).map(|_| rng.random_bool(0.3)).collect();
        let r = train_probe(x.view(), &labels, &ProbeConfig { learning_rate: 0.5, ..Default::default() }).unwrap();
        assert!(r.train_curve.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn all_negative_labels_are_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((100, 2), |_| rng.random_range(-1.0..1.0));
        let r = train_probe(x.view(), &[false; 100], &ProbeConfig::default()).unwrap();
        assert!(r.degenerate);
        assert!(r.bce_heldout < 0.1);
    }

    #[test]
    fn affine_errors_correlate_minus_one() {
        let norms = [0.1, 0.5, 0.9, 1.3];
        let errs: Vec<f64> = norms.iter().map(|n| 2.0 - 0.7 * n).collect();
        assert!((norm_error_correlation(&errs, &norms).unwrap() + 1.0).abs() < 1e-12);
        assert!(norm_error_correlation(&[0.3; 4], &norms).is_err());
        assert!(norm_error_correlation(&[0.1, 0.2], &[1.0, 2.0]).is_err());
    }
}
