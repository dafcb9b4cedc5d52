// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-norm trajectories and the statistics built on them.
//!
//! A feature's decoder norm at a snapshot is read as its strength there.
//! Norms are compared after rescaling each trajectory to a maximum of 1, which
//! decouples the statistics from the overall activation scale.
//!
//! The class and onset rules are quantifications of a qualitative picture:
//! a feature is an *initialization* feature when its step-0 norm is at least
//! half its peak, otherwise *emergent*, with onset at the first snapshot whose
//! norm exceeds a tenth of the peak.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::crosscoder::CrosscoderModel;
use crate::error::{Error, Result};

/// Lifetime threshold on rescaled norms.
pub const LIFETIME_THRESHOLD: f64 = 0.3;
/// Step-0 norm, relative to the peak, from which a feature counts as present
/// at initialization.
pub const INIT_CLASS_FRACTION: f64 = 0.5;
/// Relative norm that marks emergence onset.
pub const ONSET_FRACTION: f64 = 0.1;
/// Rescaled norm both snapshots need for a feature to enter mean projections.
pub const PROJECTION_FLOOR: f64 = 0.05;
/// Cosine above which two decoder columns count as a split of one concept.
pub const SPLIT_COSINE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrajectory {
    pub feature: usize,
    /// Decoder column norms, one per snapshot.
    pub norms: Vec<f64>,
    /// `norms / max(norms)`; all zero when every norm is zero.
    pub rescaled: Vec<f64>,
    /// Unit decoder directions, `n_snapshots x d_model`; zero rows where the
    /// norm is zero.
    pub directions: Array2<f64>,
}

impl FeatureTrajectory {
    pub fn n_snapshots(&self) -> usize {
        self.norms.len()
    }

    pub fn peak_norm(&self) -> f64 {
        self.norms.iter().copied().fold(0.0, f64::max)
    }
}

fn rescale(norms: &[f64]) -> Vec<f64> {
    let max = norms.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        norms.iter().map(|n| n / max).collect()
    } else {
        vec![0.0; norms.len()]
    }
}

/// Decoder norms of every feature at every snapshot, `n_features x n_snapshots`.
pub fn norm_table(model: &CrosscoderModel<f32>) -> Array2<f64> {
    let mut out = Array2::zeros((model.n_features(), model.n_snapshots()));
    for t in 0..model.n_snapshots() {
        for (i, col) in model.w_dec[t].columns().into_iter().enumerate() {
            out[[i, t]] = col.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        }
    }
    out
}

/// Trajectory of one feature.
pub fn trajectory(model: &CrosscoderModel<f32>, feature: usize) -> Result<FeatureTrajectory> {
    if feature >= model.n_features() {
        return Err(Error::InvalidInput(format!(
            "feature {feature} out of range ({} features)",
            model.n_features()
        )));
    }
    let n = model.n_snapshots();
    let mut norms = Vec::with_capacity(n);
    let mut directions = Array2::zeros((n, model.d_model()));
    for t in 0..n {
        let col = model.decoder_column(t, feature).mapv(|v| v as f64);
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            directions.row_mut(t).assign(&(&col / norm));
        }
        norms.push(norm);
    }
    Ok(FeatureTrajectory {
        feature,
        rescaled: rescale(&norms),
        norms,
        directions,
    })
}

/// One trajectory per feature. Holds every decoder direction, so memory is
/// `n_features * n_snapshots * d_model` doubles.
pub fn trajectories(model: &CrosscoderModel<f32>) -> Vec<FeatureTrajectory> {
    (0..model.n_features())
        .map(|i| trajectory(model, i).expect("feature index in range"))
        .collect()
}

/// Which norms the lifetime threshold applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    Rescaled,
    Raw,
}

/// Number of snapshots whose norm is strictly above `threshold`.
pub fn lifetime(traj: &FeatureTrajectory, threshold: f64, mode: NormMode) -> usize {
    let norms = match mode {
        NormMode::Rescaled => &traj.rescaled,
        NormMode::Raw => &traj.norms,
    };
    norms.iter().filter(|&&n| n > threshold).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureClass {
    Initialization,
    Emergent,
}

/// Peak and class of one trajectory, in snapshot indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakInfo {
    pub peak_index: usize,
    pub class: FeatureClass,
    /// First snapshot above `ONSET_FRACTION * peak`; emergent features only.
    pub onset_index: Option<usize>,
    /// `peak_index - onset_index`.
    pub steepness: Option<usize>,
}

pub fn classify_and_peak(traj: &FeatureTrajectory) -> PeakInfo {
    let norms = &traj.norms;
    let mut peak_index = 0;
    for (k, &n) in norms.iter().enumerate() {
        if n > norms[peak_index] {
            peak_index = k;
        }
    }
    let peak = norms.get(peak_index).copied().unwrap_or(0.0);
    let first = norms.first().copied().unwrap_or(0.0);
    if first >= INIT_CLASS_FRACTION * peak {
        return PeakInfo {
            peak_index,
            class: FeatureClass::Initialization,
            onset_index: None,
            steepness: None,
        };
    }
    let onset = norms.iter().position(|&n| n > ONSET_FRACTION * peak);
    PeakInfo {
        peak_index,
        class: FeatureClass::Emergent,
        onset_index: onset,
        steepness: onset.map(|o| peak_index.saturating_sub(o)),
    }
}

/// Everything reported per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionStats {
    pub feature: usize,
    pub norms: Vec<f64>,
    pub peak_step: u64,
    pub emergence_onset_step: Option<u64>,
    pub steepness: Option<usize>,
    pub lifetime: usize,
    pub class: FeatureClass,
}

pub fn evolution_stats(traj: &FeatureTrajectory, steps: &[u64], threshold: f64, mode: NormMode) -> EvolutionStats {
    let p = classify_and_peak(traj);
    EvolutionStats {
        feature: traj.feature,
        norms: traj.norms.clone(),
        peak_step: steps.get(p.peak_index).copied().unwrap_or(0),
        emergence_onset_step: p.onset_index.and_then(|o| steps.get(o).copied()),
        steepness: p.steepness,
        lifetime: lifetime(traj, threshold, mode),
        class: p.class,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    /// Index into the trajectory slice.
    PerFeature(usize),
    Mean,
}

/// Cross-snapshot projection matrix `P[j][k] = u_j . u_k` of unit decoder
/// directions. Entries with no defined value are NaN.
pub fn projection_matrix(trajs: &[FeatureTrajectory], mode: ProjectionMode) -> Result<Array2<f64>> {
    let n = trajs.first().map_or(0, FeatureTrajectory::n_snapshots);
    if n == 0 {
        return Err(Error::InvalidInput("no trajectories".into()));
    }
    match mode {
        ProjectionMode::PerFeature(idx) => {
            let tr = trajs
                .get(idx)
                .ok_or_else(|| Error::InvalidInput(format!("trajectory {idx} out of range")))?;
            if tr.norms.iter().all(|&v| v == 0.0) {
                return Err(Error::Degenerate(format!("feature {} has zero norm everywhere", tr.feature)));
            }
            let gram = tr.directions.dot(&tr.directions.t());
            Ok(Array2::from_shape_fn((n, n), |(j, k)| {
                if tr.norms[j] > 0.0 && tr.norms[k] > 0.0 {
                    gram[[j, k]]
                } else {
                    f64::NAN
                }
            }))
        }
        ProjectionMode::Mean => {
            let mut sum = Array2::<f64>::zeros((n, n));
            let mut count = Array2::<u64>::zeros((n, n));
            for tr in trajs {
                let eligible: Vec<bool> = tr.rescaled.iter().map(|&r| r > PROJECTION_FLOOR).collect();
                if !eligible.iter().any(|&e| e) {
                    continue;
                }
                let gram = tr.directions.dot(&tr.directions.t());
                for j in 0..n {
                    for k in 0..n {
                        if eligible[j] && eligible[k] {
                            sum[[j, k]] += gram[[j, k]];
                            count[[j, k]] += 1;
                        }
                    }
                }
            }
            if count.iter().all(|&c| c == 0) {
                return Err(Error::Degenerate("no feature passes the projection floor".into()));
            }
            Ok(Array2::from_shape_fn((n, n), |(j, k)| match count[[j, k]] {
                0 => f64::NAN,
                c => sum[[j, k]] / c as f64,
            }))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimensionality {
    pub per_feature: Vec<f64>,
    /// `sum_i D_i / d_model`.
    pub total_ratio: f64,
}

/// `D_i = ||W_i||^2 / sum_j (W_i/||W_i|| . W_j)^2 = G_ii^2 / sum_j G_ij^2` with
/// `G` the decoder Gram matrix at `snapshot`; zero for zero-norm features.
pub fn feature_dimensionality(model: &CrosscoderModel<f32>, snapshot: usize) -> Result<Dimensionality> {
    if snapshot >= model.n_snapshots() {
        return Err(Error::InvalidInput(format!(
            "snapshot {snapshot} out of range ({} snapshots)",
            model.n_snapshots()
        )));
    }
    let w: Array2<f64> = model.w_dec[snapshot].mapv(|v| v as f64);
    let f = w.ncols();
    let mut per_feature = vec![0.0; f];
    // The Gram matrix is formed in row blocks so memory stays O(block * F).
    const BLOCK: usize = 256;
    let mut g = Array2::<f64>::zeros((BLOCK.min(f), f));
    for start in (0..f).step_by(BLOCK) {
        let end = (start + BLOCK).min(f);
        let rows = end - start;
        let mut gb = g.slice_mut(s![..rows, ..]);
        general_mat_mul(1.0, &w.slice(s![.., start..end]).t(), &w, 0.0, &mut gb);
        for r in 0..rows {
            let i = start + r;
            let gii = gb[[r, i]];
            if gii > 0.0 {
                let denom: f64 = gb.row(r).iter().map(|v| v * v).sum();
                per_feature[i] = gii * gii / denom;
            }
        }
    }
    let total_ratio = per_feature.iter().sum::<f64>() / model.d_model() as f64;
    Ok(Dimensionality { per_feature, total_ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMatch {
    pub feature: usize,
    /// Snapshot of the seed column.
    pub seed_snapshot: usize,
    /// Snapshot of the matching column.
    pub snapshot: usize,
    pub cosine: f64,
}

/// Decoder columns, at any snapshot, whose cosine with any of the seed
/// feature's columns exceeds `cos_threshold`.
pub fn splitting_search(model: &CrosscoderModel<f32>, seed_feature: usize, cos_threshold: f64) -> Result<Vec<SplitMatch>> {
    if !(cos_threshold > 0.0 && cos_threshold <= 1.0) {
        return Err(Error::InvalidInput(format!("cosine threshold must lie in (0, 1], got {cos_threshold}")));
    }
    let seed = trajectory(model, seed_feature)?;
    if seed.norms.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!("seed feature {seed_feature} has zero norm")));
    }
    let mut out = Vec::new();
    for t in 0..model.n_snapshots() {
        let w = model.w_dec[t].mapv(|v| v as f64);
        let norms: Array1<f64> = w.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
        // projections[s][j] = u_seed(s) . W_j(t)
        let projections = seed.directions.dot(&w);
        for (s_idx, &seed_norm) in seed.norms.iter().enumerate() {
            if seed_norm == 0.0 {
                continue;
            }
            for j in 0..w.ncols() {
                if norms[j] == 0.0 || (j == seed_feature && s_idx == t) {
                    continue;
                }
                let cosine = projections[[s_idx, j]] / norms[j];
                if cosine > cos_threshold {
                    out.push(SplitMatch {
                        feature: j,
                        seed_snapshot: s_idx,
                        snapshot: t,
                        cosine,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| b.cosine.total_cmp(&a.cosine));
    Ok(out)
}
