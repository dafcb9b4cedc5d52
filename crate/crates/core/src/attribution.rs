// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature attribution against a scalar metric of the activations.
//!
//! An activation row decomposes as `a = sum_i f_i W_dec[:, i] + b_dec + eps`.
//! The attribution of feature `i` is its activation (or clean-minus-corrupted
//! activation delta) times the metric gradient projected on its decoder
//! column:
//!
//! | variant       | factor              | gradient taken at                     |
//! |---------------|---------------------|---------------------------------------|
//! | `plain`       | `f_i(x)`            | the clean row                         |
//! | `patching`    | `f_i(x) - f_i(x~)`  | the clean row                         |
//! | `ig-plain`    | `f_i(x)`            | mean over `alpha f(x)`                |
//! | `ig-patching` | `f_i(x) - f_i(x~)`  | mean over `alpha f(x) + (1-alpha) f(x~)` |
//!
//! Integrated-gradient variants use `alpha = 0, 1/N, ..., (N-1)/N` and hold
//! `eps` at the clean residual along the path.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crosscoder::{forward, CrosscoderModel};
use crate::error::{Error, Result};
use crate::store::{read_activation_batches, SnapshotManifest};

/// Default number of interpolation points.
pub const IG_STEPS: usize = 10;

/// Scalar metric `m: R^d -> R` with an exact gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricHead {
    /// `m(a) = v . a + offset`
    Affine { v: Vec<f64>, offset: f64 },
    /// `m(a) = w2 . tanh(W1 a + b1) + b2`, `W1` given as rows.
    Mlp1 {
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

impl MetricHead {
    pub fn input_dim(&self) -> usize {
        match self {
            MetricHead::Affine { v, .. } => v.len(),
            MetricHead::Mlp1 { w1, .. } => w1.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let MetricHead::Mlp1 { w1, b1, w2, .. } = self {
            let d = self.input_dim();
            if w1.len() != b1.len() || w1.len() != w2.len() || w1.iter().any(|r| r.len() != d) {
                return Err(Error::Shape("mlp1 head layers have inconsistent sizes".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let head: MetricHead = serde_json::from_str(&text)?;
        head.validate()?;
        Ok(head)
    }

    fn hidden(&self, a: ArrayView1<'_, f64>) -> Vec<f64> {
        match self {
            MetricHead::Affine { .. } => Vec::new(),
            MetricHead::Mlp1 { w1, b1, .. } => w1
                .iter()
                .zip(b1)
                .map(|(row, b)| (row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>() + b).tanh())
                .collect(),
        }
    }

    pub fn value(&self, a: ArrayView1<'_, f64>) -> f64 {
        match self {
            MetricHead::Affine { v, offset } => v.iter().zip(a).map(|(w, x)| w * x).sum::<f64>() + offset,
            MetricHead::Mlp1 { w2, b2, .. } => {
                self.hidden(a).iter().zip(w2).map(|(h, w)| h * w).sum::<f64>() + b2
            }
        }
    }

    pub fn gradient(&self, a: ArrayView1<'_, f64>) -> Array1<f64> {
        match self {
            MetricHead::Affine { v, .. } => Array1::from(v.clone()),
            MetricHead::Mlp1 { w1, w2, .. } => {
                let mut g = Array1::zeros(a.len());
                for ((h, row), w) in self.hidden(a).iter().zip(w1).zip(w2) {
                    let c = w * (1.0 - h * h);
                    for (gj, wj) in g.iter_mut().zip(row) {
                        *gj += c * wj;
                    }
                }
                g
            }
        }
    }
}

/// One task example: activation rows at every snapshot for the clean input
/// and optionally for its corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub clean: Vec<Array1<f64>>,
    pub corrupted: Option<Vec<Array1<f64>>>,
    pub label: String,
}

/// One line of a task file: row indices into a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub clean_row: u64,
    #[serde(default)]
    pub corrupted_row: Option<u64>,
    #[serde(default)]
    pub label: String,
}

pub fn read_task_file(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

pub fn write_task_file(path: impl AsRef<Path>, records: &[TaskRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Resolve task records against a manifest (rows normalized as in training).
pub fn load_task(manifest: &SnapshotManifest, records: &[TaskRecord]) -> Result<Vec<TaskSample>> {
    let all: Vec<usize> = (0..manifest.n_snapshots()).collect();
    let stream = read_activation_batches(manifest, &all, 1)?;
    let row = |r: u64| -> Result<Vec<Array1<f64>>> {
        let b = stream.read_range(r, 1)?;
        Ok(b.snapshots.iter().map(|a| a.row(0).mapv(|v| v as f64)).collect())
    };
    records
        .iter()
        .map(|rec| {
            Ok(TaskSample {
                clean: row(rec.clean_row)?,
                corrupted: rec.corrupted_row.map(row).transpose()?,
                label: rec.label.clone(),
            })
        })
        .collect()
}

/// Per-feature decomposition of one activation row.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `f^t`, one value per feature.
    pub features: Array1<f64>,
    /// `W_dec f + b_dec`.
    pub reconstruction: Array1<f64>,
    /// `a - reconstruction`.
    pub error: Array1<f64>,
}

impl Decomposition {
    pub fn contribution(&self, model: &CrosscoderModel<f64>, snapshot: usize, feature: usize) -> Array1<f64> {
        model.decoder_column(snapshot, feature).mapv(|w| w * self.features[feature])
    }
}

fn check_rows(model: &CrosscoderModel<f64>, rows: &[Array1<f64>]) -> Result<()> {
    if rows.len() != model.n_snapshots() {
        return Err(Error::Shape(format!(
            "sample has {} snapshots, model has {}",
            rows.len(),
            model.n_snapshots()
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != model.d_model()) {
        return Err(Error::Shape(format!("row width {} != d_model {}", r.len(), model.d_model())));
    }
    Ok(())
}

/// Decompose the row at `snapshot`; the sparse code is computed from the rows
/// at every snapshot.
pub fn decompose(model: &CrosscoderModel<f64>, snapshot: usize, rows: &[Array1<f64>]) -> Result<Decomposition> {
    check_rows(model, rows)?;
    if snapshot >= model.n_snapshots() {
        return Err(Error::InvalidInput(format!("snapshot {snapshot} out of range")));
    }
    let mats: Vec<Array2<f64>> = rows.iter().map(|r| r.view().insert_axis(Axis(0)).to_owned()).collect();
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    let rec = forward(model, &views)?;
    let snap = &rec.snapshots[snapshot];
    let reconstruction = snap.recon.row(0).to_owned();
    Ok(Decomposition {
        features: snap.acts.row(0).to_owned(),
        error: &rows[snapshot] - &reconstruction,
        reconstruction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "patching")]
    Patching,
    #[serde(rename = "ig-plain")]
    IgPlain,
    #[serde(rename = "ig-patching")]
    IgPatching,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Plain, Variant::Patching, Variant::IgPlain, Variant::IgPatching];

    pub fn needs_corruption(self) -> bool {
        matches!(self, Variant::Patching | Variant::IgPatching)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Patching => "patching",
            Variant::IgPlain => "ig-plain",
            Variant::IgPatching => "ig-patching",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown attribution variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub feature: usize,
    pub snapshot_step: u64,
    pub score: f64,
    pub variant: Variant,
}

/// `W_dec^T g`: the gradient of the metric with respect to each feature.
fn feature_gradient(model: &CrosscoderModel<f64>, snapshot: usize, g: &Array1<f64>) -> Array1<f64> {
    model.w_dec[snapshot].t().dot(g)
}

/// Per-feature attribution scores for one sample at one snapshot.
pub fn attribution_scores(
    model: &CrosscoderModel<f64>,
    snapshot: usize,
    head: &MetricHead,
    sample: &TaskSample,
    variant: Variant,
    n_steps: usize,
) -> Result<Array1<f64>> {
    if head.input_dim() != model.d_model() {
        return Err(Error::Shape(format!(
            "metric head takes {} inputs, model d_model is {}",
            head.input_dim(),
            model.d_model()
        )));
    }
    if n_steps == 0 {
        return Err(Error::InvalidInput("n_steps must be at least 1".into()));
    }
    let clean = decompose(model, snapshot, &sample.clean)?;
    let corrupted = match (&sample.corrupted, variant.needs_corruption()) {
        (Some(rows), true) => Some(decompose(model, snapshot, rows)?),
        (None, true) => {
            return Err(Error::InvalidInput(format!(
                "variant {} needs a corrupted row",
                variant.name()
            )))
        }
        _ => None,
    };
    let factor = match &corrupted {
        Some(c) => &clean.features - &c.features,
        None => clean.features.clone(),
    };
    let grad = match variant {
        Variant::Plain | Variant::Patching => head.gradient(sample.clean[snapshot].view()),
        Variant::IgPlain | Variant::IgPatching => {
            let base = match &corrupted {
                Some(c) => c.features.clone(),
                None => Array1::zeros(model.n_features()),
            };
            let w = &model.w_dec[snapshot];
            let fixed = &model.b_dec[snapshot] + &clean.error;
            let mut acc = Array1::<f64>::zeros(model.d_model());
            for k in 0..n_steps {
                let alpha = k as f64 / n_steps as f64;
                let f = &base + &((&clean.features - &base) * alpha);
                let a = w.dot(&f) + &fixed;
                acc += &head.gradient(a.view());
            }
            acc / n_steps as f64
        }
    };
    Ok(factor * feature_gradient(model, snapshot, &grad))
}

/// [`attribution_scores`] packaged as records.
pub fn attribute(
    model: &CrosscoderModel<f64>,
    snapshot: usize,
    head: &MetricHead,
    sample: &TaskSample,
    variant: Variant,
    n_steps: usize,
) -> Result<Vec<AttributionRecord>> {
    let scores = attribution_scores(model, snapshot, head, sample, variant, n_steps)?;
    let step = model.steps[snapshot];
    Ok(scores
        .iter()
        .enumerate()
        .map(|(feature, &score)| AttributionRecord {
            feature,
            snapshot_step: step,
            score,
            variant,
        })
        .collect())
}

/// Mean attribution per feature over every sample and snapshot, computed in
/// parallel over samples with a fixed aggregation order.
pub fn mean_scores(
    model: &CrosscoderModel<f64>,
    head: &MetricHead,
    samples: &[TaskSample],
    variant: Variant,
    n_steps: usize,
) -> Result<Array1<f64>> {
    let per_sample: Vec<Array1<f64>> = samples
        .par_iter()
        .map(|s| {
            let mut acc = Array1::zeros(model.n_features());
            for t in 0..model.n_snapshots() {
                acc += &attribution_scores(model, t, head, s, variant, n_steps)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Array1::zeros(model.n_features());
    for s in &per_sample {
        total += s;
    }
    let n = (samples.len() * model.n_snapshots()).max(1) as f64;
    Ok(total / n)
}

/// Features by descending mean score; ties by feature id.
pub fn rank_features(records: &[AttributionRecord]) -> Vec<usize> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(r.feature).or_insert((0.0, 0));
        e.0 += r.score;
        e.1 += 1;
    }
    let means: Vec<(usize, f64)> = sums.into_iter().map(|(f, (s, n))| (f, s / n as f64)).collect();
    rank_by_score(&means)
}

/// Rank `(feature, score)` pairs by descending score, ties by id.
pub fn rank_by_score(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(f, _)| f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Edit the top `k` features.
    AblateTop,
    /// Edit every feature except the top `k`.
    KeepTop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub k: usize,
    pub mode: AblationMode,
    pub recovery: f64,
    /// Samples without a usable denominator.
    pub skipped: usize,
}

/// Activation at `snapshot` after replacing the contributions of `edited`
/// features by their corrupted-sample values (zero without a corruption).
pub fn edited_activation(
    model: &CrosscoderModel<f64>,
    snapshot: usize,
    clean: &Decomposition,
    corrupted: Option<&Decomposition>,
    edited: &[bool],
) -> Array1<f64> {
    let mut a = &clean.reconstruction + &clean.error;
    for (i, &e) in edited.iter().enumerate() {
        if !e {
            continue;
        }
        let target = corrupted.map_or(0.0, |c| c.features[i]);
        let delta = target - clean.features[i];
        if delta != 0.0 {
            a.scaled_add(delta, &model.decoder_column(snapshot, i));
        }
    }
    a
}

/// Mean metric recovery when editing features according to `mode`.
///
/// With a corruption: `(m(edited) - m(corrupt)) / (m(clean) - m(corrupt))`.
/// Without: `m(edited) / m(clean)`.
pub fn ablation_experiment(
    model: &CrosscoderModel<f64>,
    snapshot: usize,
    head: &MetricHead,
    samples: &[TaskSample],
    ranked: &[usize],
    k: usize,
    mode: AblationMode,
) -> Result<AblationResult> {
    let n = model.n_features();
    let mut top = vec![false; n];
    for &f in ranked.iter().take(k) {
        if f >= n {
            return Err(Error::InvalidInput(format!("ranked feature {f} out of range")));
        }
        top[f] = true;
    }
    let edited: Vec<bool> = match mode {
        AblationMode::AblateTop => top,
        AblationMode::KeepTop => top.iter().map(|t| !t).collect(),
    };
    let per_sample: Vec<Option<f64>> = samples
        .par_iter()
        .map(|s| {
            let clean = decompose(model, snapshot, &s.clean)?;
            let corrupted = s.corrupted.as_ref().map(|rows| decompose(model, snapshot, rows)).transpose()?;
            let a = edited_activation(model, snapshot, &clean, corrupted.as_ref(), &edited);
            let m_edit = head.value(a.view());
            let m_clean = head.value(s.clean[snapshot].view());
            Ok(match &s.corrupted {
                Some(rows) => {
                    let m_corrupt = head.value(rows[snapshot].view());
                    let denom = m_clean - m_corrupt;
                    (denom.abs() > 1e-12).then(|| (m_edit - m_corrupt) / denom)
                }
                None => (m_clean.abs() > 1e-12).then(|| m_edit / m_clean),
            })
        })
        .collect::<Result<_>>()?;
    let used: Vec<f64> = per_sample.iter().flatten().copied().collect();
    let skipped = per_sample.len() - used.len();
    if skipped > 0 {
        log::warn!("ablation: skipped {skipped} samples with an undefined recovery ratio");
    }
    if used.is_empty() {
        return Err(Error::Degenerate("no sample has a defined recovery ratio".into()));
    }
    Ok(AblationResult {
        k,
        mode,
        recovery: used.iter().sum::<f64>() / used.len() as f64,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, f: usize, d: usize, n: usize) -> CrosscoderModel<f64> {
        let mut m = CrosscoderModel::<f64>::random_init(f, d, (0..n as u64).collect(), 0.0, rng);
        for t in 0..n {
            m.b_dec[t].mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        m
    }

    fn random_rows(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<Array1<f64>> {
        (0..n).map(|_| Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))).collect()
    }

    fn mlp(rng: &mut ChaCha8Rng, d: usize, h: usize) -> MetricHead {
        MetricHead::Mlp1 {
            w1: (0..h).map(|_| (0..d).map(|_| rng.random_range(-0.5..0.5)).collect()).collect(),
            b1: (0..h).map(|_| rng.random_range(-0.1..0.1)).collect(),
            w2: (0..h).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b2: 0.3,
        }
    }

    #[test]
    fn decomposition_reassembles_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 6, 4, 2);
        let rows = random_rows(&mut rng, 4, 2);
        let d = decompose(&m, 1, &rows).unwrap();
        let mut sum = m.b_dec[1].clone() + &d.error;
        for i in 0..6 {
            sum += &d.contribution(&m, 1, i);
        }
        for (x, y) in sum.iter().zip(&rows[1]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_error_is_row_minus_bias() {
        let mut m = CrosscoderModel::<f64>::zeros(2, 2, vec![0]);
        m.b_dec[0] = Array1::from(vec![0.5, -1.0]);
        let rows = vec![Array1::from(vec![2.0, 3.0])];
        let d = decompose(&m, 0, &rows).unwrap();
        assert_eq!(d.error.to_vec(), vec![1.5, 4.0]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = mlp(&mut rng, 5, 7);
        let a = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let g = head.gradient(a.view());
        let h = 1e-6;
        for j in 0..5 {
            let mut p = a.clone();
            let mut q = a.clone();
            p[j] += h;
            q[j] -= h;
            let fd = (head.value(p.view()) - head.value(q.view())) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn affine_head_plain_and_ig_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 8, 4, 2);
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let head = MetricHead::Affine { v: v.clone(), offset: 2.0 };
        let sample = TaskSample {
            clean: random_rows(&mut rng, 4, 2),
            corrupted: Some(random_rows(&mut rng, 4, 2)),
            label: String::new(),
        };
        let d = decompose(&m, 0, &sample.clean).unwrap();
        let plain = attribution_scores(&m, 0, &head, &sample, Variant::Plain, 10).unwrap();
        for i in 0..8 {
            let col = m.decoder_column(0, i);
            let expected = d.features[i] * col.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            assert!((plain[i] - expected).abs() < 1e-12);
        }
        let ig = attribution_scores(&m, 0, &head, &sample, Variant::IgPlain, 10).unwrap();
        let patch = attribution_scores(&m, 0, &head, &sample, Variant::Patching, 10).unwrap();
        let ig_patch = attribution_scores(&m, 0, &head, &sample, Variant::IgPatching, 7).unwrap();
        for i in 0..8 {
            assert!((ig[i] - plain[i]).abs() < 1e-12);
            assert!((ig_patch[i] - patch[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn patching_needs_corruption_and_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 6, 3, 1);
        let head = mlp(&mut rng, 3, 4);
        let clean = random_rows(&mut rng, 3, 1);
        let other = random_rows(&mut rng, 3, 1);
        let s = TaskSample {
            clean: clean.clone(),
            corrupted: None,
            label: String::new(),
        };
        assert!(attribution_scores(&m, 0, &head, &s, Variant::Patching, 10).is_err());
        let same = TaskSample {
            corrupted: Some(clean.clone()),
            ..s.clone()
        };
        let z = attribution_scores(&m, 0, &head, &same, Variant::Patching, 10).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let affine = MetricHead::Affine {
            v: vec![0.3, -0.2, 0.9],
            offset: 0.0,
        };
        let fwd = TaskSample {
            clean: clean.clone(),
            corrupted: Some(other.clone()),
            label: String::new(),
        };
        let back = TaskSample {
            clean: other,
            corrupted: Some(clean),
            label: String::new(),
        };
        let a = attribution_scores(&m, 0, &affine, &fwd, Variant::Patching, 10).unwrap();
        let b = attribution_scores(&m, 0, &affine, &back, Variant::Patching, 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_orders_by_mean_then_id() {
        let rec = |feature, score| AttributionRecord {
            feature,
            snapshot_step: 0,
            score,
            variant: Variant::Plain,
        };
        let r = vec![rec(2, 1.0), rec(0, 0.0), rec(1, 0.0), rec(2, 3.0), rec(1, 0.0)];
        assert_eq!(rank_features(&r), vec![2, 0, 1]);
        let mut rev = r.clone();
        rev.reverse();
        assert_eq!(rank_features(&rev), vec![2, 0, 1]);
    }

    #[test]
    fn ablating_nothing_recovers_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_model(&mut rng, 6, 3, 2);
        let head = mlp(&mut rng, 3, 4);
        let samples: Vec<TaskSample> = (0..5)
            .map(|_| TaskSample {
                clean: random_rows(&mut rng, 3, 2),
                corrupted: Some(random_rows(&mut rng, 3, 2)),
                label: String::new(),
            })
            .collect();
        let ranked: Vec<usize> = (0..6).collect();
        let r = ablation_experiment(&m, 1, &head, &samples, &ranked, 0, AblationMode::AblateTop).unwrap();
        assert!((r.recovery - 1.0).abs() < 1e-12);
    }

    #[test]
    fn keep_and_ablate_edits_reassemble() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_model(&mut rng, 10, 4, 1);
        let clean = decompose(&m, 0, &random_rows(&mut rng, 4, 1)).unwrap();
        let corr = decompose(&m, 0, &random_rows(&mut rng, 4, 1)).unwrap();
        let top: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        let rest: Vec<bool> = top.iter().map(|t| !t).collect();
        let a = edited_activation(&m, 0, &clean, Some(&corr), &top);
        let b = edited_activation(&m, 0, &clean, Some(&corr), &rest);
        // Each edit keeps the clean eps; the feature deltas of the two edits
        // sum to the full clean-to-corrupted swap.
        let expected = &clean.reconstruction + &corr.reconstruction + &(&clean.error * 2.0);
        for (x, y) in (&a + &b).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
