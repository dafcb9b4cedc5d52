// SPDX-License-Identifier: MIT OR Apache-2.0

//! The cross-snapshot crosscoder.
//!
//! ```text
//! z(x)      = sum_t W_enc[t] a[t](x) + b_enc                 (shared code)
//! f_i[t](x) = z_i(x) * H(z_i(x) * ||W_dec[t][:, i]|| - t_i)  (per-snapshot gate)
//! a_hat[t]  = W_dec[t] f[t](x) + b_dec[t]
//! ```
//!
//! `H(u) = 1` iff `u > 0`. A feature whose decoder column is small at a
//! snapshot needs a larger pre-activation to pass the gate there.
//!
//! Losses are averaged over the batch:
//!
//! ```text
//! recon    = 1/B sum_x sum_t ||a[t](x) - a_hat[t](x)||^2
//! w_i[t]   = 1/B sum_x tanh(f_i[t](x) * ||W_dec[t][:, i]||)
//! sparsity = lambda * sum_t sum_i w_i[t] * (1 + w_i[t] / omega0)
//! ```
//!
//! The forward pass is split into snapshot-block pieces
//! ([`encode_block`], [`decode_snapshot`], [`backward_snapshot`],
//! [`encoder_grad`]) so the training engine can shard snapshots over workers;
//! [`forward`] and [`backward`] compose them for a single worker.

mod backward;
mod checkpoint;
mod eval;
mod gradcheck;
mod sparse;

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use backward::{backward, backward_snapshot, encoder_grad, LossValue, SnapshotGrads};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use eval::{explained_variance, l0_norm, EvalAccumulator, EvalSummary};

/// Hyperparameters entering the loss and its gradient.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Sparsity coefficient (lambda).
    pub lambda: f64,
    /// Frequency scale of the quadratic penalty (omega0).
    pub omega0: f64,
    /// Width of the rectangle pseudo-derivative used for thresholds.
    pub ste_bandwidth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            omega0: 1e-2,
            ste_bandwidth: 1e-3,
        }
    }
}

/// Identifies one parameter array of a crosscoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    EncoderWeight(usize),
    EncoderBias,
    DecoderWeight(usize),
    DecoderBias(usize),
    Threshold,
}

/// Crosscoder parameters.
///
/// Shapes: `w_enc[t]` is `n_features x d_model`, `w_dec[t]` is
/// `d_model x n_features` (column `i` is feature `i`'s decoder direction at
/// snapshot `t`), `b_dec[t]` is `d_model`, `b_enc` and `threshold` are
/// `n_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosscoderModel<T = f32> {
    pub steps: Vec<u64>,
    pub w_enc: Vec<Array2<T>>,
    pub b_enc: Array1<T>,
    pub w_dec: Vec<Array2<T>>,
    pub b_dec: Vec<Array1<T>>,
    pub threshold: Array1<T>,
}

/// Gradients with the same layout as [`CrosscoderModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub w_enc: Vec<Array2<T>>,
    pub b_enc: Array1<T>,
    pub w_dec: Vec<Array2<T>>,
    pub b_dec: Vec<Array1<T>>,
    pub threshold: Array1<T>,
}

impl<T: NdFloat> CrosscoderModel<T> {
    pub fn zeros(n_features: usize, d_model: usize, steps: Vec<u64>) -> Self {
        let n = steps.len();
        Self {
            w_enc: vec![Array2::zeros((n_features, d_model)); n],
            b_enc: Array1::zeros(n_features),
            w_dec: vec![Array2::zeros((d_model, n_features)); n],
            b_dec: vec![Array1::zeros(d_model); n],
            threshold: Array1::zeros(n_features),
            steps,
        }
    }

    /// Random decoder with unit-norm columns (directions uniform on the
    /// sphere), shared by every snapshot; encoders are its transpose, biases
    /// zero and thresholds `threshold`.
    pub fn random_init<R: Rng + ?Sized>(
        n_features: usize,
        d_model: usize,
        steps: Vec<u64>,
        threshold: T,
        rng: &mut R,
    ) -> Self {
        let mut dec = Array2::<T>::zeros((d_model, n_features));
        for mut col in dec.columns_mut() {
            loop {
                for v in col.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *v = T::from(g).unwrap();
                }
                let norm = col.dot(&col).sqrt();
                if norm > T::from(1e-6).unwrap() {
                    col.mapv_inplace(|v| v / norm);
                    break;
                }
            }
        }
        let mut model = Self::zeros(n_features, d_model, steps);
        for t in 0..model.n_snapshots() {
            model.w_dec[t].assign(&dec);
            model.w_enc[t].assign(&dec.t());
        }
        model.threshold.fill(threshold);
        model
    }

    pub fn n_features(&self) -> usize {
        self.b_enc.len()
    }

    pub fn d_model(&self) -> usize {
        self.w_dec.first().map_or(0, |w| w.nrows())
    }

    pub fn n_snapshots(&self) -> usize {
        self.steps.len()
    }

    /// `||W_dec[t][:, i]||` for every feature.
    pub fn decoder_norms(&self, snapshot: usize) -> Array1<T> {
        column_norms(self.w_dec[snapshot].view())
    }

    pub fn decoder_column(&self, snapshot: usize, feature: usize) -> ArrayView1<'_, T> {
        self.w_dec[snapshot].column(feature)
    }

    pub fn is_finite(&self) -> bool {
        self.w_enc.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.w_dec.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.b_dec.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.b_enc.iter().all(|v| v.is_finite())
            && self.threshold.iter().all(|v| v.is_finite())
    }

    pub fn clamp_thresholds(&mut self) {
        self.threshold.mapv_inplace(|t| t.max(T::zero()));
    }

    /// Multiply every decoder by `c` and every encoder by `1/c`.
    pub fn scale_decoders(&mut self, c: T) {
        for w in &mut self.w_dec {
            w.mapv_inplace(|v| v * c);
        }
        for w in &mut self.w_enc {
            w.mapv_inplace(|v| v / c);
        }
    }

    pub fn cast<U: NdFloat>(&self) -> CrosscoderModel<U> {
        let c = |v: &T| U::from(*v).unwrap();
        CrosscoderModel {
            steps: self.steps.clone(),
            w_enc: self.w_enc.iter().map(|m| m.map(c)).collect(),
            b_enc: self.b_enc.map(c),
            w_dec: self.w_dec.iter().map(|m| m.map(c)).collect(),
            b_dec: self.b_dec.iter().map(|m| m.map(c)).collect(),
            threshold: self.threshold.map(c),
        }
    }

    /// Every parameter array as a flat mutable slice, in checkpoint order.
    pub fn blocks_mut(&mut self) -> Vec<(ParamKind, &mut [T])> {
        let mut out = Vec::with_capacity(3 * self.steps.len() + 2);
        for (t, w) in self.w_enc.iter_mut().enumerate() {
            out.push((ParamKind::EncoderWeight(t), w.as_slice_mut().expect("standard layout")));
        }
        out.push((ParamKind::EncoderBias, self.b_enc.as_slice_mut().expect("standard layout")));
        for (t, w) in self.w_dec.iter_mut().enumerate() {
            out.push((ParamKind::DecoderWeight(t), w.as_slice_mut().expect("standard layout")));
        }
        for (t, b) in self.b_dec.iter_mut().enumerate() {
            out.push((ParamKind::DecoderBias(t), b.as_slice_mut().expect("standard layout")));
        }
        out.push((ParamKind::Threshold, self.threshold.as_slice_mut().expect("standard layout")));
        out
    }

    pub(crate) fn check_batch(&self, batch: &[ArrayView2<'_, T>]) -> Result<usize> {
        if batch.len() != self.n_snapshots() {
            return Err(Error::Shape(format!(
                "batch has {} snapshots, model has {}",
                batch.len(),
                self.n_snapshots()
            )));
        }
        let rows = batch.first().map_or(0, |a| a.nrows());
        for (t, a) in batch.iter().enumerate() {
            if a.ncols() != self.d_model() {
                return Err(Error::Shape(format!(
                    "snapshot {t}: rows have width {}, model d_model is {}",
                    a.ncols(),
                    self.d_model()
                )));
            }
            if a.nrows() != rows {
                return Err(Error::Alignment(format!(
                    "snapshot {t} has {} rows, snapshot 0 has {rows}",
                    a.nrows()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("snapshot {t} input")));
            }
        }
        Ok(rows)
    }
}

impl<T: NdFloat> Gradients<T> {
    pub fn zeros_like(model: &CrosscoderModel<T>) -> Self {
        let n = model.n_snapshots();
        let (f, d) = (model.n_features(), model.d_model());
        Self {
            w_enc: vec![Array2::zeros((f, d)); n],
            b_enc: Array1::zeros(f),
            w_dec: vec![Array2::zeros((d, f)); n],
            b_dec: vec![Array1::zeros(d); n],
            threshold: Array1::zeros(f),
        }
    }

    pub fn blocks(&self) -> Vec<(ParamKind, &[T])> {
        let mut out = Vec::with_capacity(3 * self.w_enc.len() + 2);
        for (t, w) in self.w_enc.iter().enumerate() {
            out.push((ParamKind::EncoderWeight(t), w.as_slice().expect("standard layout")));
        }
        out.push((ParamKind::EncoderBias, self.b_enc.as_slice().expect("standard layout")));
        for (t, w) in self.w_dec.iter().enumerate() {
            out.push((ParamKind::DecoderWeight(t), w.as_slice().expect("standard layout")));
        }
        for (t, b) in self.b_dec.iter().enumerate() {
            out.push((ParamKind::DecoderBias(t), b.as_slice().expect("standard layout")));
        }
        out.push((ParamKind::Threshold, self.threshold.as_slice().expect("standard layout")));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(ParamKind, &mut [T])> {
        let mut out = Vec::with_capacity(3 * self.w_enc.len() + 2);
        for (t, w) in self.w_enc.iter_mut().enumerate() {
            out.push((ParamKind::EncoderWeight(t), w.as_slice_mut().expect("standard layout")));
        }
        out.push((ParamKind::EncoderBias, self.b_enc.as_slice_mut().expect("standard layout")));
        for (t, w) in self.w_dec.iter_mut().enumerate() {
            out.push((ParamKind::DecoderWeight(t), w.as_slice_mut().expect("standard layout")));
        }
        for (t, b) in self.b_dec.iter_mut().enumerate() {
            out.push((ParamKind::DecoderBias(t), b.as_slice_mut().expect("standard layout")));
        }
        out.push((ParamKind::Threshold, self.threshold.as_slice_mut().expect("standard layout")));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn column_norms<T: NdFloat>(m: ArrayView2<'_, T>) -> Array1<T> {
    m.map_axis(Axis(0), |col| col.dot(&col).sqrt())
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Gated activations and reconstruction for one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotForward<T> {
    /// `f[t]`, `B x n_features`.
    pub acts: Array2<T>,
    pub gate: Array2<bool>,
    /// `a_hat[t]`, `B x d_model`.
    pub recon: Array2<T>,
}

/// Everything the forward pass produces for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord<T = f32> {
    /// Shared pre-activation, `B x n_features`.
    pub z: Array2<T>,
    pub snapshots: Vec<SnapshotForward<T>>,
}

impl<T: NdFloat> ForwardRecord<T> {
    pub fn n_rows(&self) -> usize {
        self.z.nrows()
    }
}

/// Partial pre-activation `sum_{t in snapshots} a[t] W_enc[t]^T`, without the
/// encoder bias. `batch[t]` must hold snapshot `t`'s rows.
pub fn encode_block<T: NdFloat>(
    model: &CrosscoderModel<T>,
    batch: &[ArrayView2<'_, T>],
    snapshots: Range<usize>,
) -> Array2<T> {
    let rows = batch.first().map_or(0, |a| a.nrows());
    let mut z = Array2::<T>::zeros((rows, model.n_features()));
    for t in snapshots {
        general_mat_mul(T::one(), &batch[t], &model.w_enc[t].t(), T::one(), &mut z);
    }
    z
}

/// Sum partial pre-activations in the given order and add the encoder bias.
pub fn reduce_preactivation<T: NdFloat>(
    model: &CrosscoderModel<T>,
    partials: impl IntoIterator<Item = Array2<T>>,
) -> Array2<T> {
    let mut iter = partials.into_iter();
    let mut z = iter.next().expect("at least one partial pre-activation");
    for p in iter {
        z += &p;
    }
    z += &model.b_enc;
    z
}

/// Gate and decode snapshot `t` from the shared pre-activation `z`.
pub fn decode_snapshot<T: NdFloat>(
    model: &CrosscoderModel<T>,
    t: usize,
    z: ArrayView2<'_, T>,
) -> SnapshotForward<T> {
    let norms = model.decoder_norms(t);
    let mut acts = Array2::<T>::zeros(z.raw_dim());
    let mut gate = Array2::<bool>::from_elem(z.raw_dim(), false);
    let mut nnz = 0usize;
    Zip::from(acts.rows_mut())
        .and(gate.rows_mut())
        .and(z.rows())
        .for_each(|mut f_row, mut g_row, z_row| {
            for i in 0..z_row.len() {
                let zi = z_row[i];
                if zi * norms[i] - model.threshold[i] > T::zero() {
                    f_row[i] = zi;
                    g_row[i] = true;
                    nnz += 1;
                }
            }
        });
    let mut recon = Array2::<T>::zeros((z.nrows(), model.d_model()));
    recon += &model.b_dec[t];
    sparse::acts_times_wt(acts.view(), model.w_dec[t].view(), nnz, &mut recon);
    SnapshotForward { acts, gate, recon }
}

/// Full forward pass on an aligned batch (`batch[t]` holds snapshot `t`).
pub fn forward<T: NdFloat>(
    model: &CrosscoderModel<T>,
    batch: &[ArrayView2<'_, T>],
) -> Result<ForwardRecord<T>> {
    model.check_batch(batch)?;
    let z = reduce_preactivation(model, [encode_block(model, batch, 0..model.n_snapshots())]);
    let snapshots = (0..model.n_snapshots())
        .map(|t| decode_snapshot(model, t, z.view()))
        .collect();
    Ok(ForwardRecord { z, snapshots })
}

/// `1/B sum_x sum_t ||a[t](x) - a_hat[t](x)||^2`.
pub fn reconstruction_loss<T: NdFloat>(record: &ForwardRecord<T>, batch: &[ArrayView2<'_, T>]) -> T {
    let rows = record.n_rows();
    if rows == 0 {
        return T::zero();
    }
    let mut total = T::zero();
    for (snap, a) in record.snapshots.iter().zip(batch) {
        Zip::from(&snap.recon).and(a).for_each(|&r, &x| {
            let d = x - r;
            total += d * d;
        });
    }
    total / T::from(rows).unwrap()
}

/// Per-feature batch frequency estimate `w_i = 1/B sum_x tanh(f_i(x) n_i)`.
pub fn activation_frequency<T: NdFloat>(acts: ArrayView2<'_, T>, norms: ArrayView1<'_, T>) -> Array1<T> {
    let rows = acts.nrows();
    let mut omega = Array1::<T>::zeros(acts.ncols());
    if rows == 0 {
        return omega;
    }
    for row in acts.rows() {
        Zip::from(&mut omega)
            .and(&row)
            .and(&norms)
            .for_each(|w, &f, &n| {
                if f != T::zero() {
                    *w += (f * n).tanh();
                }
            });
    }
    omega.mapv_inplace(|w| w / T::from(rows).unwrap());
    omega
}

/// `lambda sum_t sum_i w_i[t] (1 + w_i[t] / omega0)`.
pub fn sparsity_loss<T: NdFloat>(
    record: &ForwardRecord<T>,
    model: &CrosscoderModel<T>,
    omega0: f64,
    lambda: f64,
) -> T {
    let omega0 = T::from(omega0).unwrap();
    let lambda = T::from(lambda).unwrap();
    let mut total = T::zero();
    for (t, snap) in record.snapshots.iter().enumerate() {
        let norms = model.decoder_norms(t);
        let omega = activation_frequency(snap.acts.view(), norms.view());
        total += omega.iter().fold(T::zero(), |acc, &w| acc + w * (T::one() + w / omega0));
    }
    lambda * total
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_feature_model(z_weight: f64, norm: f64, t: f64) -> CrosscoderModel<f64> {
        let mut m = CrosscoderModel::<f64>::zeros(1, 1, vec![0]);
        m.w_enc[0][[0, 0]] = z_weight;
        m.w_dec[0][[0, 0]] = norm;
        m.threshold[0] = t;
        m
    }

    #[test]
    fn gate_opens_above_threshold() {
        let m = one_feature_model(1.0, 1.0, 0.1);
        let a = array![[0.5f64]];
        let rec = forward(&m, &[a.view()]).unwrap();
        assert_eq!(rec.snapshots[0].acts[[0, 0]], 0.5);
        assert!(rec.snapshots[0].gate[[0, 0]]);
    }

    #[test]
    fn negative_preactivation_closes_gate() {
        for norm in [0.1, 1.0, 10.0] {
            let m = one_feature_model(1.0, norm, 0.1);
            let a = array![[-0.3f64]];
            let rec = forward(&m, &[a.view()]).unwrap();
            assert_eq!(rec.snapshots[0].acts[[0, 0]], 0.0);
        }
    }

    #[test]
    fn zero_model_reconstructs_zero() {
        let m = CrosscoderModel::<f32>::zeros(5, 3, vec![0, 10]);
        let a = array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let rec = forward(&m, &[a.view(), a.view()]).unwrap();
        for s in &rec.snapshots {
            assert!(s.recon.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn reconstruction_loss_hand_value() {
        let m = CrosscoderModel::<f64>::zeros(1, 2, vec![0]);
        let a = array![[3.0f64, 4.0]];
        let rec = forward(&m, &[a.view()]).unwrap();
        assert_eq!(reconstruction_loss(&rec, &[a.view()]), 25.0);
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let mut m = CrosscoderModel::<f64>::zeros(1, 2, vec![0]);
        m.b_dec[0] = array![3.0, 4.0];
        let a = array![[3.0f64, 4.0]];
        let rec = forward(&m, &[a.view()]).unwrap();
        assert_eq!(reconstruction_loss(&rec, &[a.view()]), 0.0);
    }

    #[test]
    fn sparsity_silent_and_saturated() {
        let m = one_feature_model(1.0, 1.0, 0.1);
        let quiet = array![[-1.0f64]];
        let rec = forward(&m, &[quiet.view()]).unwrap();
        assert_eq!(sparsity_loss(&rec, &m, 1.0, 0.7), 0.0);
        let loud = array![[50.0f64]];
        let rec = forward(&m, &[loud.view()]).unwrap();
        let loss = sparsity_loss(&rec, &m, 1.0, 0.7);
        assert!((loss - 0.7 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_and_non_finite_rejected() {
        let m = CrosscoderModel::<f32>::zeros(2, 3, vec![0]);
        let a = array![[1.0f32, 2.0]];
        assert!(matches!(forward(&m, &[a.view()]), Err(Error::Shape(_))));
        let a = array![[1.0f32, f32::INFINITY, 0.0]];
        assert!(matches!(forward(&m, &[a.view()]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn random_init_is_transposed_and_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = CrosscoderModel::<f32>::random_init(7, 5, vec![0, 1, 2], 0.1, &mut rng);
        for t in 0..3 {
            assert_eq!(m.w_enc[t], m.w_dec[t].t());
            assert_eq!(m.w_dec[t], m.w_dec[0]);
        }
        for n in m.decoder_norms(1).iter() {
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert!(m.threshold.iter().all(|&t| t == 0.1));
    }

    #[test]
    fn gate_decisions_invariant_under_norm_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = CrosscoderModel::<f64>::random_init(6, 4, vec![0, 1], 0.05, &mut rng);
        for b in m.b_enc.iter_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
        let a0 = Array2::from_shape_fn((20, 4), |_| rng.random_range(-1.0..1.0));
        let a1 = Array2::from_shape_fn((20, 4), |_| rng.random_range(-1.0..1.0));
        let before = forward(&m, &[a0.view(), a1.view()]).unwrap();
        let (feature, c) = (2usize, 3.5);
        for t in 0..2 {
            m.w_dec[t].column_mut(feature).mapv_inplace(|v| v * c);
            m.w_enc[t].row_mut(feature).mapv_inplace(|v| v / c);
        }
        m.b_enc[feature] /= c;
        let after = forward(&m, &[a0.view(), a1.view()]).unwrap();
        for t in 0..2 {
            assert_eq!(before.snapshots[t].gate, after.snapshots[t].gate);
            for (x, y) in before.snapshots[t].recon.iter().zip(after.snapshots[t].recon.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
