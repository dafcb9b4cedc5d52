// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic gradients of `recon + sparsity`.
//!
//! Straight-through rules:
//!
//! - the gate `H(z_i n_i - t_i)` is a constant with respect to both `z_i`
//!   and `n_i`, so `df_i/dz_i = H`;
//! - thresholds use a rectangle pseudo-derivative of width `eps`:
//!   `df_i/dt_i = -z_i / eps * 1[|z_i n_i - t_i| < eps / 2]`;
//! - the decoder norms inside the sparsity term are ordinary functions of
//!   `W_dec` and receive gradients.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat, Zip};

use super::sparse::{count_nonzero, is_sparse, sparse_t_times_dense};
use super::{
    activation_frequency, decode_snapshot, encode_block, reduce_preactivation, CrosscoderModel,
    Gradients, LossConfig, SnapshotForward,
};
use crate::error::Result;

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossValue {
    pub reconstruction: f64,
    pub sparsity: f64,
}

impl LossValue {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.sparsity
    }
}

/// Gradient pieces owned by the worker that decodes snapshot `t`.
#[derive(Debug, Clone)]
pub struct SnapshotGrads<T> {
    pub w_dec: Array2<T>,
    pub b_dec: Array1<T>,
    /// Contribution of this snapshot to `dL/dz`, `B x n_features`.
    pub z: Array2<T>,
    pub threshold: Array1<T>,
    pub loss: LossValue,
}

/// Loss and gradients for snapshot `t` given the shared pre-activation.
pub fn backward_snapshot<T: NdFloat>(
    model: &CrosscoderModel<T>,
    t: usize,
    z: ArrayView2<'_, T>,
    a: ArrayView2<'_, T>,
    fwd: &SnapshotForward<T>,
    cfg: &LossConfig,
) -> SnapshotGrads<T> {
    let rows = z.nrows();
    let n_features = model.n_features();
    let d_model = model.d_model();
    let zero = T::zero();
    let one = T::one();
    if rows == 0 {
        return SnapshotGrads {
            w_dec: Array2::zeros((d_model, n_features)),
            b_dec: Array1::zeros(d_model),
            z: Array2::zeros((0, n_features)),
            threshold: Array1::zeros(n_features),
            loss: LossValue::default(),
        };
    }
    let inv_b = one / T::from(rows).unwrap();
    let two = T::from(2.0).unwrap();

    // Reconstruction term.
    let mut d_recon = &fwd.recon - &a;
    let recon_loss = d_recon.iter().fold(zero, |acc, &r| acc + r * r) * inv_b;
    d_recon.mapv_inplace(|r| r * two * inv_b);

    let nnz = fwd.gate.iter().filter(|&&g| g).count();
    let mut d_w_dec = sparse_t_times_dense(fwd.acts.view(), d_recon.view(), nnz)
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    let d_b_dec = d_recon.sum_axis(Axis(0));

    let eps = T::from(cfg.ste_bandwidth).unwrap();
    let half = eps / two;
    let norms = model.decoder_norms(t);
    // dL/df is only consumed where the gate is open or inside the threshold
    // band, so the sparse path computes just those entries.
    let mut d_acts = Array2::<T>::zeros((rows, n_features));
    if is_sparse(nnz, rows, n_features) {
        let wt = model.w_dec[t].t().as_standard_layout().into_owned();
        Zip::from(d_acts.rows_mut())
            .and(fwd.gate.rows())
            .and(z.rows())
            .and(d_recon.rows())
            .for_each(|mut g_row, gate_row, z_row, r_row| {
                for i in 0..n_features {
                    if gate_row[i] || (z_row[i] * norms[i] - model.threshold[i]).abs() < half {
                        g_row[i] = r_row.dot(&wt.row(i));
                    }
                }
            });
    } else {
        general_mat_mul(one, &d_recon, &model.w_dec[t], zero, &mut d_acts);
    }

    // Sparsity term.
    let lambda = T::from(cfg.lambda).unwrap();
    let omega0 = T::from(cfg.omega0).unwrap();
    let omega = activation_frequency(fwd.acts.view(), norms.view());
    let sparsity_loss = lambda
        * omega
            .iter()
            .fold(zero, |acc, &w| acc + w * (one + w / omega0));
    // dL/dw_i scaled by 1/B, the derivative of the batch mean.
    let coef: Array1<T> = omega.mapv(|w| lambda * (one + two * w / omega0) * inv_b);
    let mut d_norm = Array1::<T>::zeros(n_features);
    Zip::from(d_acts.rows_mut())
        .and(fwd.acts.rows())
        .for_each(|mut g_row, f_row| {
            for i in 0..n_features {
                let f = f_row[i];
                if f == zero {
                    g_row[i] += coef[i] * norms[i];
                    continue;
                }
                let th = (f * norms[i]).tanh();
                let sech2 = one - th * th;
                g_row[i] += coef[i] * sech2 * norms[i];
                d_norm[i] += coef[i] * sech2 * f;
            }
        });
    for i in 0..n_features {
        if norms[i] > zero && d_norm[i] != zero {
            let scale = d_norm[i] / norms[i];
            let col = model.w_dec[t].column(i);
            d_w_dec
                .column_mut(i)
                .zip_mut_with(&col, |g, &w| *g += scale * w);
        }
    }

    // Through the gate: to z where open, to the threshold inside the band.
    let mut d_t = Array1::<T>::zeros(n_features);
    let mut d_z = d_acts;
    Zip::from(d_z.rows_mut())
        .and(fwd.gate.rows())
        .and(z.rows())
        .for_each(|mut g_row, gate_row, z_row| {
            for i in 0..n_features {
                let zi = z_row[i];
                let arg = zi * norms[i] - model.threshold[i];
                if arg.abs() < half {
                    d_t[i] += g_row[i] * (-zi / eps);
                }
                if !gate_row[i] {
                    g_row[i] = zero;
                }
            }
        });

    SnapshotGrads {
        w_dec: d_w_dec,
        b_dec: d_b_dec,
        z: d_z,
        threshold: d_t,
        loss: LossValue {
            reconstruction: recon_loss.to_f64().unwrap(),
            sparsity: sparsity_loss.to_f64().unwrap(),
        },
    }
}

/// `dL/dW_enc[t] = dz^T a[t]`.
pub fn encoder_grad<T: NdFloat>(d_z: ArrayView2<'_, T>, a: ArrayView2<'_, T>) -> Array2<T> {
    sparse_t_times_dense(d_z, a, count_nonzero(d_z))
}

/// Loss and gradients for every parameter, single worker.
pub fn backward<T: NdFloat>(
    model: &CrosscoderModel<T>,
    batch: &[ArrayView2<'_, T>],
    cfg: &LossConfig,
) -> Result<(LossValue, Gradients<T>)> {
    model.check_batch(batch)?;
    let n = model.n_snapshots();
    let z = reduce_preactivation(model, [encode_block(model, batch, 0..n)]);
    let mut grads = Gradients::zeros_like(model);
    let mut loss = LossValue::default();
    let mut d_z = Array2::<T>::zeros(z.raw_dim());
    for t in 0..n {
        let fwd = decode_snapshot(model, t, z.view());
        let g = backward_snapshot(model, t, z.view(), batch[t], &fwd, cfg);
        grads.w_dec[t] = g.w_dec;
        grads.b_dec[t] = g.b_dec;
        grads.threshold += &g.threshold;
        d_z += &g.z;
        loss.reconstruction += g.loss.reconstruction;
        loss.sparsity += g.loss.sparsity;
    }
    grads.b_enc = d_z.sum_axis(Axis(0));
    for t in 0..n {
        grads.w_enc[t] = encoder_grad(d_z.view(), batch[t]);
    }
    Ok((loss, grads))
}
