// SPDX-License-Identifier: MIT OR Apache-2.0

//! Explained variance and L0 over evaluation batches.

use ndarray::{Array1, ArrayView2, NdFloat};
use serde::{Deserialize, Serialize};

use super::{forward, CrosscoderModel, ForwardRecord};
use crate::error::{Error, Result};

/// Mean over rows of the number of features with `f_i[t] > 0`, per snapshot.
pub fn l0_norm<T: NdFloat>(record: &ForwardRecord<T>) -> Vec<f64> {
    let rows = record.n_rows();
    record
        .snapshots
        .iter()
        .map(|s| {
            if rows == 0 {
                return 0.0;
            }
            let active = s.acts.iter().filter(|&&f| f > T::zero()).count();
            active as f64 / rows as f64
        })
        .collect()
}

/// Streaming accumulator for per-snapshot EV and L0.
#[derive(Debug, Clone)]
pub struct EvalAccumulator {
    rows: u64,
    sse: Vec<f64>,
    sum: Vec<Array1<f64>>,
    sum_sq: Vec<f64>,
    active: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: u64,
    pub explained_variance: Vec<f64>,
    pub l0: Vec<f64>,
}

impl EvalSummary {
    pub fn mean_explained_variance(&self) -> f64 {
        self.explained_variance.iter().sum::<f64>() / self.explained_variance.len().max(1) as f64
    }

    pub fn mean_l0(&self) -> f64 {
        self.l0.iter().sum::<f64>() / self.l0.len().max(1) as f64
    }
}

impl EvalAccumulator {
    pub fn new(n_snapshots: usize, d_model: usize) -> Self {
        Self {
            rows: 0,
            sse: vec![0.0; n_snapshots],
            sum: vec![Array1::zeros(d_model); n_snapshots],
            sum_sq: vec![0.0; n_snapshots],
            active: vec![0; n_snapshots],
        }
    }

    pub fn add<T: NdFloat>(&mut self, record: &ForwardRecord<T>, batch: &[ArrayView2<'_, T>]) {
        self.rows += record.n_rows() as u64;
        for (t, (snap, a)) in record.snapshots.iter().zip(batch).enumerate() {
            for (row_a, row_r) in a.rows().into_iter().zip(snap.recon.rows()) {
                let mut sse = 0.0;
                let mut sq = 0.0;
                for (j, (&x, &r)) in row_a.iter().zip(row_r.iter()).enumerate() {
                    let x = x.to_f64().unwrap();
                    let d = x - r.to_f64().unwrap();
                    sse += d * d;
                    sq += x * x;
                    self.sum[t][j] += x;
                }
                self.sse[t] += sse;
                self.sum_sq[t] += sq;
            }
            self.active[t] += snap.acts.iter().filter(|&&f| f > T::zero()).count() as u64;
        }
    }

    pub fn finish(&self) -> Result<EvalSummary> {
        if self.rows < 2 {
            return Err(Error::InvalidInput(
                "explained variance needs at least 2 rows".into(),
            ));
        }
        let n = self.rows as f64;
        let mut ev = Vec::with_capacity(self.sse.len());
        for t in 0..self.sse.len() {
            let mean_sq = self.sum[t].dot(&self.sum[t]) / n;
            let total = self.sum_sq[t] - mean_sq;
            if total <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "snapshot {t}: activations have zero variance"
                )));
            }
            ev.push(1.0 - self.sse[t] / total);
        }
        Ok(EvalSummary {
            rows: self.rows,
            explained_variance: ev,
            l0: self.active.iter().map(|&a| a as f64 / n).collect(),
        })
    }
}

/// `1 - sum ||a - a_hat||^2 / sum ||a - mean(a)||^2` at one snapshot.
///
/// `batches` yields aligned batches holding every model snapshot.
pub fn explained_variance<T, I, B>(model: &CrosscoderModel<T>, batches: I, snapshot: usize) -> Result<f64>
where
    T: NdFloat,
    I: IntoIterator<Item = B>,
    B: AsRef<[ndarray::Array2<T>]>,
{
    if snapshot >= model.n_snapshots() {
        return Err(Error::InvalidInput(format!("snapshot {snapshot} out of range")));
    }
    let mut acc = EvalAccumulator::new(model.n_snapshots(), model.d_model());
    for b in batches {
        let views: Vec<_> = b.as_ref().iter().map(|m| m.view()).collect();
        let rec = forward(model, &views)?;
        acc.add(&rec, &views);
    }
    Ok(acc.finish()?.explained_variance[snapshot])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn perfect_and_mean_predictors() {
        let a = array![[1.0f64, 2.0], [3.0, 0.0], [-1.0, 1.0]];
        // Zero model: a_hat = b_dec; with b_dec = mean, EV = 0.
        let mut m = CrosscoderModel::<f64>::zeros(1, 2, vec![0]);
        m.b_dec[0] = array![1.0, 1.0];
        let ev = explained_variance(&m, [vec![a.clone()]], 0).unwrap();
        assert!(ev.abs() < 1e-12);
        // Identity through two features with thresholds at zero.
        let mut m = CrosscoderModel::<f64>::zeros(4, 2, vec![0]);
        m.w_enc[0] = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        m.w_dec[0] = array![[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]];
        let ev = explained_variance(&m, [vec![a.clone()]], 0).unwrap();
        assert!((ev - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_and_too_few_rows() {
        let m = CrosscoderModel::<f64>::zeros(1, 2, vec![0]);
        let flat = Array2::from_elem((4, 2), 3.0);
        assert!(matches!(
            explained_variance(&m, [vec![flat]], 0),
            Err(Error::Degenerate(_))
        ));
        let one = array![[1.0, 2.0]];
        assert!(explained_variance(&m, [vec![one]], 0).is_err());
    }

    #[test]
    fn l0_counts() {
        let mut m = CrosscoderModel::<f64>::zeros(5, 3, vec![0]);
        for i in 0..3 {
            m.w_enc[0][[i, i]] = 1.0;
            m.w_dec[0][[i, i]] = 1.0;
        }
        let a = array![[1.0, 1.0, 1.0], [2.0, 3.0, 4.0]];
        let rec = forward(&m, &[a.view()]).unwrap();
        assert_eq!(l0_norm(&rec), vec![3.0]);
        let rec = forward(&m, &[(-a).view()]).unwrap();
        assert_eq!(l0_norm(&rec), vec![0.0]);
    }
}
