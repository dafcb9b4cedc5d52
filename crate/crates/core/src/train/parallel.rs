// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head parallelism: snapshots are split into equal contiguous blocks, one
//! per worker.
//!
//! A step runs in three phases separated by reductions:
//!
//! 1. every worker encodes its block into a partial pre-activation; the
//!    partials are summed in worker order (all-reduce) and `b_enc` added;
//! 2. every worker gates, decodes and differentiates its own snapshots,
//!    producing decoder gradients and a partial `dL/dz`;
//! 3. the partial `dL/dz` are summed in worker order and every worker forms
//!    its encoder gradients.
//!
//! Reductions always run in worker order, so results are bit-identical for a
//! fixed worker count.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};
use rayon::prelude::*;

use crate::crosscoder::{
    backward_snapshot, decode_snapshot, encode_block, encoder_grad, reduce_preactivation,
    CrosscoderModel, Gradients, LossConfig, LossValue,
};
use crate::error::{Error, Result};

/// Partition of snapshots over workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParallel {
    blocks: Vec<Range<usize>>,
}

impl HeadParallel {
    /// `n_workers` must divide `n_snapshots`.
    pub fn new(n_snapshots: usize, n_workers: usize) -> Result<Self> {
        if n_workers == 0 || n_snapshots == 0 || n_snapshots % n_workers != 0 {
            return Err(Error::InvalidInput(format!(
                "{n_workers} workers cannot evenly split {n_snapshots} snapshots"
            )));
        }
        let per = n_snapshots / n_workers;
        Ok(Self {
            blocks: (0..n_workers).map(|w| w * per..(w + 1) * per).collect(),
        })
    }

    pub fn n_workers(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    /// Loss and full gradients for one aligned batch.
    pub fn loss_and_grads<T: NdFloat>(
        &self,
        model: &CrosscoderModel<T>,
        batch: &[ArrayView2<'_, T>],
        cfg: &LossConfig,
    ) -> (LossValue, Gradients<T>) {
        // Phase 1: partial pre-activations, reduced in worker order.
        let partials: Vec<Array2<T>> = self
            .blocks
            .par_iter()
            .map(|r| encode_block(model, batch, r.clone()))
            .collect();
        let z = reduce_preactivation(model, partials);

        // Phase 2: decode and differentiate owned snapshots.
        struct BlockOut<T> {
            w_dec: Vec<Array2<T>>,
            b_dec: Vec<Array1<T>>,
            d_z: Array2<T>,
            d_t: Array1<T>,
            loss: LossValue,
        }
        let outs: Vec<BlockOut<T>> = self
            .blocks
            .par_iter()
            .map(|r| {
                let mut out = BlockOut {
                    w_dec: Vec::with_capacity(r.len()),
                    b_dec: Vec::with_capacity(r.len()),
                    d_z: Array2::zeros(z.raw_dim()),
                    d_t: Array1::zeros(model.n_features()),
                    loss: LossValue::default(),
                };
                for t in r.clone() {
                    let fwd = decode_snapshot(model, t, z.view());
                    let g = backward_snapshot(model, t, z.view(), batch[t], &fwd, cfg);
                    out.w_dec.push(g.w_dec);
                    out.b_dec.push(g.b_dec);
                    out.d_z += &g.z;
                    out.d_t += &g.threshold;
                    out.loss.reconstruction += g.loss.reconstruction;
                    out.loss.sparsity += g.loss.sparsity;
                }
                out
            })
            .collect();

        let mut grads = Gradients::zeros_like(model);
        let mut loss = LossValue::default();
        let mut d_z = Array2::<T>::zeros(z.raw_dim());
        for (r, out) in self.blocks.iter().zip(outs) {
            for (k, t) in r.clone().enumerate() {
                grads.w_dec[t] = out.w_dec[k].clone();
                grads.b_dec[t] = out.b_dec[k].clone();
            }
            d_z += &out.d_z;
            grads.threshold += &out.d_t;
            loss.reconstruction += out.loss.reconstruction;
            loss.sparsity += out.loss.sparsity;
        }
        grads.b_enc = d_z.sum_axis(Axis(0));

        // Phase 3: encoder gradients per owned snapshot.
        let enc: Vec<Vec<Array2<T>>> = self
            .blocks
            .par_iter()
            .map(|r| r.clone().map(|t| encoder_grad(d_z.view(), batch[t])).collect())
            .collect();
        for (r, gs) in self.blocks.iter().zip(enc) {
            for (t, g) in r.clone().zip(gs) {
                grads.w_enc[t] = g;
            }
        }
        (loss, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosscoder::backward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_uneven_split() {
        assert!(HeadParallel::new(5, 2).is_err());
        assert!(HeadParallel::new(4, 0).is_err());
        assert_eq!(HeadParallel::new(6, 3).unwrap().blocks()[1], 2..4);
    }

    #[test]
    fn sharded_gradients_match_single_worker() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = CrosscoderModel::<f64>::random_init(12, 6, vec![0, 1, 2, 3], 0.05, &mut rng);
        let batch: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_fn((9, 6), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let views: Vec<_> = batch.iter().map(|b| b.view()).collect();
        let cfg = LossConfig::default();
        let (l1, g1) = backward(&m, &views, &cfg).unwrap();
        for workers in [1, 2, 4] {
            let hp = HeadParallel::new(4, workers).unwrap();
            let (l, g) = hp.loss_and_grads(&m, &views, &cfg);
            assert!((l.total() - l1.total()).abs() < 1e-12);
            for ((_, a), (_, b)) in g.blocks().into_iter().zip(g1.blocks()) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
