// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference check of [`backward`] in double precision.
//!
//! Thresholds are skipped: their gradient is a pseudo-derivative with no
//! finite-difference counterpart. A parameter is also skipped when a
//! `+-h` perturbation flips any gate, since the loss is not differentiable
//! there.

use ndarray::ArrayView2;

use super::{backward, forward, reconstruction_loss, sparsity_loss, CrosscoderModel, LossConfig, ParamKind};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_boundary: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` among
    /// entries whose absolute difference exceeds `abs_floor`.
    pub max_rel_error: f64,
    pub worst: Option<(ParamKind, usize)>,
}

fn total_loss(model: &CrosscoderModel<f64>, batch: &[ArrayView2<'_, f64>], cfg: &LossConfig) -> Result<(f64, Vec<bool>)> {
    let rec = forward(model, batch)?;
    let loss = reconstruction_loss(&rec, batch) + sparsity_loss(&rec, model, cfg.omega0, cfg.lambda);
    let gates = rec.snapshots.iter().flat_map(|s| s.gate.iter().copied()).collect();
    Ok((loss, gates))
}

/// Compare analytic gradients with central differences of step `h`.
/// Differences below `abs_floor` count as exact.
pub fn gradient_check(
    model: &CrosscoderModel<f64>,
    batch: &[ArrayView2<'_, f64>],
    cfg: &LossConfig,
    h: f64,
    abs_floor: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(model, batch, cfg)?;
    let (_, base_gates) = total_loss(model, batch, cfg)?;
    let analytic: Vec<(ParamKind, Vec<f64>)> = grads.blocks().into_iter().map(|(k, s)| (k, s.to_vec())).collect();
    let mut report = GradCheckReport {
        checked: 0,
        skipped_boundary: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = model.clone();
    for (b, (kind, values)) in analytic.iter().enumerate() {
        if *kind == ParamKind::Threshold {
            continue;
        }
        for (j, &g) in values.iter().enumerate() {
            let orig = probe.blocks_mut()[b].1[j];
            probe.blocks_mut()[b].1[j] = orig + h;
            let (lp, gp) = total_loss(&probe, batch, cfg)?;
            probe.blocks_mut()[b].1[j] = orig - h;
            let (lm, gm) = total_loss(&probe, batch, cfg)?;
            probe.blocks_mut()[b].1[j] = orig;
            if gp != base_gates || gm != base_gates {
                report.skipped_boundary += 1;
                continue;
            }
            report.checked += 1;
            let numeric = (lp - lm) / (2.0 * h);
            let diff = (g - numeric).abs();
            if diff <= abs_floor {
                continue;
            }
            let rel = diff / g.abs().max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((*kind, j));
            }
        }
    }
    Ok(report)
}
