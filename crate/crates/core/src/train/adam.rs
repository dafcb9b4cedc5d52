// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam with bias correction and a separate learning-rate multiplier for the
//! JumpReLU thresholds.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::NdFloat;

use crate::crosscoder::{CrosscoderModel, Gradients, ParamKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub threshold_lr_multiplier: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            threshold_lr_multiplier: 0.1,
        }
    }
}

/// First and second moment estimates plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Gradients<T>,
    pub v: Gradients<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: NdFloat> AdamState<T> {
    pub fn new(model: &CrosscoderModel<T>) -> Self {
        Self {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            t: 0,
        }
    }
}

impl Adam {
    /// Apply one update with learning rate `learning_rate * lr_scale`
    /// (thresholds additionally scaled by `threshold_lr_multiplier`), then
    /// clamp thresholds at zero.
    ///
    /// A gradient containing NaN or infinity is rejected before anything is
    /// modified.
    pub fn step<T: NdFloat>(
        &self,
        model: &mut CrosscoderModel<T>,
        grads: &Gradients<T>,
        state: &mut AdamState<T>,
        lr_scale: f64,
    ) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient rejected".into()));
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from(self.beta1).unwrap(), T::from(self.beta2).unwrap());
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let eps = T::from(self.eps).unwrap();
        let bc1 = T::from(bc1).unwrap();
        let bc2 = T::from(bc2).unwrap();

        let g_blocks = grads.blocks();
        let m_blocks = state.m.blocks_mut();
        let v_blocks = state.v.blocks_mut();
        let p_blocks = model.blocks_mut();
        for (((kind, p), (_, g)), ((_, m), (_, v))) in p_blocks
            .into_iter()
            .zip(g_blocks)
            .zip(m_blocks.into_iter().zip(v_blocks))
        {
            let mut lr = self.learning_rate * lr_scale;
            if kind == ParamKind::Threshold {
                lr *= self.threshold_lr_multiplier;
            }
            let lr = T::from(lr).unwrap();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        model.clamp_thresholds();
        Ok(())
    }
}

const OPT_MAGIC: [u8; 4] = *b"XOPT";
const OPT_VERSION: u32 = 1;

/// Persist optimizer moments next to a checkpoint so training can resume.
/// Layout: magic "XOPT", version u32, training step u64, Adam counter u64,
/// then the first and second moments as f32 in checkpoint parameter order.
pub fn save_optimizer_state(path: &Path, state: &AdamState<f32>, step: u64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&OPT_MAGIC)?;
    write(&OPT_VERSION.to_le_bytes())?;
    write(&step.to_le_bytes())?;
    write(&state.t.to_le_bytes())?;
    for g in [&state.m, &state.v] {
        for (_, block) in g.blocks() {
            for v in block {
                write(&v.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load optimizer state shaped like `model`; returns the state and the
/// training step it was saved at.
pub fn load_optimizer_state(path: &Path, model: &CrosscoderModel<f32>) -> Result<(AdamState<f32>, u64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |e: std::io::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(fmt)?;
    if b4 != OPT_MAGIC {
        return Err(Error::Format(format!("{}: bad optimizer magic", path.display())));
    }
    r.read_exact(&mut b4).map_err(fmt)?;
    if u32::from_le_bytes(b4) != OPT_VERSION {
        return Err(Error::Format(format!("{}: unsupported version", path.display())));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(fmt)?;
    let step = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(fmt)?;
    let mut state = AdamState::new(model);
    state.t = u64::from_le_bytes(b8);
    for g in [&mut state.m, &mut state.v] {
        for (_, block) in g.blocks_mut() {
            for v in block.iter_mut() {
                r.read_exact(&mut b4).map_err(fmt)?;
                *v = f32::from_le_bytes(b4);
            }
        }
    }
    Ok((state, step))
}
