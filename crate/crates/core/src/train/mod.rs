// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loop: initialization, initialization search, learning-rate
//! schedule, Adam and snapshot-sharded workers.
//!
//! Batches are read in file order; step `k` always sees batch
//! `k mod n_batches`, which makes runs reproducible and resumable without
//! persisting any data-loader state.
//!
//! The sparsity scale `omega0` has no published value. The default of `1e-2`
//! is a choice of this crate; treat it as a hyperparameter to tune.

mod adam;
mod parallel;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::Instant;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{load_optimizer_state, save_optimizer_state, Adam, AdamState};
pub use parallel::HeadParallel;

use crate::crosscoder::{
    forward, load_checkpoint, reconstruction_loss, save_checkpoint, sparsity_loss,
    CrosscoderModel, EvalAccumulator, LossConfig, LossValue,
};
use crate::error::{Error, Result};
use crate::store::{read_activation_batches, AlignedBatch, BatchStream, SnapshotManifest};

/// Threshold every feature starts from.
pub const INIT_THRESHOLD: f32 = 0.1;

pub const CHECKPOINT_FILE: &str = "checkpoint.xcck";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda_sparsity: f64,
    pub omega0: f64,
    pub threshold_lr_multiplier: f64,
    pub total_tokens: u64,
    pub warmup_fraction: f64,
    pub decay_fraction: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub n_workers: usize,
    /// Width of the rectangle used as the threshold pseudo-derivative.
    pub ste_bandwidth: f64,
    /// Global decoder-norm scales tried before training.
    pub init_scale_grid: Vec<f64>,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: u64,
    /// Rows, from the start of the data, used for evaluation.
    pub eval_rows: usize,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Steps between progress log lines; 0 disables them.
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 2048,
            lambda_sparsity: 0.3,
            omega0: 1e-2,
            threshold_lr_multiplier: 0.1,
            total_tokens: 800_000_000,
            warmup_fraction: 0.1,
            decay_fraction: 0.2,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            n_workers: 1,
            ste_bandwidth: 1e-3,
            init_scale_grid: (-4..=4).map(|e| 2f64.powi(e)).collect(),
            eval_interval: 1000,
            eval_rows: 8192,
            checkpoint_interval: 0,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda_sparsity >= 0.0 && self.lambda_sparsity.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda_sparsity));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return bad(format!("omega0 must be positive, got {}", self.omega0));
        }
        if !(self.threshold_lr_multiplier > 0.0 && self.threshold_lr_multiplier.is_finite()) {
            return bad("threshold_lr_multiplier must be positive".into());
        }
        if self.total_tokens == 0 {
            return bad("total_tokens must be at least 1".into());
        }
        let (w, d) = (self.warmup_fraction, self.decay_fraction);
        if !(0.0..=1.0).contains(&w) || !(0.0..=1.0).contains(&d) || w + d > 1.0 {
            return bad(format!("warmup {w} and decay {d} fractions must lie in [0, 1] and sum to at most 1"));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("adam betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.n_workers == 0 {
            return bad("n_workers must be at least 1".into());
        }
        if !(self.ste_bandwidth > 0.0) {
            return bad("ste_bandwidth must be positive".into());
        }
        if self.init_scale_grid.is_empty() || self.init_scale_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return bad("init scale grid must be non-empty and positive".into());
        }
        Ok(())
    }

    /// Optimizer steps implied by the token budget.
    pub fn total_steps(&self) -> u64 {
        self.total_tokens.div_ceil(self.batch_size as u64).max(1)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda_sparsity,
            omega0: self.omega0,
            ste_bandwidth: self.ste_bandwidth,
        }
    }

    pub fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
            threshold_lr_multiplier: self.threshold_lr_multiplier,
        }
    }
}

/// Learning-rate multiplier: linear ramp up over the warmup fraction, flat,
/// then linear ramp down to zero over the decay fraction.
pub fn lr_schedule(step_index: u64, total_steps: u64, warmup_fraction: f64, decay_fraction: f64) -> f64 {
    let total = total_steps as f64;
    let s = (step_index as f64).min(total);
    let warm = warmup_fraction * total;
    let decay = decay_fraction * total;
    let m = if warm > 0.0 && s < warm {
        s / warm
    } else if decay > 0.0 && s > total - decay {
        (total - s) / decay
    } else {
        1.0
    };
    m.clamp(0.0, 1.0)
}

/// Fresh model: one random unit-column decoder shared by every snapshot,
/// encoders its transpose, zero biases, thresholds at [`INIT_THRESHOLD`].
pub fn init_model(manifest: &SnapshotManifest, n_features: usize, seed: u64) -> Result<CrosscoderModel<f32>> {
    if n_features == 0 {
        return Err(Error::InvalidInput("n_features must be at least 1".into()));
    }
    if manifest.d_model == 0 || manifest.snapshots.is_empty() {
        return Err(Error::InvalidInput("manifest has no snapshots or zero width".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(CrosscoderModel::random_init(
        n_features,
        manifest.d_model,
        manifest.steps(),
        INIT_THRESHOLD,
        &mut rng,
    ))
}

/// Total loss with every decoder scaled by `c` and every encoder by `1/c`.
pub fn scaled_loss(
    model: &CrosscoderModel<f32>,
    batch: &[ArrayView2<'_, f32>],
    c: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut m = model.clone();
    m.scale_decoders(c as f32);
    let rec = forward(&m, batch)?;
    let r = reconstruction_loss(&rec, batch) as f64;
    let s = sparsity_loss(&rec, &m, cfg.omega0, cfg.lambda) as f64;
    Ok(r + s)
}

/// Pick the global decoder-norm scale with the lowest total loss on
/// `sample_batch`; ties go to the scale closest to 1 (in log space).
/// Returns the rescaled model and the chosen scale.
pub fn init_search(
    model: &CrosscoderModel<f32>,
    sample_batch: &[ArrayView2<'_, f32>],
    scale_grid: &[f64],
    cfg: &LossConfig,
) -> Result<(CrosscoderModel<f32>, f64)> {
    if scale_grid.is_empty() || scale_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::InvalidInput("scale grid must be non-empty and positive".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for &c in scale_grid {
        let loss = scaled_loss(model, sample_batch, c, cfg)?;
        if !loss.is_finite() {
            continue;
        }
        let better = match best {
            None => true,
            Some((bc, bl)) => loss < bl || (loss == bl && c.ln().abs() < bc.ln().abs()),
        };
        if better {
            best = Some((c, loss));
        }
    }
    let (c, _) = best.ok_or_else(|| Error::NonFinite("loss is non-finite at every grid scale".into()))?;
    let mut out = model.clone();
    if c != 1.0 {
        out.scale_decoders(c as f32);
    }
    Ok((out, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub reconstruction: f64,
    pub sparsity: f64,
}

impl StepRecord {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.sparsity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of optimizer steps completed when evaluated.
    pub step: u64,
    pub explained_variance: Vec<f64>,
    pub l0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub n_features: usize,
    pub snapshot_steps: Vec<u64>,
    pub init_scale: f64,
    pub losses: Vec<StepRecord>,
    pub evaluations: Vec<EvalRecord>,
    pub wall_clock_seconds: f64,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Moving average of the total loss over `window` steps; one value per
    /// full window position.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.losses.iter().map(StepRecord::total).collect();
        if window == 0 || totals.len() < window {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(totals.len() - window + 1);
        let mut acc: f64 = totals[..window].iter().sum();
        out.push(acc / window as f64);
        for i in window..totals.len() {
            acc += totals[i] - totals[i - window];
            out.push(acc / window as f64);
        }
        out
    }

    pub fn last_evaluation(&self) -> Option<&EvalRecord> {
        self.evaluations.last()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Stateful trainer; owns the model, optimizer state and data stream.
pub struct Trainer {
    config: TrainConfig,
    adam: Adam,
    loss_cfg: LossConfig,
    parallel: HeadParallel,
    pool: rayon::ThreadPool,
    stream: Arc<BatchStream>,
    eval_batch: AlignedBatch,
    model: CrosscoderModel<f32>,
    state: AdamState<f32>,
    step: u64,
    total_steps: u64,
    report: TrainReport,
    elapsed_before: f64,
    started: Instant,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .field("total_steps", &self.total_steps)
            .field("n_workers", &self.parallel.n_workers())
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Fresh run: [`init_model`] followed by [`init_search`] on the first batch.
    pub fn new(manifest: &SnapshotManifest, config: TrainConfig, n_features: usize) -> Result<Self> {
        config.validate()?;
        let model = init_model(manifest, n_features, config.seed)?;
        let mut trainer = Self::assemble(manifest, config, model, None)?;
        let rows = trainer.stream.total_rows().min(trainer.config.batch_size as u64) as usize;
        let sample = trainer.stream.read_range(0, rows)?;
        let (model, c) = init_search(
            &trainer.model,
            &sample.views(),
            &trainer.config.init_scale_grid,
            &trainer.loss_cfg,
        )?;
        log::info!("initialization search picked decoder scale {c}");
        trainer.model = model;
        trainer.report.init_scale = c;
        Ok(trainer)
    }

    /// Continue a run saved by [`Trainer::save`].
    pub fn resume(manifest: &SnapshotManifest, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let report = TrainReport::load(dir.join(REPORT_FILE))?;
        let model = load_checkpoint(dir.join(CHECKPOINT_FILE))?;
        let (state, step) = load_optimizer_state(&dir.join(OPTIMIZER_FILE), &model)?;
        let config = report.config.clone();
        config.validate()?;
        let mut trainer = Self::assemble(manifest, config, model, Some(report))?;
        trainer.state = state;
        trainer.step = step;
        trainer.report.losses.truncate(step as usize);
        trainer.report.evaluations.retain(|e| e.step <= step);
        Ok(trainer)
    }

    fn assemble(
        manifest: &SnapshotManifest,
        config: TrainConfig,
        model: CrosscoderModel<f32>,
        report: Option<TrainReport>,
    ) -> Result<Self> {
        if model.d_model() != manifest.d_model || model.steps != manifest.steps() {
            return Err(Error::Shape(format!(
                "model (d_model {}, steps {:?}) does not match manifest (d_model {}, steps {:?})",
                model.d_model(),
                model.steps,
                manifest.d_model,
                manifest.steps()
            )));
        }
        let all: Vec<usize> = (0..manifest.n_snapshots()).collect();
        let stream = read_activation_batches(manifest, &all, config.batch_size)?;
        if stream.total_rows() == 0 {
            return Err(Error::InvalidInput("manifest holds no activation rows".into()));
        }
        let eval_n = stream.total_rows().min(config.eval_rows.max(1) as u64) as usize;
        let eval_batch = stream.read_range(0, eval_n)?;
        let parallel = HeadParallel::new(manifest.n_snapshots(), config.n_workers)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.n_workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
        let report = report.unwrap_or_else(|| TrainReport {
            config: config.clone(),
            n_features: model.n_features(),
            snapshot_steps: model.steps.clone(),
            init_scale: 1.0,
            losses: Vec::new(),
            evaluations: Vec::new(),
            wall_clock_seconds: 0.0,
            final_checkpoint: None,
        });
        Ok(Self {
            adam: config.adam(),
            loss_cfg: config.loss_config(),
            total_steps: config.total_steps(),
            state: AdamState::new(&model),
            elapsed_before: report.wall_clock_seconds,
            config,
            parallel,
            pool,
            stream: Arc::new(stream),
            eval_batch,
            model,
            step: 0,
            report,
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &CrosscoderModel<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    /// Optimizer steps completed.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Row range read at optimizer step `step`.
    fn batch_range(&self, step: u64) -> (u64, usize) {
        let b = self.config.batch_size as u64;
        let idx = step % self.stream.n_batches();
        let start = idx * b;
        (start, (self.stream.total_rows() - start).min(b) as usize)
    }

    fn read_step_batch(&self, step: u64) -> Result<AlignedBatch> {
        let (start, count) = self.batch_range(step);
        self.stream.read_range(start, count)
    }

    /// Run one optimizer step and return its loss.
    pub fn step(&mut self) -> Result<LossValue> {
        let batch = self.read_step_batch(self.step)?;
        self.apply(&batch)
    }

    fn apply(&mut self, batch: &AlignedBatch) -> Result<LossValue> {
        let views = batch.views();
        self.model.check_batch(&views)?;
        let (loss, grads) = {
            let (parallel, model, cfg) = (&self.parallel, &self.model, &self.loss_cfg);
            self.pool.install(|| parallel.loss_and_grads(model, &views, cfg))
        };
        if !loss.total().is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                last_checkpoint: None,
            });
        }
        let scale = lr_schedule(
            self.step,
            self.total_steps,
            self.config.warmup_fraction,
            self.config.decay_fraction,
        );
        match self.adam.step(&mut self.model, &grads, &mut self.state, scale) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => {
                return Err(Error::Divergence {
                    step: self.step,
                    last_checkpoint: None,
                })
            }
            Err(e) => return Err(e),
        }
        self.report.losses.push(StepRecord {
            step: self.step,
            reconstruction: loss.reconstruction,
            sparsity: loss.sparsity,
        });
        self.step += 1;
        if self.config.log_interval > 0 && self.step % self.config.log_interval == 0 {
            log::info!(
                "step {}/{}: recon {:.5} sparsity {:.5} lr x{:.3}",
                self.step,
                self.total_steps,
                loss.reconstruction,
                loss.sparsity,
                scale
            );
        }
        if self.config.eval_interval > 0 && self.step % self.config.eval_interval == 0 {
            self.evaluate()?;
        }
        Ok(loss)
    }

    /// Per-snapshot EV and L0 on the evaluation rows, appended to the report.
    pub fn evaluate(&mut self) -> Result<EvalRecord> {
        let mut acc = EvalAccumulator::new(self.model.n_snapshots(), self.model.d_model());
        let rows = self.eval_batch.n_rows();
        let chunk = self.config.batch_size.max(1);
        let mut start = 0;
        while start < rows {
            let end = (start + chunk).min(rows);
            let views: Vec<ArrayView2<'_, f32>> = self
                .eval_batch
                .snapshots
                .iter()
                .map(|a| a.slice(ndarray::s![start..end, ..]))
                .collect();
            let rec = forward(&self.model, &views)?;
            acc.add(&rec, &views);
            start = end;
        }
        let summary = acc.finish()?;
        let record = EvalRecord {
            step: self.step,
            explained_variance: summary.explained_variance,
            l0: summary.l0,
        };
        log::info!(
            "eval at step {}: EV {:?} L0 {:?}",
            record.step,
            record.explained_variance,
            record.l0
        );
        self.report.evaluations.retain(|e| e.step != record.step);
        self.report.evaluations.push(record.clone());
        Ok(record)
    }

    /// Run up to `n` more steps, with a reader thread prefetching batches.
    /// Returns the number of steps taken.
    pub fn run_steps(&mut self, n: u64) -> Result<u64> {
        let first = self.step;
        let last = (first + n).min(self.total_steps);
        if last <= first {
            return Ok(0);
        }
        let ranges: Vec<(u64, usize)> = (first..last).map(|s| self.batch_range(s)).collect();
        let (tx, rx) = sync_channel::<Result<AlignedBatch>>(2);
        std::thread::scope(|scope| {
            let stream = Arc::clone(&self.stream);
            scope.spawn(move || {
                for (start, count) in ranges {
                    if tx.send(stream.read_range(start, count)).is_err() {
                        break;
                    }
                }
            });
            let mut taken = 0;
            for batch in rx {
                // Dropping the receiver on error stops the reader thread.
                self.apply(&batch?)?;
                taken += 1;
            }
            Ok(taken)
        })
    }

    /// Write checkpoint, optimizer moments and report into `dir`.
    pub fn save(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&ckpt, &self.model)?;
        save_optimizer_state(&dir.join(OPTIMIZER_FILE), &self.state, self.step)?;
        self.report.wall_clock_seconds = self.elapsed_before + self.started.elapsed().as_secs_f64();
        self.report.final_checkpoint = Some(ckpt.clone());
        self.report.save(dir.join(REPORT_FILE))?;
        Ok(ckpt)
    }

    /// Train to the end of the token budget, checkpointing into `out_dir`.
    ///
    /// On divergence the last good model (the one before the failing step)
    /// is written to `out_dir` and its path returned inside the error.
    pub fn run(mut self, out_dir: impl AsRef<Path>) -> Result<TrainReport> {
        let out_dir = out_dir.as_ref();
        let chunk = match self.config.checkpoint_interval {
            0 => self.total_steps,
            k => k,
        };
        while !self.is_finished() {
            match self.run_steps(chunk) {
                Ok(_) => {
                    if !self.is_finished() {
                        self.save(out_dir)?;
                    }
                }
                Err(Error::Divergence { step, .. }) => {
                    let path = self.save(out_dir)?;
                    log::error!("non-finite loss at step {step}; saved last good model to {}", path.display());
                    return Err(Error::Divergence {
                        step,
                        last_checkpoint: Some(path),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        if self.report.evaluations.last().map(|e| e.step) != Some(self.step) {
            self.evaluate()?;
        }
        self.save(out_dir)?;
        Ok(self.report)
    }
}

/// Train a fresh crosscoder on `manifest` and write results into `out_dir`.
pub fn train(
    manifest: &SnapshotManifest,
    config: TrainConfig,
    n_features: usize,
    out_dir: impl AsRef<Path>,
) -> Result<TrainReport> {
    Trainer::new(manifest, config, n_features)?.run(out_dir)
}
