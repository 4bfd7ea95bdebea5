//! Deterministic Adam training loop and batch prediction.
//!
//! Each epoch shuffles the frames with a seed derived from `(seed, epoch)`,
//! then walks mini-batches. Per-frame forward/backward passes run in parallel;
//! their gradients are summed in frame order before the Adam step, so results
//! do not depend on the thread count.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DataError, KeypointPrediction, Keypoints2D, SequenceDataset};
use crate::keyhead::{
    backward, forward, frame_input, save_checkpoint, EncoderModel, KeyheadError, ModelConfig,
    RasterMapping,
};
use crate::losses::{pose_adaptive_loss, scale_schedule, LossConfig, LossError};
use crate::synth::RasterImage;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] KeyheadError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("failed to write {path}: {message}")]
    Output { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Architecture used when no checkpoint is supplied.
    pub model: ModelConfig,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Write the checkpoint every k epochs as well as at the end; 0 = end only.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-5,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            model: ModelConfig::default(),
            checkpoint_path: None,
            log_path: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {}", self.learning_rate));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam parameters out of range".into());
        }
        self.loss.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-frame loss over the epoch.
    pub loss: f64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub log: Vec<EpochLog>,
}

/// Adam moments stored flat, in `for_each_param` order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

pub fn flatten_params(model: &EncoderModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.num_params());
    model.for_each_param(|_, p| out.extend_from_slice(p));
    out
}

impl Adam {
    pub fn new(model: &EncoderModel, config: AdamConfig) -> Self {
        let n = model.num_params();
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, model: &mut EncoderModel, grad: &EncoderModel, lr: f64) {
        let g = flatten_params(grad);
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        model.for_each_param_mut(|_, p| {
            for w in p.iter_mut() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + c.eps);
                i += 1;
            }
        });
    }
}

/// Rendered model input with its raster-space target.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub image: RasterImage,
    pub target: Keypoints2D,
    pub mapping: RasterMapping,
}

pub fn prepare_frames(
    dataset: &SequenceDataset,
    config: &ModelConfig,
) -> Result<Vec<PreparedFrame>, TrainError> {
    dataset
        .records
        .par_iter()
        .map(|r| {
            let (image, target, mapping) = frame_input(r, config)?;
            Ok(PreparedFrame {
                image,
                target,
                mapping,
            })
        })
        .collect()
}

/// Seed of the shuffling rng for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    order
}

/// Loss and parameter gradient for one frame at epoch `t`.
fn frame_gradient(
    frame: &PreparedFrame,
    model: &EncoderModel,
    t: f64,
    loss: &LossConfig,
) -> Result<(f64, EncoderModel), TrainError> {
    let trace = forward(&frame.image, model)?;
    let value = pose_adaptive_loss(&frame.target, &trace.keypoints(), t, loss)?;
    let grad = backward(&trace, model, &value.grad)?;
    Ok((value.loss, grad))
}

/// Mean loss over `frames` at epoch `t`, without updating anything.
pub fn dataset_loss(
    frames: &[PreparedFrame],
    model: &EncoderModel,
    t: f64,
    loss: &LossConfig,
) -> Result<f64, TrainError> {
    let values: Result<Vec<f64>, TrainError> = frames
        .par_iter()
        .map(|f| {
            let trace = forward(&f.image, model)?;
            Ok(pose_adaptive_loss(&f.target, &trace.keypoints(), t, loss)?.loss)
        })
        .collect();
    Ok(values?.iter().sum::<f64>() / frames.len() as f64)
}

pub fn train(
    dataset: &SequenceDataset,
    model: EncoderModel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let frames = prepare_frames(dataset, &model.config)?;
    train_frames(&frames, model, cfg, |_, _| {})
}

/// Training on pre-rendered frames. `on_epoch` sees every log row together
/// with the parameters at the end of that epoch.
pub fn train_frames(
    frames: &[PreparedFrame],
    mut model: EncoderModel,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &EncoderModel),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut adam = Adam::new(&model, cfg.adam);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t = epoch as f64;
        let order = epoch_order(frames.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let results: Result<Vec<(f64, EncoderModel)>, TrainError> = idx
                .par_iter()
                .map(|&i| frame_gradient(&frames[i], &model, t, &cfg.loss))
                .collect();
            let results = results.map_err(|e| match e {
                TrainError::Model(KeyheadError::NonFinite { .. })
                | TrainError::Loss(LossError::NonFinite) => TrainError::NonFinite { epoch, batch },
                other => other,
            })?;
            let mut iter = results.into_iter();
            let (first_loss, mut grad) = iter.next().expect("non-empty batch");
            let mut batch_loss = first_loss;
            for (l, g) in iter {
                batch_loss += l;
                grad.add_assign(&g);
            }
            grad.scale(1.0 / idx.len() as f64);
            if !batch_loss.is_finite() || !grad.all_finite() {
                return Err(TrainError::NonFinite { epoch, batch });
            }
            loss_sum += batch_loss;
            adam.update(&mut model, &grad, cfg.learning_rate);
            if !model.all_finite() {
                return Err(TrainError::NonFinite { epoch, batch });
            }
        }
        let row = EpochLog {
            epoch,
            loss: loss_sum / frames.len() as f64,
            scale: scale_schedule(t, &cfg.loss),
        };
        on_epoch(&row, &model);
        log.push(row);
        if let Some(path) = &cfg.checkpoint_path {
            let periodic = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if periodic || epoch + 1 == cfg.epochs {
                save_checkpoint(&model, path)?;
            }
        }
    }
    if let Some(path) = &cfg.log_path {
        write_log_csv(&log, path)?;
    }
    Ok(TrainOutcome { model, log })
}

/// `epoch,loss,scale` CSV.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}

pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, log_csv(log)).map_err(|e| TrainError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Predicted keypoints for every record, in image pixels and dataset order.
pub fn predict(
    dataset: &SequenceDataset,
    model: &EncoderModel,
) -> Result<Vec<KeypointPrediction>, TrainError> {
    dataset
        .records
        .par_iter()
        .map(|r| {
            let (image, _, mapping) = frame_input(r, &model.config)?;
            let trace = forward(&image, model)?;
            let kp = mapping.to_image(&trace.keypoints());
            Ok(KeypointPrediction::new(&r.sequence_id, r.frame_id, &kp))
        })
        .collect()
}
