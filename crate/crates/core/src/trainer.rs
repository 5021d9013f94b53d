//! SGD training loops with the staged learning-rate schedule, checkpointing
//! and divergence detection.
//!
//! The learning rate is `lr0 * decay^floor(epoch / decay_every)`. Batches are
//! drawn by a per-epoch ChaCha shuffle of the example indices, so identical
//! seeds and data give identical final checkpoints in single-threaded runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nets::{predict_probs_batched, ClsModel, HairNet, SegModel};
use crate::nn::loss::{bce_dice_with_logits, bce_with_logits, dice_score, softmax_cross_entropy};
use crate::nn::{export_tensors, import_tensors, sgd_step, zero_grads, VisitBn};
use crate::preprocess;
use crate::scalar::{derive_seed, Scalar};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Pixel BCE plus soft dice (segmentation).
    BceDice,
    /// Categorical cross-entropy (classification).
    CrossEntropy,
    /// Binary cross-entropy (stroke classifier).
    Bce,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: u32,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub loss: LossKind,
    /// Keep the epoch with the best dev metric instead of the final one.
    pub select_best_dev: bool,
}

impl TrainConfig {
    fn base(epochs: u32, loss: LossKind) -> Self {
        TrainConfig {
            lr0: 0.001,
            decay: 0.9,
            decay_every: 10,
            epochs,
            batch_size: 16,
            seed: 0,
            momentum: 0.0,
            loss,
            select_best_dev: false,
        }
    }

    pub fn seg_defaults() -> Self {
        Self::base(100, LossKind::BceDice)
    }

    pub fn cls_defaults() -> Self {
        Self::base(50, LossKind::CrossEntropy)
    }

    pub fn hair_defaults() -> Self {
        Self::base(30, LossKind::Bce)
    }

    fn validate(&self, expected_loss: LossKind) -> Result<()> {
        if self.loss != expected_loss {
            return Err(Error::Config(format!(
                "loss {:?} does not match this training loop ({expected_loss:?})",
                self.loss
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `lr0 * decay^floor(epoch / decay_every)`.
pub fn lr_schedule(config: &TrainConfig, epoch: u32) -> f64 {
    config.lr0 * config.decay.powi((epoch / config.decay_every) as i32)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
    pub dev_metric: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochStats>,
    pub checkpoint: PathBuf,
    pub early_stopped: bool,
}

impl RunRecord {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// In-memory classification dataset.
pub struct ClsData<F> {
    pub images: Array4<F>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

/// In-memory segmentation dataset; masks are `(N, 1, H, W)` in {0, 1}.
pub struct SegData<F> {
    pub images: Array4<F>,
    pub masks: Array4<F>,
}

/// In-memory stroke-classification dataset.
pub struct HairData<F> {
    pub images: Array4<F>,
    pub labels: Vec<bool>,
}

pub fn load_cls_data<F: Scalar>(manifest: &DatasetManifest) -> Result<ClsData<F>> {
    let mut images = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    let mut ids = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let label = rec
            .label
            .ok_or_else(|| Error::UnlabeledRecord(rec.id.clone()))?;
        images.push(manifest.load_pixels(rec)?);
        labels.push(label.index());
        ids.push(rec.id.clone());
    }
    Ok(ClsData {
        images: crate::raster::batch_input(&images)?,
        labels,
        ids,
    })
}

pub fn load_seg_data<F: Scalar>(manifest: &DatasetManifest) -> Result<SegData<F>> {
    let mut images = Vec::with_capacity(manifest.len());
    let mut masks = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let mask = manifest
            .load_mask(rec)?
            .ok_or_else(|| Error::MissingMask { id: rec.id.clone() })?;
        let img = manifest.load_pixels(rec)?;
        let (h, w, _) = img.dim();
        if mask.dim() != (h, w) {
            return Err(Error::MaskDimMismatch {
                id: rec.id.clone(),
                img_h: h,
                img_w: w,
                mask_h: mask.dim().0,
                mask_w: mask.dim().1,
            });
        }
        images.push(img);
        masks.push(mask);
    }
    let image_tensor = crate::raster::batch_input(&images)?;
    let (n, _, h, w) = image_tensor.dim();
    let mut mask_tensor = Array4::<F>::zeros((n, 1, h, w));
    for (i, mask) in masks.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if mask[(y, x)] {
                    mask_tensor[(i, 0, y, x)] = F::one();
                }
            }
        }
    }
    Ok(SegData {
        images: image_tensor,
        masks: mask_tensor,
    })
}

/// Loads stroke-flagged records, resizing to the classifier input side.
pub fn load_hair_data<F: Scalar>(manifest: &DatasetManifest, side: usize) -> Result<HairData<F>> {
    let mut images = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let hairy = rec
            .hairy
            .ok_or_else(|| Error::MissingHairFlag(rec.id.clone()))?;
        let img = manifest.load_pixels(rec)?;
        let (h, w, _) = img.dim();
        let sized = if (h, w) == (side, side) {
            img
        } else {
            preprocess::resize(&preprocess::pad_to_square(&img)?, side)?
        };
        images.push(sized);
        labels.push(hairy);
    }
    Ok(HairData {
        images: crate::raster::batch_input(&images)?,
        labels,
    })
}

fn epoch_order(seed: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "epoch", u64::from(epoch)));
    order.shuffle(&mut rng);
    order
}

fn gather<F: Scalar>(images: &Array4<F>, idx: &[usize]) -> Array4<F> {
    images.select(Axis(0), idx)
}

/// Re-estimate batch-norm running statistics with one exact pass over the
/// training images. Small models can otherwise end training with running
/// buffers far from the batch statistics the weights were fitted under,
/// collapsing eval-mode predictions.
fn calibrate_bn<F: Scalar, M: VisitBn<F>>(
    model: &mut M,
    images: &Array4<F>,
    batch: usize,
    mut forward: impl FnMut(&mut M, &Array4<F>),
) {
    let n = images.dim().0;
    if n == 0 {
        return;
    }
    model.visit_bn(&mut |bn| bn.start_stat_accumulation());
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        forward(model, &gather(images, &idx));
        start = end;
    }
    model.visit_bn(&mut |bn| bn.finish_stat_accumulation());
}

/// Segmentation dice on a dataset, eval mode, batched.
pub fn seg_dice<F: Scalar>(model: &mut SegModel<F>, data: &SegData<F>, batch: usize) -> f64 {
    let n = data.images.dim().0;
    if n == 0 {
        return 1.0;
    }
    let mut num = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let probs = model.predict_probs(&gather(&data.images, &idx));
        let masks = gather(&data.masks, &idx);
        num += dice_score(&probs, &masks, 0.5) * idx.len() as f64;
        start = end;
    }
    num / n as f64
}

/// Classifier balanced accuracy on a dataset, eval mode.
pub fn cls_balanced_accuracy<F: Scalar>(
    model: &mut ClsModel<F>,
    data: &ClsData<F>,
    batch: usize,
) -> Result<f64> {
    let probs = predict_probs_batched(model, &data.images, batch);
    let preds: Vec<usize> = probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, F::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect();
    let cm = metrics::confusion(&data.labels, &preds, model.n_classes())?;
    Ok(metrics::class_metrics::<f64>(&cm)?.balanced_accuracy)
}

pub fn cls_accuracy<F: Scalar>(
    model: &mut ClsModel<F>,
    data: &ClsData<F>,
    batch: usize,
) -> Result<f64> {
    let probs = predict_probs_batched(model, &data.images, batch);
    let correct = probs
        .rows()
        .into_iter()
        .zip(&data.labels)
        .filter(|(row, &t)| {
            let pred = row
                .iter()
                .enumerate()
                .fold((0usize, F::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0;
            pred == t
        })
        .count();
    Ok(correct as f64 / data.labels.len().max(1) as f64)
}

/// Stroke classifier accuracy at a score threshold.
pub fn hair_accuracy<F: Scalar>(model: &mut HairNet<F>, data: &HairData<F>, threshold: f64) -> f64 {
    let scores = model.scores(&data.images);
    let correct = scores
        .iter()
        .zip(&data.labels)
        .filter(|(&s, &t)| (s.to_f64().unwrap() >= threshold) == t)
        .count();
    correct as f64 / data.labels.len().max(1) as f64
}

/// Train the segmentation model; saves the checkpoint to `ckpt_path`.
pub fn train_seg<F: Scalar>(
    model: &mut SegModel<F>,
    data: &SegData<F>,
    dev: Option<&SegData<F>>,
    config: &TrainConfig,
    ckpt_path: &Path,
) -> Result<RunRecord> {
    config.validate(LossKind::BceDice)?;
    let n = data.images.dim().0;
    let mut stats = Vec::new();
    let mut best: Option<(
        f64,
        std::collections::BTreeMap<String, ndarray::ArrayD<f64>>,
    )> = None;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = F::from(lr_schedule(config, epoch)).unwrap();
        let momentum = F::from(config.momentum).unwrap();
        let mut epoch_loss = 0.0;
        let order = epoch_order(config.seed, epoch, n);
        for chunk in order.chunks(config.batch_size) {
            let x = gather(&data.images, chunk);
            let y = gather(&data.masks, chunk);
            zero_grads(model);
            let logits = model.forward_logits(&x, true);
            let (loss, grad) = bce_dice_with_logits(&logits, &y);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            model.backward(&grad);
            sgd_step(model, lr, momentum);
            epoch_loss += loss * chunk.len() as f64;
        }
        let loss = epoch_loss / n.max(1) as f64;
        let dev_metric = dev.map(|d| seg_dice(model, d, config.batch_size));
        if config.select_best_dev {
            if let Some(metric) = dev_metric {
                if best.as_ref().map(|(b, _)| metric > *b).unwrap_or(true) {
                    best = Some((metric, export_tensors(model)));
                }
            }
        }
        stats.push(EpochStats {
            epoch,
            lr: lr_schedule(config, epoch),
            loss,
            dev_metric,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    if let Some((_, snapshot)) = best {
        import_tensors(model, &snapshot)?;
    }
    if config.epochs > 0 {
        calibrate_bn(model, &data.images, config.batch_size, |m, x| {
            m.forward_logits(x, true);
        });
    }
    checkpoint::save_seg(ckpt_path, model, config.seed, config.epochs)?;
    Ok(RunRecord {
        epochs: stats,
        checkpoint: ckpt_path.to_path_buf(),
        early_stopped: false,
    })
}

/// Train a classifier; dev metric is balanced accuracy.
pub fn train_cls<F: Scalar>(
    model: &mut ClsModel<F>,
    data: &ClsData<F>,
    dev: Option<&ClsData<F>>,
    config: &TrainConfig,
    ckpt_path: &Path,
) -> Result<RunRecord> {
    config.validate(LossKind::CrossEntropy)?;
    let n = data.images.dim().0;
    let mut stats = Vec::new();
    let mut best: Option<(
        f64,
        std::collections::BTreeMap<String, ndarray::ArrayD<f64>>,
    )> = None;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = F::from(lr_schedule(config, epoch)).unwrap();
        let momentum = F::from(config.momentum).unwrap();
        let mut epoch_loss = 0.0;
        let order = epoch_order(config.seed, epoch, n);
        for chunk in order.chunks(config.batch_size) {
            let x = gather(&data.images, chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            zero_grads(model);
            let logits = model.forward_logits(&x, true);
            let (loss, grad) = softmax_cross_entropy(&logits, &targets);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            model.backward(&grad);
            sgd_step(model, lr, momentum);
            epoch_loss += loss * chunk.len() as f64;
        }
        let loss = epoch_loss / n.max(1) as f64;
        let dev_metric = match dev {
            Some(d) if !d.labels.is_empty() => {
                Some(cls_balanced_accuracy(model, d, config.batch_size)?)
            }
            _ => None,
        };
        if config.select_best_dev {
            if let Some(metric) = dev_metric {
                if best.as_ref().map(|(b, _)| metric > *b).unwrap_or(true) {
                    best = Some((metric, export_tensors(model)));
                }
            }
        }
        stats.push(EpochStats {
            epoch,
            lr: lr_schedule(config, epoch),
            loss,
            dev_metric,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    if let Some((_, snapshot)) = best {
        import_tensors(model, &snapshot)?;
    }
    if config.epochs > 0 {
        calibrate_bn(model, &data.images, config.batch_size, |m, x| {
            m.forward_logits(x, true);
        });
    }
    checkpoint::save_cls(ckpt_path, model, config.seed, config.epochs)?;
    Ok(RunRecord {
        epochs: stats,
        checkpoint: ckpt_path.to_path_buf(),
        early_stopped: false,
    })
}

/// Train the stroke classifier with binary labels.
pub fn train_hair<F: Scalar>(
    model: &mut HairNet<F>,
    data: &HairData<F>,
    dev: Option<&HairData<F>>,
    config: &TrainConfig,
    ckpt_path: &Path,
) -> Result<RunRecord> {
    config.validate(LossKind::Bce)?;
    let n = data.images.dim().0;
    let mut stats = Vec::new();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = F::from(lr_schedule(config, epoch)).unwrap();
        let momentum = F::from(config.momentum).unwrap();
        let mut epoch_loss = 0.0;
        let order = epoch_order(config.seed, epoch, n);
        for chunk in order.chunks(config.batch_size) {
            let x = gather(&data.images, chunk);
            let targets: Vec<bool> = chunk.iter().map(|&i| data.labels[i]).collect();
            zero_grads(model);
            let logits: Array1<F> = model.forward_logits(&x, true);
            let (loss, grad) = bce_with_logits(&logits, &targets);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            model.backward(&grad);
            sgd_step(model, lr, momentum);
            epoch_loss += loss * chunk.len() as f64;
        }
        let loss = epoch_loss / n.max(1) as f64;
        let dev_metric = dev.map(|d| hair_accuracy(model, d, 0.5));
        stats.push(EpochStats {
            epoch,
            lr: lr_schedule(config, epoch),
            loss,
            dev_metric,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    if config.epochs > 0 {
        calibrate_bn(model, &data.images, config.batch_size, |m, x| {
            m.forward_logits(x, true);
        });
    }
    model.mark_trained(config.epochs);
    checkpoint::save_hair(ckpt_path, model, config.seed)?;
    Ok(RunRecord {
        epochs: stats,
        checkpoint: ckpt_path.to_path_buf(),
        early_stopped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::EncoderSpec;

    #[test]
    fn lr_schedule_reference_values() {
        let cfg = TrainConfig::seg_defaults();
        assert_eq!(lr_schedule(&cfg, 0), 0.001);
        assert!((lr_schedule(&cfg, 10) - 0.0009).abs() < 1e-15);
        assert!((lr_schedule(&cfg, 25) - 0.00081).abs() < 1e-15);
        // Piecewise constant within windows, ratio decay between windows.
        for e in 0..10 {
            assert_eq!(lr_schedule(&cfg, e), lr_schedule(&cfg, 0));
        }
        for w in 0..5u32 {
            let a = lr_schedule(&cfg, w * 10);
            let b = lr_schedule(&cfg, (w + 1) * 10);
            assert!((b / a - 0.9).abs() < 1e-12);
        }
        let mut flat = cfg.clone();
        flat.decay = 1.0;
        assert_eq!(lr_schedule(&flat, 12345), 0.001);
    }

    fn tiny_seg_data(n: usize, side: usize) -> SegData<f64> {
        let images = Array4::from_shape_fn((n, 3, side, side), |(i, c, y, x)| {
            ((i * 7 + c * 3 + y + x) % 13) as f64 / 13.0
        });
        let masks = Array4::from_shape_fn((n, 1, side, side), |(i, _, y, x)| {
            let cy = y as i64 - (side / 2) as i64;
            let cx = x as i64 - (side / 2) as i64;
            f64::from(u8::from(
                cy * cy + cx * cx < ((side * side) as i64) / 16 + i as i64,
            ))
        });
        SegData { images, masks }
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec::desk();
        let mut model = SegModel::<f64>::build(&spec, 9).unwrap();
        let before = export_tensors(&mut model);
        let mut cfg = TrainConfig::seg_defaults();
        cfg.epochs = 0;
        let ckpt = dir.path().join("seg.ckpt");
        let record = train_seg(&mut model, &tiny_seg_data(2, 64), None, &cfg, &ckpt).unwrap();
        assert!(record.epochs.is_empty());
        assert_eq!(export_tensors(&mut model), before);
        let (mut loaded, _) = checkpoint::load_seg::<f64>(&ckpt).unwrap();
        assert_eq!(export_tensors(&mut loaded), before);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec::desk();
        let mut model = SegModel::<f64>::build(&spec, 9).unwrap();
        let before = export_tensors(&mut model);
        let mut cfg = TrainConfig::seg_defaults();
        cfg.epochs = 2;
        cfg.lr0 = 0.0;
        cfg.batch_size = 2;
        let ckpt = dir.path().join("seg.ckpt");
        train_seg(&mut model, &tiny_seg_data(2, 64), None, &cfg, &ckpt).unwrap();
        // Trainable parameters unchanged; only batch-norm buffers move.
        let after = export_tensors(&mut model);
        for (name, value) in &before {
            if name.contains("running_") {
                continue;
            }
            assert_eq!(after[name], *value, "parameter {name} changed at lr 0");
        }
    }

    #[test]
    fn one_small_step_decreases_single_example_loss() {
        let spec = EncoderSpec::desk();
        let data = tiny_seg_data(1, 64);
        for seed in [1u64, 2, 3] {
            let mut model = SegModel::<f64>::build(&spec, seed).unwrap();
            zero_grads(&mut model);
            let logits = model.forward_logits(&data.images, true);
            let (loss0, grad) = bce_dice_with_logits(&logits, &data.masks);
            model.backward(&grad);
            sgd_step(&mut model, 1e-5, 0.0);
            let logits1 = model.forward_logits(&data.images, true);
            let (loss1, _) = bce_dice_with_logits(&logits1, &data.masks);
            assert!(
                loss1 <= loss0 + 1e-7,
                "seed {seed}: loss went from {loss0} to {loss1}"
            );
        }
    }

    #[test]
    fn gradient_direction_agrees_with_finite_difference() {
        // Directional derivative of the loss along the computed gradient must
        // be positive (the gradient points uphill).
        let spec = EncoderSpec::desk();
        let data = tiny_seg_data(1, 64);
        let mut model = SegModel::<f64>::build(&spec, 11).unwrap();
        zero_grads(&mut model);
        let logits = model.forward_logits(&data.images, true);
        let (_, grad) = bce_dice_with_logits(&logits, &data.masks);
        model.backward(&grad);

        let loss_of = |m: &mut SegModel<f64>| {
            let logits = m.forward_logits(&data.images, true);
            bce_dice_with_logits(&logits, &data.masks).0
        };
        // Step along +grad and -grad by eps; loss must increase/decrease.
        let eps = 1e-6;
        let mut plus = model.clone();
        sgd_step(&mut plus, -eps, 0.0); // -lr*g with lr=-eps moves along +g
        let mut minus = model.clone();
        sgd_step(&mut minus, eps, 0.0);
        let l0 = loss_of(&mut model.clone());
        let lp = loss_of(&mut plus);
        let lm = loss_of(&mut minus);
        assert!(
            lp > l0,
            "loss along +gradient did not increase: {lp} vs {l0}"
        );
        assert!(
            lm < l0,
            "loss along -gradient did not decrease: {lm} vs {l0}"
        );
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec::desk();
        let data = tiny_seg_data(4, 64);
        let mut cfg = TrainConfig::seg_defaults();
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.seed = 77;
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut m1 = SegModel::<f64>::build(&spec, 5).unwrap();
        let mut m2 = SegModel::<f64>::build(&spec, 5).unwrap();
        train_seg(&mut m1, &data, None, &cfg, &p1).unwrap();
        train_seg(&mut m2, &data, None, &cfg, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn hair_threshold_monotonicity() {
        let mut model = HairNet::<f32>::build(32, 3).unwrap();
        model.mark_trained(1);
        let images = Array4::from_shape_fn((12, 3, 32, 32), |(n, c, y, x)| {
            ((n * 13 + c * 5 + y * 3 + x) % 29) as f32 / 29.0
        });
        let scores = model.scores(&images);
        let mut prev = usize::MAX;
        for threshold in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let hairy = scores
                .iter()
                .filter(|&&s| f64::from(s) >= threshold)
                .count();
            assert!(hairy <= prev, "hairy count increased with threshold");
            prev = hairy;
        }
        // Threshold 0 marks everything hairy.
        assert_eq!(scores.iter().filter(|&&s| f64::from(s) >= 0.0).count(), 12);
    }

    #[test]
    fn one_class_data_is_memorized() {
        let dir = tempfile::tempdir().unwrap();
        let images = Array4::from_shape_fn((10, 3, 32, 32), |(n, c, y, x)| {
            ((n * 7 + c * 3 + y + x) % 11) as f32 / 11.0
        });
        let data = HairData {
            images,
            labels: vec![true; 10],
        };
        let mut cfg = TrainConfig::hair_defaults();
        cfg.epochs = 15;
        cfg.lr0 = 0.02;
        cfg.momentum = 0.9;
        let mut model = crate::nets::HairNet::<f32>::build(32, 8).unwrap();
        train_hair(&mut model, &data, None, &cfg, &dir.path().join("h.ckpt")).unwrap();
        assert_eq!(hair_accuracy(&mut model, &data, 0.5), 1.0);
    }

    #[test]
    fn loss_config_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = SegModel::<f64>::build(&EncoderSpec::desk(), 1).unwrap();
        let cfg = TrainConfig::cls_defaults();
        let err = train_seg(
            &mut model,
            &tiny_seg_data(1, 64),
            None,
            &cfg,
            &dir.path().join("x.ckpt"),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
