//! Mini-batch SGD training of [`CpnModel`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cpn_tensor::{CosineSchedule, Element, Graph, Sgd, Tensor};

use crate::error::{invalid, CoreError, Result};
use crate::model::{CpnModel, Phase};
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 16,
            lr_max: 1e-2,
            lr_min: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(invalid("need at least one epoch and batches of two or more"));
        }
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0) {
            return Err(invalid("learning rates must satisfy 0 ≤ lr_min ≤ lr_max"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_epochs: self.epochs,
        }
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub descriptor_loss: f64,
    pub block_loss: f64,
}

/// Shuffled batches covering `0..n`. A trailing batch of one sample would
/// make batch statistics degenerate, so it joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Rows `idx` of a tensor whose first axis is the batch.
pub fn gather_rows<T: Element>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let n = t.shape()[0];
    let row = t.numel() / n.max(1);
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return Err(CoreError::ShapeMismatch(format!("row {i} of {n}")));
        }
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::new(shape, data)?)
}

/// Trains `model` in place and returns one log entry per epoch.
pub fn train<T: Element>(
    model: &mut CpnModel<T>,
    rois: &[&Raster],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    train_with(model, rois, labels, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Element>(
    model: &mut CpnModel<T>,
    rois: &[&Raster],
    labels: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if rois.len() != labels.len() {
        return Err(invalid(format!("{} ROIs but {} labels", rois.len(), labels.len())));
    }
    if rois.len() < 2 {
        return Err(invalid("need at least two training samples"));
    }
    let classes = model.config().n_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::Model(format!("label {bad} outside the {classes} configured classes")));
    }
    // The Gabor layer is frozen, so its responses are computed once.
    let f1_all = model.gabor_features(&model.prepare(rois)?)?;
    let schedule = cfg.schedule();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch as f64);
        let batches = epoch_batches(rois.len(), cfg.batch_size, cfg.seed.wrapping_add(epoch as u64));
        let (mut total, mut desc, mut block) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let f1 = g.constant(gather_rows(&f1_all, idx)?);
            let fwd = model.forward_from_gabor(&mut g, f1, Phase::Train)?;
            let losses = model.losses(&mut g, &fwd, &batch_labels)?;
            let value = g.value(losses.total).item().as_f64();
            if !value.is_finite() {
                return Err(CoreError::Model(format!("loss became {value} in epoch {epoch}")));
            }
            let w = idx.len() as f64;
            total += value * w;
            desc += g.value(losses.descriptor).item().as_f64() * w;
            if let Some(b) = losses.block {
                block += g.value(b).item().as_f64() * w;
            }
            g.backward(losses.total)?;
            let grads = g.param_gradients();
            sgd.step(model.params_mut(), &grads, lr);
        }
        let n = rois.len() as f64;
        let log = EpochLog {
            epoch,
            lr,
            loss: total / n,
            descriptor_loss: desc / n,
            block_loss: block / n,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.5} loss {:.4} (descriptor {:.4}, block {:.4})",
            log.loss,
            log.descriptor_loss,
            log.block_loss
        );
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Writes `epoch,lr,loss,descriptor_loss,block_loss` rows.
pub fn write_loss_csv(path: impl AsRef<std::path::Path>, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}
