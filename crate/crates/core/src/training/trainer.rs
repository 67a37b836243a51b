use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ctx, Model};
use crate::par;
use crate::tensor::Tensor;
use crate::training::loss::{loss_from_matches, match_layers, ImageTargets, LossBreakdown, LossWeights};
use crate::training::optim::{Adam, AdamConfig};

/// One training image `(1, 3, H, W)` with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub targets: ImageTargets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Images per step; at or above the dataset size every step sees all images.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    /// Drives batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

/// One row of the loss log, recorded before that iteration's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iter,cls,l1,giou,total";

/// CSV text of a loss log. Floats use shortest round-trip formatting.
pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.cls, r.l1, r.giou, r.total);
    }
    s
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    std::fs::write(path, loss_csv(log)).map_err(|e| Error::io(path, e))
}

/// Loss and parameter gradients of one batch, reduced in image order.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: LossBreakdown,
    pub grads: Vec<Tensor>,
}

/// Forward and backward over `batch`, one tape per image.
///
/// Every image's loss is divided by the box count of the whole batch, so the
/// sum over images equals the loss of the batch evaluated at once.
pub fn batch_gradient(model: &Model, batch: &[&Sample], weights: &LossWeights) -> Result<BatchGradient> {
    let norm = batch.iter().map(|s| s.targets.len()).sum::<usize>().max(1) as f64;
    let depth = model.num_layers();
    let per_image = par::map(batch, |s| -> Result<(LossBreakdown, Vec<Tensor>)> {
        s.targets.validate(model.config.classes)?;
        let mut ctx = Ctx::new(&model.params, true);
        let x = ctx.g.constant(s.image.clone());
        let out = model.forward(&mut ctx, x, depth)?;
        if let Some(at) = ctx.g.first_non_finite() {
            return Err(Error::NonFinite(format!("forward pass; first non-finite: {at}")));
        }
        let targets = std::slice::from_ref(&s.targets);
        let matches = match_layers(&ctx.g, &out.layers, targets, weights)?;
        let (loss, breakdown) = loss_from_matches(&mut ctx.g, &out.layers, targets, &matches, weights, norm)?;
        if !breakdown.is_finite() {
            let at = ctx.g.first_non_finite().unwrap_or_else(|| "the loss".into());
            return Err(Error::NonFinite(format!("loss is {}; first non-finite: {at}", breakdown.total)));
        }
        ctx.g.backward(loss)?;
        if let Some(at) = ctx.g.first_non_finite() {
            return Err(Error::NonFinite(format!("first non-finite: {at}")));
        }
        Ok((breakdown, ctx.param_grads()))
    });
    let mut loss = LossBreakdown::default();
    let mut grads: Option<Vec<Tensor>> = None;
    for r in per_image {
        let (b, g) = r?;
        loss.accumulate(&b);
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let grads = grads.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    Ok(BatchGradient { loss, grads })
}

/// Trains `model` in place and returns the per-iteration loss log.
///
/// `on_iter` sees every record as it is produced.
pub fn train(
    model: &mut Model,
    data: &[Sample],
    config: &TrainConfig,
    mut on_iter: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = Adam::new(config.optimizer, &model.params);
    let mut log = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let batch: Vec<&Sample> = if config.batch_size >= data.len() {
            data.iter().collect()
        } else {
            (0..config.batch_size)
                .map(|_| {
                    if order.is_empty() {
                        order = (0..data.len()).collect();
                        order.shuffle(&mut rng);
                    }
                    &data[order.pop().expect("refilled")]
                })
                .collect()
        };
        let bg = batch_gradient(model, &batch, &config.loss)
            .map_err(|e| annotate(e, iter))?;
        let rec = LossRecord {
            iter,
            cls: bg.loss.cls,
            l1: bg.loss.l1,
            giou: bg.loss.giou,
            total: bg.loss.total,
        };
        on_iter(&rec);
        log.push(rec);
        opt.step(&mut model.params, &bg.grads).map_err(|e| annotate(e, iter))?;
    }
    Ok(log)
}

fn annotate(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("iteration {iter}: {m}")),
        other => other,
    }
}
