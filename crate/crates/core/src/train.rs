//! Loss, augmentation, batching, the epoch loop and threshold selection.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use smag_tensor::{Graph, NormMode, Real, Tensor, Var};

use crate::data::{normalize_scene, Dataset, NormStats, Scene, MSI_BANDS, SAR_BANDS};
use crate::encoder::INPUT_MULTIPLE;
use crate::error::{config, Error, Result};
use crate::eval::predict;
use crate::model::{Inputs, Model, ModelConfig, Prediction};
use crate::optim::Adam;
use crate::params::Ctx;
use crate::rng::{named_seed, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the SAR-path term; the fused term gets `1 − w`.
    pub loss_weight: f64,
    /// Square random-crop size; `None` trains on whole scenes.
    pub crop: Option<usize>,
    pub hflip: bool,
    pub vflip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 60,
            loss_weight: 0.5,
            crop: None,
            hflip: true,
            vflip: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.loss_weight) {
            return Err(config(format!("loss weight {} must lie in [0, 1]", self.loss_weight)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config("batch_size and epochs must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config("weight_decay must be finite and non-negative"));
        }
        if let Some(c) = self.crop {
            if c == 0 || c % INPUT_MULTIPLE != 0 {
                return Err(config(format!("crop size {c} must be a positive multiple of {INPUT_MULTIPLE}")));
            }
        }
        Ok(())
    }

    /// Seed of the parameter initialization stream.
    pub fn init_seed(&self) -> u64 {
        named_seed(self.seed, "init")
    }
}

/// Loss nodes of one batch. Single-head models report their one loss in
/// all three slots.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub sar: Var,
    pub fused: Var,
}

/// `w · BCE(sar) + (1 − w) · BCE(fused)`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, pred: &Prediction, label: &Tensor<T>, w: f64) -> Result<LossTerms> {
    if !(0.0..=1.0).contains(&w) {
        return Err(config(format!("loss weight {w} must lie in [0, 1]")));
    }
    let fused = g.bce_with_logits(pred.primary, label)?;
    let Some(sar_logits) = pred.sar else {
        return Ok(LossTerms {
            total: fused,
            sar: fused,
            fused,
        });
    };
    let sar = g.bce_with_logits(sar_logits, label)?;
    let a = g.affine(sar, w, 0.0);
    let b = g.affine(fused, 1.0 - w, 0.0);
    let total = g.add(a, b)?;
    Ok(LossTerms { total, sar, fused })
}

/// One realization of the augmentation: crop window and flip decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub y0: usize,
    pub x0: usize,
    pub size: Option<usize>,
    pub hflip: bool,
    pub vflip: bool,
}

pub fn draw_augment(rng: &mut impl Rng, h: usize, w: usize, cfg: &TrainConfig) -> Result<AugmentDraw> {
    let (y0, x0) = match cfg.crop {
        Some(c) if c > h || c > w => {
            return Err(config(format!("crop size {c} exceeds scene extents {h}x{w}")));
        }
        Some(c) if c == 0 || c % INPUT_MULTIPLE != 0 => {
            return Err(config(format!("crop size {c} must be a positive multiple of {INPUT_MULTIPLE}")));
        }
        Some(c) => (rng.random_range(0..=h - c), rng.random_range(0..=w - c)),
        None => (0, 0),
    };
    Ok(AugmentDraw {
        y0,
        x0,
        size: cfg.crop,
        hflip: cfg.hflip && rng.random::<bool>(),
        vflip: cfg.vflip && rng.random::<bool>(),
    })
}

/// Crops then flips every raster of `scene` identically.
pub fn apply_augment(scene: &Scene, d: &AugmentDraw) -> Scene {
    let (h, w) = (scene.height(), scene.width());
    let (ch, cw) = d.size.map_or((h, w), |c| (c, c));
    let src_index = |y: usize, x: usize| {
        let sy = if d.vflip { ch - 1 - y } else { y };
        let sx = if d.hflip { cw - 1 - x } else { x };
        (d.y0 + sy) * w + d.x0 + sx
    };
    let remap_planes = |data: &[f32], bands: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(bands * ch * cw);
        for b in 0..bands {
            let plane = &data[b * h * w..(b + 1) * h * w];
            for y in 0..ch {
                for x in 0..cw {
                    out.push(plane[src_index(y, x)]);
                }
            }
        }
        out
    };
    let remap_mask = |data: &[u8]| -> Vec<u8> {
        (0..ch)
            .flat_map(|y| (0..cw).map(move |x| (y, x)))
            .map(|(y, x)| data[src_index(y, x)])
            .collect()
    };
    Scene {
        id: scene.id.clone(),
        sar: Tensor::new(vec![SAR_BANDS, ch, cw], remap_planes(scene.sar.data(), SAR_BANDS)).expect("crop shape"),
        msi: Tensor::new(vec![MSI_BANDS, ch, cw], remap_planes(scene.msi.data(), MSI_BANDS)).expect("crop shape"),
        validity: remap_mask(&scene.validity),
        label: remap_mask(&scene.label),
    }
}

pub fn augment(scene: &Scene, rng: &mut impl Rng, cfg: &TrainConfig) -> Result<Scene> {
    let d = draw_augment(rng, scene.height(), scene.width(), cfg)?;
    Ok(apply_augment(scene, &d))
}

/// Stacks scenes into model inputs and a `[B,1,H,W]` label tensor.
pub fn make_inputs<T: Real>(scenes: &[&Scene], stats: &NormStats) -> Result<(Inputs<T>, Tensor<T>)> {
    let first = scenes.first().ok_or_else(|| config("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let b = scenes.len();
    let mut sar = Vec::with_capacity(b * SAR_BANDS * h * w);
    let mut msi = Vec::with_capacity(b * MSI_BANDS * h * w);
    let mut validity = Vec::with_capacity(b * h * w);
    let mut label = Vec::with_capacity(b * h * w);
    for s in scenes {
        if (s.height(), s.width()) != (h, w) {
            return Err(crate::error::data(format!("scene {} differs in size from the batch", s.id)));
        }
        let (ns, nm) = normalize_scene(s, stats);
        sar.extend(ns.into_iter().map(|v| T::lit(v as f64)));
        msi.extend(nm.into_iter().map(|v| T::lit(v as f64)));
        validity.extend(s.validity.iter().map(|&v| T::lit(v as f64)));
        label.extend(s.label.iter().map(|&v| T::lit(v as f64)));
    }
    Ok((
        Inputs {
            sar: Tensor::new(vec![b, SAR_BANDS, h, w], sar)?,
            msi: Tensor::new(vec![b, MSI_BANDS, h, w], msi)?,
            validity: Tensor::new(vec![b, 1, h, w], validity)?,
        },
        Tensor::new(vec![b, 1, h, w], label)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// Validation IoU at the threshold; absent for degenerate labels.
    pub iou: Option<f64>,
    /// Labels held a single class, so the 0.5 fallback was returned.
    pub degenerate: bool,
}

/// Probability threshold (predict water iff `p ≥ t`) maximizing IoU over the
/// unique predicted values; ties go to the smallest threshold.
pub fn select_threshold(probs: &[f32], labels: &[u8]) -> ThresholdChoice {
    assert_eq!(probs.len(), labels.len(), "one probability per label");
    let positives = labels.iter().filter(|&&l| l == 1).count() as u128;
    if positives == 0 || positives == labels.len() as u128 {
        return ThresholdChoice {
            threshold: 0.5,
            iou: None,
            degenerate: true,
        };
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    // Sweep thresholds from high to low; at each unique value every pixel at
    // or above it is predicted positive.
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut best: Option<(u128, u128, f32)> = None;
    let mut i = 0;
    while i < order.len() {
        let t = probs[order[i]];
        while i < order.len() && probs[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // IoU = tp / (positives + fp); compare fractions exactly.
        let better = match best {
            None => true,
            Some((btp, bfp, _)) => tp * (positives + bfp) >= btp * (positives + fp),
        };
        if better {
            best = Some((tp, fp, t));
        }
    }
    let (tp, fp, t) = best.expect("non-empty input");
    ThresholdChoice {
        threshold: t as f64,
        iou: Some(tp as f64 / (positives + fp) as f64),
        degenerate: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss_total: f64,
    pub val_loss_sar: f64,
    pub val_loss_fused: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss_total,val_loss_sar,val_loss_fused\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss_total, r.val_loss_sar, r.val_loss_fused
        ));
    }
    out
}

/// Mean validation losses, evaluated with running normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSummary {
    pub total: f64,
    pub sar: f64,
    pub fused: f64,
}

pub fn evaluate_losses<T: Real>(
    model: &Model<T>,
    scenes: &[&Scene],
    stats: &NormStats,
    batch_size: usize,
    w: f64,
) -> Result<LossSummary> {
    let mut acc = [0.0f64; 3];
    for chunk in scenes.chunks(batch_size.max(1)) {
        let (inputs, label) = make_inputs::<T>(chunk, stats)?;
        let mut ctx = Ctx::new(&model.store, NormMode::RunningStats, false);
        let pred = model.forward(&mut ctx, &inputs)?;
        let terms = total_loss(&mut ctx.g, &pred, &label, w)?;
        for (a, v) in acc.iter_mut().zip([terms.total, terms.sar, terms.fused]) {
            *a += ctx.g.value(v).item().as_f64() * chunk.len() as f64;
        }
    }
    let n = scenes.len().max(1) as f64;
    Ok(LossSummary {
        total: acc[0] / n,
        sar: acc[1] / n,
        fused: acc[2] / n,
    })
}

/// Result of a training run: the best-epoch model and its optimizer state.
pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub threshold: ThresholdChoice,
}

/// One optimizer step on a batch; returns the batch's total loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    optimizer: &mut Adam<T>,
    batch: &[&Scene],
    stats: &NormStats,
    w: f64,
) -> Result<f64> {
    let (inputs, label) = make_inputs::<T>(batch, stats)?;
    let mut ctx = Ctx::new(&model.store, NormMode::BatchStats, true);
    let pred = model.forward(&mut ctx, &inputs)?;
    let terms = total_loss(&mut ctx.g, &pred, &label, w)?;
    let loss = ctx.g.value(terms.total).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    ctx.g.backward(terms.total)?;
    let grads = ctx.param_grads();
    let stats_new = ctx.into_stats();
    optimizer.update(model.store.values_mut(), &grads);
    model.store.set_stats(stats_new);
    Ok(loss)
}

/// Trains from scratch, keeping the epoch with the lowest total validation
/// loss, then selects the fused-head threshold on the validation split.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<f32>> {
    cfg.validate()?;
    let train_set = dataset.split("train")?;
    let val_set = dataset.split("val")?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(crate::error::data("training needs non-empty train and val splits"));
    }
    let mut model = Model::<f32>::new(model_cfg.clone(), cfg.init_seed())?;
    let mut optimizer = Adam::new(model.store.values(), cfg.lr, cfg.weight_decay);
    let mut order_rng = stream(cfg.seed, "order");
    let mut aug_rng = stream(cfg.seed, "augment");
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model<f32>, Adam<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Scene> = chunk
                .iter()
                .map(|&i| augment(train_set[i], &mut aug_rng, cfg))
                .collect::<Result<_>>()?;
            let refs: Vec<&Scene> = batch.iter().collect();
            let loss = train_step(&mut model, &mut optimizer, &refs, &dataset.stats, cfg.loss_weight)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} batch {}: {m}", bi + 1)),
                    other => other,
                })?;
            loss_sum += loss * chunk.len() as f64;
        }
        let val = evaluate_losses(&model, &val_set, &dataset.stats, cfg.batch_size, cfg.loss_weight)?;
        if !val.total.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: validation loss is {}", val.total)));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss_total: val.total,
            val_loss_sar: val.sar,
            val_loss_fused: val.fused,
        };
        progress(&record);
        history.push(record);
        if best.as_ref().is_none_or(|b| val.total < b.1) {
            best = Some((epoch, val.total, model.clone(), optimizer.clone()));
        }
    }
    let (best_epoch, best_val_loss, model, optimizer) = best.expect("at least one epoch");
    let probs = predict(&model, &val_set, &dataset.stats, cfg.batch_size)?;
    let flat: Vec<f32> = probs.iter().flat_map(|p| p.primary.iter().copied()).collect();
    let labels: Vec<u8> = val_set.iter().flat_map(|s| s.label.iter().copied()).collect();
    let threshold = select_threshold(&flat, &labels);
    Ok(TrainOutcome {
        model,
        optimizer,
        history,
        best_epoch,
        best_val_loss,
        threshold,
    })
}
