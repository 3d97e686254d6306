//! Experiment engine: the training loop (BCE loss, decoupled weight decay,
//! milestone schedule, affine/contrast augmentation, best-checkpoint
//! selection on mean validation Dice), affine-only fine-tuning, threshold
//! selection, and the style-by-cohort evaluation matrix.

pub mod augment;
pub mod eval;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{trainable_params, TrainableMask};
use crate::data::Sample;
use crate::metrics::Mask;
use crate::model::{Conditioning, Model, ModelError};
use crate::rng::Rng;
use crate::tensor::optim::{AdamW, AdamWConfig, MilestoneSchedule};
use crate::tensor::tape::Tape;
use crate::tensor::{sigmoid, Tensor, TensorError};

pub use augment::AugmentConfig;
pub use eval::{evaluate_matrix, select_threshold, EvalCell, EvalMatrix, ThresholdChoice};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("numeric failure at epoch {epoch}, batch {batch}: {message}")]
    Numeric {
        epoch: usize,
        batch: usize,
        message: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error(transparent)]
    Conditioning(#[from] crate::conditioning::ConditioningError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_milestones")]
    pub milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub scheduler_gamma: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub seed: u64,
    #[serde(default = "default_mask")]
    pub trainable: TrainableMask,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    2e-4
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_milestones() -> Vec<usize> {
    vec![30, 45]
}
fn default_gamma() -> f64 {
    0.5
}
fn default_mask() -> TrainableMask {
    TrainableMask::Full
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            milestones: default_milestones(),
            scheduler_gamma: default_gamma(),
            augment: AugmentConfig::default(),
            seed,
            trainable: TrainableMask::Full,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr < 1.0) {
            return Err(TrainError::Config(format!(
                "lr must be in (0,1), got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(TrainError::Config(format!(
                "milestones must be ascending, got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    /// Mean validation Dice (threshold 0.5) per cohort.
    pub val_dice: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl History {
    /// history.csv: epoch, train_loss, lr, then one val-Dice column per
    /// cohort (sorted by name).
    pub fn to_csv(&self) -> String {
        let mut cohorts: Vec<&String> = self
            .epochs
            .first()
            .map(|e| e.val_dice.keys().collect())
            .unwrap_or_default();
        cohorts.sort();
        let mut out = String::from("epoch,train_loss,lr");
        for c in &cohorts {
            out.push_str(&format!(",val_dice_{c}"));
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}", e.epoch, e.train_loss, e.lr));
            for c in &cohorts {
                out.push_str(&format!(",{}", e.val_dice[*c]));
            }
            out.push('\n');
        }
        out
    }
}

/// Stack samples into a `[B, C, H, W]` image tensor and a `[B, 1, H, W]`
/// target tensor, applying a fresh augmentation per sample when given.
fn stack_batch(
    samples: &[&Sample],
    augment: Option<(&AugmentConfig, &mut Rng)>,
) -> (Tensor, Tensor, Vec<String>) {
    let shape = samples[0].image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let b = samples.len();
    let mut images = Tensor::zeros(&[b, c, h, w]);
    let mut targets = Tensor::zeros(&[b, 1, h, w]);
    let mut sources = Vec::with_capacity(b);
    let mut aug = augment;
    for (i, s) in samples.iter().enumerate() {
        let (image, label) = match aug.as_mut() {
            Some((config, rng)) => {
                let t = augment::draw_transform(config, rng);
                (augment::warp_image(&s.image, &t), augment::warp_mask(&s.label, &t))
            }
            None => (s.image.clone(), s.label.clone()),
        };
        images.data_mut()[i * c * h * w..(i + 1) * c * h * w].copy_from_slice(image.data());
        for (j, &bit) in label.bits().iter().enumerate() {
            targets.data_mut()[i * h * w + j] = bit as u8 as f64;
        }
        sources.push(s.source.clone());
    }
    (images, targets, sources)
}

fn conditioning_for<'a>(model: &Model, sources: &'a [String]) -> Conditioning<'a> {
    if model.film().is_some() {
        Conditioning::FromImage
    } else {
        Conditioning::Sources(sources)
    }
}

/// Run eval-mode inference and return per-sample sigmoid score maps.
pub fn predict_scores(
    model: &Model,
    samples: &[&Sample],
    style: Option<&str>,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (images, _, sources) = stack_batch(chunk, None);
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let cond = match (model.film().is_some(), style) {
            (true, _) => Conditioning::FromImage,
            (false, Some(s)) => Conditioning::Style(s),
            (false, None) => Conditioning::Sources(&sources),
        };
        let logits = model.forward_eval(&mut tape, x, &cond)?;
        let probs = sigmoid(tape.value(logits));
        let hw = chunk[0].label.len();
        for (i, _) in chunk.iter().enumerate() {
            out.push(probs.data()[i * hw..(i + 1) * hw].to_vec());
        }
    }
    Ok(out)
}

/// Mean validation Dice per cohort at threshold 0.5 (the best-checkpoint
/// criterion; evaluation thresholds are selected later, per style).
fn validation_dice(model: &Model, val: &[&Sample], batch_size: usize) -> Result<BTreeMap<String, f64>> {
    let mut by_cohort: BTreeMap<String, Vec<&Sample>> = BTreeMap::new();
    for s in val {
        by_cohort.entry(s.source.clone()).or_default().push(s);
    }
    let mut out = BTreeMap::new();
    for (cohort, samples) in by_cohort {
        let scores = predict_scores(model, &samples, None, batch_size)?;
        let mut inter = 0usize;
        let mut total = 0usize;
        for (s, score) in samples.iter().zip(&scores) {
            let pred = Mask::threshold(score, s.label.height(), s.label.width(), 0.5);
            for (p, g) in pred.bits().iter().zip(s.label.bits()) {
                inter += (*p && *g) as usize;
                total += *p as usize + *g as usize;
            }
        }
        let d = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
        out.insert(cohort, d);
    }
    Ok(out)
}

/// Train in place. On return the model holds the parameters of the epoch
/// with the best mean validation Dice; the history records every epoch.
/// Fully deterministic in `config.seed`.
pub fn train(
    model: &mut Model,
    train_set: &[&Sample],
    val_set: &[&Sample],
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let schedule = MilestoneSchedule::new(config.lr, config.milestones.clone(), config.scheduler_gamma)
        .map_err(TrainError::Tensor)?;
    let mut optimizer = AdamW::new(
        &model.store,
        AdamWConfig {
            lr: config.lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: config.weight_decay,
        },
    )?;
    optimizer.set_trainable(trainable_params(config.trainable, &model.store));

    let mut data_rng = Rng::new(config.seed).split("data");
    let mut augment_rng = Rng::new(config.seed).split("augment");
    let mut dropout_rng = Rng::new(config.seed).split("dropout");

    let mut history = History::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;

    for epoch in 0..config.epochs {
        optimizer.set_lr(schedule.lr_at(epoch));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        data_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let (images, targets, sources) =
                stack_batch(&batch, Some((&config.augment, &mut augment_rng)));
            let mut tape = Tape::new();
            let x = tape.constant(images);
            let cond = conditioning_for(model, &sources);
            let step = || -> Result<f64> {
                let logits = model.forward_train(&mut tape, x, &cond, &mut dropout_rng)?;
                let loss = tape.bce_with_logits(logits, targets)?;
                tape.backward(loss, &mut model.store)?;
                Ok(tape.value(loss).item())
            };
            let loss = step().map_err(|e| TrainError::Numeric {
                epoch,
                batch: batch_idx,
                message: e.to_string(),
            })?;
            if !loss.is_finite() {
                return Err(TrainError::Numeric {
                    epoch,
                    batch: batch_idx,
                    message: format!("loss is {loss}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            optimizer.step(&mut model.store)?;
            model.store.zero_grads();
        }

        let val_dice = validation_dice(model, val_set, config.batch_size)?;
        let mean_dice = if val_dice.is_empty() {
            0.0
        } else {
            val_dice.values().sum::<f64>() / val_dice.len() as f64
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            lr: schedule.lr_at(epoch),
            val_dice,
        });
        if best.as_ref().is_none_or(|(b, _)| mean_dice > *b) {
            best = Some((
                mean_dice,
                model.store.iter().map(|(_, p)| p.value.clone()).collect(),
            ));
            history.best_epoch = Some(epoch);
        }
    }

    if let Some((_, params)) = best {
        let ids: Vec<_> = model.store.ids().collect();
        for (id, value) in ids.into_iter().zip(params) {
            model.store.set_value(id, value);
        }
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// New source id the fine-tuned parameter set belongs to.
    pub source: String,
    /// Copy the new set from this existing source instead of (1, 0).
    #[serde(default)]
    pub init_from: Option<String>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

/// Affine-only adaptation to a new annotation style: add a fresh parameter
/// set for `config.source`, freeze everything except the normalization
/// affines, and train on the (few) provided samples. Every non-affine
/// parameter is bitwise unchanged.
pub fn finetune(
    model: &mut Model,
    train_samples: &[&Sample],
    val_samples: &[&Sample],
    config: &FinetuneConfig,
) -> Result<History> {
    model.add_source_set(&config.source, config.init_from.as_deref())?;
    let mut cfg = config.train.clone();
    cfg.trainable = TrainableMask::NormAffineOnly;
    train(model, train_samples, val_samples, &cfg)
}
