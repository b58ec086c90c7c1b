use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{loss_and_grad, ParamVector};
use crate::dataman::LabeledDataset;
use crate::error::{BtmError, Result};
use crate::rng::{self, StdRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

/// Which part of the model is held fixed during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    #[default]
    None,
    /// Only the classifier is updated.
    Backbone,
    /// Only the backbone is updated.
    Classifier,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub mixup_alpha: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub class_balanced_sampling: bool,
    #[serde(default)]
    pub freeze: Freeze,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// SGD with momentum 0.9, weight decay 5e-4 and a cosine schedule.
    pub fn sgd(epochs: usize, batch_size: usize, lr_init: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr_init,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            schedule: Schedule::Cosine,
            mixup_alpha: 0.0,
            label_smoothing: 0.0,
            class_balanced_sampling: false,
            freeze: Freeze::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BtmError::InvalidConfig(msg));
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return bad(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        if !(self.mixup_alpha >= 0.0) {
            return bad(format!("mixup_alpha {} is negative", self.mixup_alpha));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(epoch, self.epochs, self.lr_init),
            Schedule::Constant => self.lr_init,
        }
    }
}

/// `lr_init * (1 + cos(pi * epoch / total)) / 2`, stepped once per epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_init: f64) -> f64 {
    lr_init * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), n_classes));
    for (row, &label) in labels.iter().enumerate() {
        t[[row, label]] = 1.0;
    }
    t
}

/// Convex combination of each row with row `partner[i]`, weight `lambda` on
/// the row itself.
pub fn mixup_with(
    features: &Array2<f64>,
    targets: &Array2<f64>,
    lambda: f64,
    partner: &[usize],
) -> (Array2<f64>, Array2<f64>) {
    let mix = |m: &Array2<f64>| {
        let other = m.select(Axis(0), partner);
        m * lambda + &(other * (1.0 - lambda))
    };
    (mix(features), mix(targets))
}

/// Mixup with `lambda ~ Beta(alpha, alpha)` and a random partner permutation.
pub fn mixup_batch<R: Rng + ?Sized>(
    features: &Array2<f64>,
    targets: &Array2<f64>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| BtmError::InvalidConfig(format!("mixup alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng);
    let mut partner: Vec<usize> = (0..features.nrows()).collect();
    partner.shuffle(rng);
    Ok(mixup_with(features, targets, lambda, &partner))
}

/// Seeded shuffle cut into consecutive batches.
pub fn shuffled_batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Same batch sizes as [`shuffled_batches`], but every slot first draws a
/// class uniformly and then a member of that class uniformly.
pub fn class_balanced_batches<R: Rng + ?Sized>(
    data: &LabeledDataset,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let groups = data.class_indices();
    let n = data.len();
    (0..n.div_ceil(batch_size))
        .map(|b| {
            let size = batch_size.min(n - b * batch_size);
            (0..size)
                .map(|_| {
                    let members = &groups[rng.random_range(0..groups.len())];
                    members[rng.random_range(0..members.len())]
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train(start: &ParamVector, data: &LabeledDataset, cfg: &TrainConfig) -> Result<ParamVector> {
    Ok(train_logged(start, data, cfg)?.params)
}

/// Mini-batch SGD with momentum and additive weight decay.
///
/// Frozen slices receive a zero update, so they stay bit-identical to
/// `start`. Everything random comes from `cfg.seed`.
pub fn train_logged(
    start: &ParamVector,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = start.arch().clone();
    if data.dim() != arch.d_in() || data.n_classes() != arch.n_classes() {
        return Err(BtmError::DimensionMismatch(format!(
            "data is {}-d with {} classes, model is {:?}",
            data.dim(),
            data.n_classes(),
            arch.layer_dims
        )));
    }
    if data.is_empty() {
        return Err(BtmError::Empty("training data"));
    }
    let frozen = match cfg.freeze {
        Freeze::None => 0..0,
        Freeze::Backbone => arch.backbone_range(),
        Freeze::Classifier => arch.classifier_range(),
    };

    let mut rng: StdRng = rng::seeded(cfg.seed);
    let mut weights = start.clone().into_values();
    let mut velocity = vec![0.0; weights.len()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let batches = if cfg.class_balanced_sampling {
            class_balanced_batches(data, cfg.batch_size, &mut rng)
        } else {
            shuffled_batches(data.len(), cfg.batch_size, &mut rng)
        };
        let mut loss_sum = 0.0;
        for rows in &batches {
            let x = data.features().select(Axis(0), rows);
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels()[r]).collect();
            let t = one_hot(&labels, arch.n_classes());
            let (x, t) = if cfg.mixup_alpha > 0.0 {
                mixup_batch(&x, &t, cfg.mixup_alpha, &mut rng)?
            } else {
                (x, t)
            };
            let current = ParamVector::new(weights, arch.clone())?;
            let (loss, grad) = loss_and_grad(&current, &x, &t, cfg.label_smoothing)?;
            weights = current.into_values();
            loss_sum += loss;

            let mut grad = grad.into_values();
            for (g, w) in grad.iter_mut().zip(&weights) {
                *g += cfg.weight_decay * w;
            }
            grad[frozen.clone()].iter_mut().for_each(|g| *g = 0.0);
            for ((w, v), g) in weights.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        let mean_loss = loss_sum / batches.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {mean_loss:.5}");
        epoch_losses.push(mean_loss);
    }
    Ok(TrainOutcome {
        params: ParamVector::new(weights, arch)?,
        epoch_losses,
    })
}
