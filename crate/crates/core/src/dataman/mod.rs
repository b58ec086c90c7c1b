//! Datasets: synthetic balanced sources, long-tailed down-sampling and
//! balanced few-shot subsets.

mod container;
mod idx;

use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BtmError, Result};
use crate::rng;

pub use container::{read_dataset, write_dataset, DatasetHeader, DATASET_MAGIC};
pub use idx::{load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

/// Feature matrix with integer labels.
///
/// Every sample carries an `id` (its row index in the pool it was drawn from)
/// so that unions can drop duplicates by identity rather than by value.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    class_counts: Vec<usize>,
    name: String,
}

impl LabeledDataset {
    /// Builds a dataset; ids default to `0..n`.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::with_ids(features, labels, ids, n_classes, name)
    }

    pub fn with_ids(
        features: Array2<f64>,
        labels: Vec<usize>,
        ids: Vec<u64>,
        n_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() || ids.len() != labels.len() {
            return Err(BtmError::DimensionMismatch(format!(
                "{} feature rows, {} labels, {} ids",
                features.nrows(),
                labels.len(),
                ids.len()
            )));
        }
        let mut class_counts = vec![0usize; n_classes];
        for &label in &labels {
            if label >= n_classes {
                return Err(BtmError::LabelOutOfRange {
                    label,
                    num_classes: n_classes,
                });
            }
            class_counts[label] += 1;
        }
        if let Some(class) = class_counts.iter().position(|&c| c == 0) {
            return Err(BtmError::EmptyClass { class });
        }
        Ok(Self {
            features,
            labels,
            ids,
            class_counts,
            name: name.into(),
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_counts.len()
    }

    /// Row indices grouped by class, each in ascending order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes()];
        for (row, &label) in self.labels.iter().enumerate() {
            groups[label].push(row);
        }
        groups
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize], name: impl Into<String>) -> Result<Self> {
        let features = self.features.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        let ids = rows.iter().map(|&r| self.ids[r]).collect();
        Self::with_ids(features, labels, ids, self.n_classes(), name)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// How `pareto_longtail_counts` picks the power-law exponent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongTailMode {
    /// Exponent chosen so the head/tail ratio equals `imbalance_ratio`.
    #[default]
    ImbalanceRatio,
    /// Exponent `pareto_alpha` used directly, counts clipped at 1.
    ParetoAlpha,
}

fn default_alpha() -> f64 {
    6.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSpec {
    pub n_classes: usize,
    pub max_count: usize,
    pub imbalance_ratio: f64,
    #[serde(default = "default_alpha")]
    pub pareto_alpha: f64,
    #[serde(default)]
    pub mode: LongTailMode,
    #[serde(default)]
    pub seed: u64,
}

impl LongTailSpec {
    pub fn new(n_classes: usize, max_count: usize, imbalance_ratio: f64, seed: u64) -> Self {
        Self {
            n_classes,
            max_count,
            imbalance_ratio,
            pareto_alpha: default_alpha(),
            mode: LongTailMode::ImbalanceRatio,
            seed,
        }
    }
}

/// Power-law class counts, most frequent class first.
///
/// In the default mode `counts[k] = round(max_count * (k+1)^-a)` with
/// `a = ln(imbalance_ratio) / ln(n_classes)`, which pins the first count to
/// `max_count` and the last to `max_count / imbalance_ratio`.
pub fn pareto_longtail_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    if spec.n_classes == 0 || spec.max_count == 0 {
        return Err(BtmError::InvalidLongTail(
            "n_classes and max_count must be positive".into(),
        ));
    }
    let exponent = match spec.mode {
        LongTailMode::ImbalanceRatio => {
            if !(spec.imbalance_ratio >= 1.0) || !spec.imbalance_ratio.is_finite() {
                return Err(BtmError::InvalidLongTail(format!(
                    "imbalance ratio must be >= 1, got {}",
                    spec.imbalance_ratio
                )));
            }
            if spec.n_classes == 1 {
                0.0
            } else {
                spec.imbalance_ratio.ln() / (spec.n_classes as f64).ln()
            }
        }
        LongTailMode::ParetoAlpha => {
            if !(spec.pareto_alpha > 0.0) {
                return Err(BtmError::InvalidLongTail(format!(
                    "pareto alpha must be positive, got {}",
                    spec.pareto_alpha
                )));
            }
            spec.pareto_alpha
        }
    };
    let counts: Vec<usize> = (0..spec.n_classes)
        .map(|k| {
            let raw = (spec.max_count as f64 * ((k + 1) as f64).powf(-exponent)).round() as usize;
            match spec.mode {
                LongTailMode::ParetoAlpha => raw.max(1),
                LongTailMode::ImbalanceRatio => raw,
            }
        })
        .collect();
    if let Some(class) = counts.iter().position(|&c| c < 1) {
        return Err(BtmError::InvalidLongTail(format!(
            "class {class} would receive no samples (max_count {} / imbalance ratio {})",
            spec.max_count, spec.imbalance_ratio
        )));
    }
    Ok(counts)
}

/// Draws `counts[k]` rows of class `k` uniformly without replacement.
/// Selected rows keep their relative order from `source`.
pub fn downsample_to_longtail(
    source: &LabeledDataset,
    counts: &[usize],
    seed: u64,
) -> Result<LabeledDataset> {
    if counts.len() != source.n_classes() {
        return Err(BtmError::DimensionMismatch(format!(
            "{} counts for {} classes",
            counts.len(),
            source.n_classes()
        )));
    }
    for (class, (&needed, &available)) in counts.iter().zip(source.class_counts()).enumerate() {
        if needed > available {
            return Err(BtmError::InsufficientSamples {
                class,
                needed,
                available,
            });
        }
    }
    let rows = draw_per_class(source, counts, seed);
    source.select(&rows, format!("{}/longtail-seed{seed}", source.name()))
}

/// Up to `n_per_class` rows per class without replacement; classes with fewer
/// rows contribute all of them and the name gains a `-shortfall` tag.
pub fn sample_balanced_fewshot(
    source: &LabeledDataset,
    n_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if source.is_empty() {
        return Err(BtmError::Empty("few-shot source dataset"));
    }
    let counts: Vec<usize> = source
        .class_counts()
        .iter()
        .map(|&c| c.min(n_per_class))
        .collect();
    let shortfall = source.class_counts().iter().any(|&c| c < n_per_class);
    let rows = draw_per_class(source, &counts, seed);
    let tag = if shortfall { "-shortfall" } else { "" };
    source.select(
        &rows,
        format!("{}/fewshot{n_per_class}-seed{seed}{tag}", source.name()),
    )
}

fn draw_per_class(source: &LabeledDataset, counts: &[usize], seed: u64) -> Vec<usize> {
    let mut rng = rng::seeded(seed);
    let mut rows: Vec<usize> = source
        .class_indices()
        .into_iter()
        .zip(counts)
        .flat_map(|(members, &take)| {
            index::sample(&mut rng, members.len(), take)
                .into_iter()
                .map(|i| members[i])
                .collect::<Vec<_>>()
        })
        .collect();
    rows.sort_unstable();
    rows
}

/// Union by sample identity: all of `a`, then rows of `b` whose id is new.
pub fn union_datasets(a: &LabeledDataset, b: &LabeledDataset) -> Result<LabeledDataset> {
    if a.dim() != b.dim() || a.n_classes() != b.n_classes() {
        return Err(BtmError::DimensionMismatch(format!(
            "union of {}x{} classes with {}x{} classes",
            a.dim(),
            a.n_classes(),
            b.dim(),
            b.n_classes()
        )));
    }
    let seen: HashSet<u64> = a.ids().iter().copied().collect();
    let extra: Vec<usize> = (0..b.len())
        .filter(|&r| !seen.contains(&b.ids[r]))
        .collect();
    let tail = b.features.select(Axis(0), &extra);
    let features = ndarray::concatenate(Axis(0), &[a.features.view(), tail.view()])
        .expect("column counts checked above");
    let mut labels = a.labels.clone();
    labels.extend(extra.iter().map(|&r| b.labels[r]));
    let mut ids = a.ids.clone();
    ids.extend(extra.iter().map(|&r| b.ids[r]));
    LabeledDataset::with_ids(
        features,
        labels,
        ids,
        a.n_classes(),
        format!("{}+{}", a.name(), b.name()),
    )
}

/// Balanced isotropic Gaussian mixture.
///
/// Class means are seeded uniform draws on the sphere of radius
/// `separation`; samples add unit-variance noise. Values are rounded to f32
/// precision so that a saved container reloads bit-exactly.
pub fn generate_gaussian_mixture(
    n_classes: usize,
    dim: usize,
    separation: f64,
    samples_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_classes < 2 || dim < 2 {
        return Err(BtmError::InvalidParams(format!(
            "gaussian mixture needs >= 2 classes and dim >= 2, got {n_classes} classes, dim {dim}"
        )));
    }
    if samples_per_class == 0 {
        return Err(BtmError::InvalidParams(
            "samples_per_class must be positive".into(),
        ));
    }
    let mut rng = rng::seeded(seed);
    let means: Vec<Array1<f64>> = (0..n_classes)
        .map(|_| {
            let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                v * (separation / norm)
            } else {
                v
            }
        })
        .collect();
    let n = n_classes * samples_per_class;
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for i in 0..samples_per_class {
            let mut row = features.row_mut(class * samples_per_class + i);
            for (x, m) in row.iter_mut().zip(mean) {
                let noise: f64 = rng.sample(StandardNormal);
                *x = ((m + noise) as f32) as f64;
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(
        features,
        labels,
        n_classes,
        format!("gmm-c{n_classes}-d{dim}-s{separation}-seed{seed}"),
    )
}

/// Splits off the last `n_per_class` rows of each class.
///
/// Returns `(remaining, held_out)`; useful to carve a balanced test set from
/// a generated pool so train and test share the class means.
pub fn holdout_per_class(
    source: &LabeledDataset,
    n_per_class: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for (class, members) in source.class_indices().into_iter().enumerate() {
        if members.len() <= n_per_class {
            return Err(BtmError::InsufficientSamples {
                class,
                needed: n_per_class + 1,
                available: members.len(),
            });
        }
        let cut = members.len() - n_per_class;
        keep.extend_from_slice(&members[..cut]);
        held.extend_from_slice(&members[cut..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((
        source.select(&keep, format!("{}/train", source.name()))?,
        source.select(&held, format!("{}/test", source.name()))?,
    ))
}

fn default_separation() -> f64 {
    3.0
}

fn default_test_per_class() -> usize {
    200
}

/// Long-tailed Gaussian-mixture train set plus a balanced test set drawn
/// from the same class means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub max_count: usize,
    pub imbalance_ratio: f64,
    #[serde(default = "default_alpha")]
    pub pareto_alpha: f64,
    #[serde(default)]
    pub mode: LongTailMode,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// 20 classes in 16 dimensions, 500 samples in the head class and an
    /// imbalance ratio of 100.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            classes: 20,
            dim: 16,
            separation: default_separation(),
            max_count: 500,
            imbalance_ratio: 100.0,
            pareto_alpha: default_alpha(),
            mode: LongTailMode::ImbalanceRatio,
            test_per_class: default_test_per_class(),
            seed,
        }
    }

    pub fn longtail(&self) -> LongTailSpec {
        LongTailSpec {
            n_classes: self.classes,
            max_count: self.max_count,
            imbalance_ratio: self.imbalance_ratio,
            pareto_alpha: self.pareto_alpha,
            mode: self.mode,
            seed: self.seed,
        }
    }

    /// Returns `(long_tailed_train, balanced_test)`.
    pub fn build(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let counts = pareto_longtail_counts(&self.longtail())?;
        let pool = generate_gaussian_mixture(
            self.classes,
            self.dim,
            self.separation,
            self.max_count + self.test_per_class,
            rng::mix(self.seed, 10),
        )?;
        let (train_pool, test) = holdout_per_class(&pool, self.test_per_class)?;
        let train = downsample_to_longtail(&train_pool, &counts, rng::mix(self.seed, 11))?;
        Ok((train, test))
    }
}

/// Most frequent class count over least frequent class count.
pub fn imbalance_ratio(dataset: &LabeledDataset) -> f64 {
    let max = dataset.class_counts().iter().copied().max().unwrap_or(0);
    let min = dataset.class_counts().iter().copied().min().unwrap_or(0);
    max as f64 / min as f64
}
