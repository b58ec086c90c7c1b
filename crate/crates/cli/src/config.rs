//! Run configuration: a JSON document holding the data source, the stage
//! plan and output defaults. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use btm_core::dataman::{
    downsample_to_longtail, load_idx, pareto_longtail_counts, read_dataset, LabeledDataset,
    LongTailSpec, SyntheticSpec,
};
use btm_core::pipeline::StagePlan;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated long-tailed Gaussian mixture.
    Synthetic(SyntheticSpec),
    /// Dataset containers written by `gen-data`.
    Files { train: PathBuf, test: PathBuf },
    /// IDX image/label pairs (MNIST layout). `longtail` optionally
    /// down-samples the training split.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        longtail: Option<LongTailSpec>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::desk_default(0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default = "StagePlan::desk_default")]
    pub plan: StagePlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            jobs: None,
            data: DataSource::default(),
            plan: StagePlan::desk_default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.plan.validate()?;
        if self.jobs == Some(0) {
            bail!("jobs must be at least 1");
        }
        self.data.validate()
    }
}

impl DataSource {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSource::Synthetic(_) => {}
            DataSource::Files { train, test } => {
                fix(train);
                fix(test);
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match self {
            DataSource::Synthetic(spec) => validate_synthetic(spec),
            DataSource::Files { train, test } => require_files(&[train, test]),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                longtail,
            } => {
                if let Some(lt) = longtail {
                    pareto_longtail_counts(lt)?;
                }
                require_files(&[train_images, train_labels, test_images, test_labels])
            }
        }
    }

    /// Materializes `(train, test)`. The global seed replaces any seed in
    /// the source description.
    pub fn load(&self, seed: u64) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DataSource::Synthetic(spec) => {
                let spec = SyntheticSpec {
                    seed,
                    ..spec.clone()
                };
                Ok(spec.build()?)
            }
            DataSource::Files { train, test } => Ok((
                read_dataset(train).with_context(|| format!("reading {}", train.display()))?,
                read_dataset(test).with_context(|| format!("reading {}", test.display()))?,
            )),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                longtail,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                if let Some(lt) = longtail {
                    let counts = pareto_longtail_counts(&LongTailSpec { seed, ..lt.clone() })?;
                    train = downsample_to_longtail(&train, &counts, seed)?;
                }
                Ok((train, test))
            }
        }
    }

    /// The test split alone.
    pub fn load_test(&self, seed: u64) -> anyhow::Result<LabeledDataset> {
        match self {
            DataSource::Files { test, .. } => {
                read_dataset(test).with_context(|| format!("reading {}", test.display()))
            }
            DataSource::Idx {
                test_images,
                test_labels,
                ..
            } => Ok(load_idx(test_images, test_labels)?),
            DataSource::Synthetic(_) => Ok(self.load(seed)?.1),
        }
    }
}

pub(crate) fn validate_synthetic(spec: &SyntheticSpec) -> anyhow::Result<()> {
    if spec.classes == 0 || spec.dim == 0 {
        bail!("synthetic data needs at least one class and one dimension");
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        bail!(
            "separation must be a finite non-negative number, got {}",
            spec.separation
        );
    }
    if spec.test_per_class == 0 {
        bail!("test_per_class must be at least 1");
    }
    pareto_longtail_counts(&spec.longtail())?;
    Ok(())
}

fn require_files(paths: &[&PathBuf]) -> anyhow::Result<()> {
    for p in paths {
        if !p.is_file() {
            bail!("data file {} does not exist", p.display());
        }
    }
    Ok(())
}
