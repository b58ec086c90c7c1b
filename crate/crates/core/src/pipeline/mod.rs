//! Stage orchestration: Pre-train, optional FC, BTM and Post-train.
//!
//! A BTM stage samples `N_D` class-balanced few-shot subsets (`N_C` samples
//! per class), fine-tunes the current model on each one independently and
//! merges the results. Every stage yields a [`Checkpoint`] whose header points
//! at its parent, so a run forms a hash chain.

mod ablation;
mod record;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataman::{sample_balanced_fewshot, union_datasets, LabeledDataset};
use crate::error::{BtmError, Result};
use crate::merge::{interpolate, MergeKind, MergeStrategy};
use crate::metrics::{evaluate, evaluate_params, MetricsReport};
use crate::nncore::{
    init_params, train, Activation, Architecture, Checkpoint, Freeze, ParamVector, TrainConfig,
};
use crate::rng;

pub use ablation::{run_ablation, Ablation, AblationRow, AblationTable, SoupCheck};
pub use record::{
    parse_summary, ExperimentRecord, MergeSummary, SeedRecord, StageRecord, SummaryRow,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    /// Number of balanced subsets (`N_D`).
    pub n_datasets: usize,
    /// Samples per class in each subset (`N_C`).
    pub n_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_datasets == 0 || self.n_per_class == 0 {
            return Err(BtmError::InvalidPlan(format!(
                "sampler needs n_datasets >= 1 and n_per_class >= 1, got {} and {}",
                self.n_datasets, self.n_per_class
            )));
        }
        Ok(())
    }

    /// Seed of subset `i`.
    pub fn subset_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn architecture(&self, data: &LabeledDataset) -> Result<Architecture> {
        Architecture::mlp(data.dim(), &self.hidden, data.n_classes(), self.activation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BtmPlan {
    pub sampler: SamplerSpec,
    pub finetune: TrainConfig,
    #[serde(default)]
    pub strategy: MergeKind,
}

/// Where the BTM stage sits relative to the classifier re-training stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    BetweenStages,
    AfterStage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub model: ModelSpec,
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub fc_stage: Option<TrainConfig>,
    pub btm: BtmPlan,
    pub posttrain: TrainConfig,
    #[serde(default)]
    pub placement: Placement,
}

impl StagePlan {
    /// The laptop-scale default: 60 pre-train epochs at lr 0.1, ten 10-shot
    /// subsets fine-tuned for 30 epochs at lr 5e-3, and 10 class-balanced
    /// classifier epochs at lr 1e-3. SGD momentum 0.9, weight decay 5e-4.
    pub fn desk_default() -> Self {
        let mut posttrain = TrainConfig::sgd(10, 16, 1e-3);
        posttrain.freeze = Freeze::Backbone;
        posttrain.class_balanced_sampling = true;
        let mut finetune = TrainConfig::sgd(30, 16, 5e-3);
        finetune.mixup_alpha = 0.2;
        Self {
            model: ModelSpec {
                hidden: vec![32],
                activation: Activation::Relu,
            },
            pretrain: TrainConfig::sgd(60, 64, 0.1),
            fc_stage: None,
            btm: BtmPlan {
                sampler: SamplerSpec {
                    n_datasets: 10,
                    n_per_class: 10,
                    seed: 0,
                },
                finetune,
                strategy: MergeKind::Average,
            },
            posttrain,
            placement: Placement::BetweenStages,
        }
        .reseeded(0)
    }

    /// Copy with every stage seed derived from `seed`.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.pretrain.seed = rng::mix(seed, 1);
        if let Some(fc) = &mut self.fc_stage {
            fc.seed = rng::mix(seed, 2);
        }
        self.btm.sampler.seed = rng::mix(seed, 3);
        self.btm.finetune.seed = rng::mix(seed, 4);
        self.posttrain.seed = rng::mix(seed, 5);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(BtmError::InvalidPlan(msg.into()));
        if self.model.hidden.contains(&0) {
            return bad("hidden layers must have positive width");
        }
        for cfg in [&self.pretrain, &self.btm.finetune, &self.posttrain]
            .into_iter()
            .chain(self.fc_stage.as_ref())
        {
            cfg.validate()?;
        }
        if self.pretrain.freeze != Freeze::None || self.pretrain.class_balanced_sampling {
            return bad("pretrain must train the whole model with instance-uniform sampling");
        }
        if let Some(fc) = &self.fc_stage {
            if fc.freeze != Freeze::Backbone || fc.class_balanced_sampling {
                return bad("fc_stage must be classifier-only (freeze = backbone) with instance-uniform sampling");
            }
        }
        if self.posttrain.freeze != Freeze::Backbone || !self.posttrain.class_balanced_sampling {
            return bad("posttrain must freeze the backbone and use class-balanced sampling");
        }
        self.btm.sampler.validate()
    }
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(BtmError::InvalidConfig(msg.into()))
    }
}

/// Trains from a fresh initialisation on the (long-tailed) training set.
pub fn run_pretrain(
    model: &ModelSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    require(
        !cfg.class_balanced_sampling && cfg.freeze == Freeze::None,
        "pretrain uses plain instance sampling on the whole model",
    )?;
    let init = init_params(&model.architecture(data)?, cfg.seed)?;
    let trained = train(&init, data, cfg)?;
    Ok(Checkpoint::new(&trained, "pretrain", cfg.seed, None))
}

/// Classifier-only re-training on all data with instance-uniform batches.
pub fn run_fc_stage(
    start: &Checkpoint,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    require(
        cfg.freeze == Freeze::Backbone && !cfg.class_balanced_sampling,
        "fc stage trains only the classifier with instance-uniform sampling",
    )?;
    Ok(start.derive(&train(start.params(), data, cfg)?, "fc", cfg.seed))
}

/// Classifier-only re-training with class-balanced batches.
pub fn run_posttrain(
    start: &Checkpoint,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    require(
        cfg.freeze == Freeze::Backbone && cfg.class_balanced_sampling,
        "posttrain trains only the classifier with class-balanced sampling",
    )?;
    Ok(start.derive(&train(start.params(), data, cfg)?, "posttrain", cfg.seed))
}

/// The `N_D` balanced subsets, subset `i` drawn with `sampler.seed + i`.
pub fn draw_subsets(data: &LabeledDataset, sampler: &SamplerSpec) -> Result<Vec<LabeledDataset>> {
    sampler.validate()?;
    (0..sampler.n_datasets)
        .map(|i| sample_balanced_fewshot(data, sampler.n_per_class, sampler.subset_seed(i)))
        .collect()
}

/// Fine-tunes `start` on each subset. Subset `i` trains with seed
/// `ft_cfg.seed + i`; results are ordered by subset index.
pub fn finetune_subsets(
    start: &Checkpoint,
    subsets: &[LabeledDataset],
    ft_cfg: &TrainConfig,
) -> Result<Vec<Checkpoint>> {
    subsets
        .par_iter()
        .enumerate()
        .map(|(i, subset)| {
            let mut cfg = ft_cfg.clone();
            cfg.seed = ft_cfg.seed.wrapping_add(i as u64);
            let tuned = train(start.params(), subset, &cfg)?;
            Ok(start.derive(&tuned, format!("btm-ft{i}"), cfg.seed))
        })
        .collect()
}

/// Union of all subsets, used to score adaptive and greedy merges.
pub fn selection_set(subsets: &[LabeledDataset]) -> Result<LabeledDataset> {
    let (first, rest) = subsets
        .split_first()
        .ok_or(BtmError::Empty("subset list"))?;
    rest.iter()
        .try_fold(first.clone(), |acc, s| union_datasets(&acc, s))
}

pub fn merge_finetunes(
    start: &Checkpoint,
    finetunes: &[Checkpoint],
    subsets: &[LabeledDataset],
    kind: MergeKind,
) -> Result<(Checkpoint, MergeSummary)> {
    let models: Vec<ParamVector> = finetunes.iter().map(|c| c.params().clone()).collect();
    let selection = if kind.needs_selection_set() {
        Some(selection_set(subsets)?)
    } else {
        None
    };
    let outcome = MergeStrategy::new(kind, selection.as_ref())?.apply(&models)?;
    let merged = start.derive(&outcome.params, "btm-merge", start.seed());
    let summary = MergeSummary {
        kind,
        selection_scores: outcome.scores,
        kept: outcome.soup.as_ref().map(|s| s.kept.clone()),
        soup_score: outcome.soup.as_ref().map(|s| s.score),
    };
    Ok((merged, summary))
}

#[derive(Clone, Debug)]
pub struct BtmOutcome {
    pub merged: Checkpoint,
    pub finetunes: Vec<Checkpoint>,
    pub finetune_reports: Vec<MetricsReport>,
    pub merge: MergeSummary,
}

/// Balanced fine-tunes of `start` followed by a merge.
pub fn run_btm(
    start: &Checkpoint,
    data: &LabeledDataset,
    sampler: &SamplerSpec,
    ft_cfg: &TrainConfig,
    kind: MergeKind,
    test_set: &LabeledDataset,
) -> Result<BtmOutcome> {
    let subsets = draw_subsets(data, sampler)?;
    let finetunes = finetune_subsets(start, &subsets, ft_cfg)?;
    let (merged, merge) = merge_finetunes(start, &finetunes, &subsets, kind)?;
    let finetune_reports = finetunes
        .par_iter()
        .map(|c| evaluate(c, test_set))
        .collect::<Result<Vec<_>>>()?;
    Ok(BtmOutcome {
        merged,
        finetunes,
        finetune_reports,
        merge,
    })
}

/// All checkpoints of an experiment, keyed by stage name, plus the record.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub record: ExperimentRecord,
    pub checkpoints: Vec<(String, Checkpoint)>,
}

impl ExperimentRun {
    pub fn checkpoint(&self, name: &str) -> Option<&Checkpoint> {
        self.checkpoints
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c)
    }
}

struct Recorder<'a> {
    test_set: &'a LabeledDataset,
    checkpoints: Vec<(String, Checkpoint)>,
}

impl Recorder<'_> {
    fn stage(&mut self, name: &str, arm: &str, ckpt: &Checkpoint) -> Result<StageRecord> {
        self.stage_with_report(name, arm, ckpt, evaluate(ckpt, self.test_set)?)
    }

    fn stage_with_report(
        &mut self,
        name: &str,
        arm: &str,
        ckpt: &Checkpoint,
        report: MetricsReport,
    ) -> Result<StageRecord> {
        self.checkpoints.push((name.to_owned(), ckpt.clone()));
        Ok(StageRecord {
            name: name.to_owned(),
            arm: arm.to_owned(),
            stage_tag: ckpt.stage_tag().to_owned(),
            checkpoint: format!("checkpoints/{name}.ckpt"),
            hash: ckpt.hash(),
            parent_hash: ckpt.parent_hash().map(str::to_owned),
            report,
        })
    }
}

/// Runs the baseline arm (pretrain -> posttrain) and the BTM arm from one
/// shared pretrain checkpoint.
pub fn run_experiment(
    plan: &StagePlan,
    data: &LabeledDataset,
    test_set: &LabeledDataset,
) -> Result<ExperimentRun> {
    plan.validate()?;
    let pre = run_pretrain(&plan.model, data, &plan.pretrain)?;
    run_experiment_from(plan, &pre, data, test_set)
}

/// [`run_experiment`] with an existing pretrain checkpoint.
pub fn run_experiment_from(
    plan: &StagePlan,
    pre: &Checkpoint,
    data: &LabeledDataset,
    test_set: &LabeledDataset,
) -> Result<ExperimentRun> {
    plan.validate()?;
    let mut rec = Recorder {
        test_set,
        checkpoints: Vec::new(),
    };
    let pretrain = rec.stage("pretrain", "shared", pre)?;
    log::info!(
        "pretrain: h-mean {:.4}, accuracy {:.4}",
        pretrain.report.h_mean,
        pretrain.report.accuracy
    );

    let base_post = run_posttrain(pre, data, &plan.posttrain)?;
    let baseline_posttrain = rec.stage("baseline_posttrain", "baseline", &base_post)?;

    let (btm_start, fc) = match &plan.fc_stage {
        Some(cfg) => {
            let ckpt = run_fc_stage(pre, data, cfg)?;
            let record = rec.stage("fc", "btm", &ckpt)?;
            (ckpt, Some(record))
        }
        None => (pre.clone(), None),
    };

    let btm_input = match plan.placement {
        Placement::BetweenStages => btm_start.clone(),
        Placement::AfterStage2 => run_posttrain(&btm_start, data, &plan.posttrain)?,
    };
    let btm = run_btm(
        &btm_input,
        data,
        &plan.btm.sampler,
        &plan.btm.finetune,
        plan.btm.strategy,
        test_set,
    )?;

    let mut btm_posttrain_ckpt = None;
    let mut btm_posttrain = None;
    if plan.placement == Placement::AfterStage2 {
        btm_posttrain = Some(rec.stage("btm_posttrain", "btm", &btm_input)?);
        btm_posttrain_ckpt = Some(btm_input.clone());
    }
    let finetunes = btm
        .finetunes
        .iter()
        .zip(&btm.finetune_reports)
        .enumerate()
        .map(|(i, (c, r))| rec.stage_with_report(&format!("btm_ft_{i:02}"), "btm", c, r.clone()))
        .collect::<Result<Vec<_>>>()?;
    let merged = rec.stage("btm_merge", "btm", &btm.merged)?;
    log::info!(
        "btm merge: h-mean {:.4}, accuracy {:.4}",
        merged.report.h_mean,
        merged.report.accuracy
    );
    if btm_posttrain_ckpt.is_none() {
        let post = run_posttrain(&btm.merged, data, &plan.posttrain)?;
        btm_posttrain = Some(rec.stage("btm_posttrain", "btm", &post)?);
    }

    let record = ExperimentRecord {
        placement: plan.placement,
        seeds: SeedRecord {
            pretrain: plan.pretrain.seed,
            fc: plan.fc_stage.as_ref().map(|c| c.seed),
            sampler: plan.btm.sampler.seed,
            finetune: plan.btm.finetune.seed,
            posttrain: plan.posttrain.seed,
        },
        pretrain,
        baseline_posttrain,
        fc,
        finetunes,
        merged,
        btm_posttrain: btm_posttrain.expect("set on both placements"),
        merge: btm.merge,
    };
    Ok(ExperimentRun {
        record,
        checkpoints: rec.checkpoints,
    })
}

/// Fine-tunes on two balanced subsets, on their union, and interpolates the
/// two single-subset models at `lambda = 0.5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnionComparison {
    pub subset_a: MetricsReport,
    pub subset_b: MetricsReport,
    pub union: MetricsReport,
    pub midpoint: MetricsReport,
    pub union_class_counts: Vec<usize>,
}

pub fn observation_union_experiment(
    start: &Checkpoint,
    data: &LabeledDataset,
    test_set: &LabeledDataset,
    n_per_class: usize,
    seeds: (u64, u64),
    ft_cfg: &TrainConfig,
) -> Result<UnionComparison> {
    let a = sample_balanced_fewshot(data, n_per_class, seeds.0)?;
    let b = sample_balanced_fewshot(data, n_per_class, seeds.1)?;
    let ab = union_datasets(&a, &b)?;
    let tuned: Vec<ParamVector> = [&a, &b, &ab]
        .par_iter()
        .map(|subset| train(start.params(), subset, ft_cfg).map(|p| p.quantized()))
        .collect::<Result<_>>()?;
    let midpoint = interpolate(&tuned[0], &tuned[1], 0.5)?;
    Ok(UnionComparison {
        subset_a: evaluate_params(&tuned[0], test_set)?,
        subset_b: evaluate_params(&tuned[1], test_set)?,
        union: evaluate_params(&tuned[2], test_set)?,
        midpoint: evaluate_params(&midpoint, test_set)?,
        union_class_counts: ab.class_counts().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataman::{downsample_to_longtail, generate_gaussian_mixture, holdout_per_class};

    fn small_problem() -> (LabeledDataset, LabeledDataset) {
        let pool = generate_gaussian_mixture(4, 4, 3.0, 80, 2).unwrap();
        let (train_pool, test) = holdout_per_class(&pool, 20).unwrap();
        let lt = downsample_to_longtail(&train_pool, &[60, 20, 8, 3], 1).unwrap();
        (lt, test)
    }

    fn small_plan() -> StagePlan {
        let mut plan = StagePlan::desk_default();
        plan.model.hidden = vec![8];
        plan.pretrain.epochs = 5;
        plan.btm.sampler.n_datasets = 3;
        plan.btm.sampler.n_per_class = 4;
        plan.btm.finetune.epochs = 3;
        plan.posttrain.epochs = 2;
        plan.reseeded(9)
    }

    fn zero_epoch_plan() -> StagePlan {
        let mut plan = small_plan();
        plan.pretrain.epochs = 0;
        plan.btm.finetune.epochs = 0;
        plan.posttrain.epochs = 0;
        plan.btm.sampler.n_datasets = 1;
        plan
    }

    #[test]
    fn plan_validation() {
        assert!(StagePlan::desk_default().validate().is_ok());
        let mut plan = small_plan();
        plan.posttrain.freeze = Freeze::None;
        assert!(matches!(plan.validate(), Err(BtmError::InvalidPlan(_))));
        let mut plan = small_plan();
        let mut fc = TrainConfig::sgd(1, 8, 0.1);
        fc.freeze = Freeze::Backbone;
        fc.class_balanced_sampling = true;
        plan.fc_stage = Some(fc);
        assert!(plan.validate().is_err());
        let mut plan = small_plan();
        plan.btm.sampler.n_datasets = 0;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn pretrain_zero_epochs_is_init() {
        let (data, _) = small_problem();
        let plan = zero_epoch_plan();
        let ckpt = run_pretrain(&plan.model, &data, &plan.pretrain).unwrap();
        let init =
            init_params(&plan.model.architecture(&data).unwrap(), plan.pretrain.seed).unwrap();
        assert_eq!(ckpt.params(), &init.quantized());
        assert_eq!(ckpt.stage_tag(), "pretrain");
    }

    #[test]
    fn stage_preconditions() {
        let (data, _) = small_problem();
        let plan = small_plan();
        let pre = run_pretrain(&plan.model, &data, &plan.pretrain).unwrap();
        assert!(run_posttrain(&pre, &data, &plan.pretrain).is_err());
        assert!(run_fc_stage(&pre, &data, &plan.posttrain).is_err());
        let mut bad = plan.pretrain.clone();
        bad.class_balanced_sampling = true;
        assert!(run_pretrain(&plan.model, &data, &bad).is_err());
    }

    #[test]
    fn classifier_stages_keep_backbone() {
        let (data, _) = small_problem();
        let plan = small_plan();
        let pre = run_pretrain(&plan.model, &data, &plan.pretrain).unwrap();
        let post = run_posttrain(&pre, &data, &plan.posttrain).unwrap();
        assert_eq!(post.backbone_hash(), pre.backbone_hash());
        assert_ne!(post.hash(), pre.hash());
        let mut fc = TrainConfig::sgd(2, 16, 0.05);
        fc.freeze = Freeze::Backbone;
        let fc_ckpt = run_fc_stage(&pre, &data, &fc).unwrap();
        assert_eq!(fc_ckpt.params().backbone(), pre.params().backbone());
        fc.epochs = 0;
        assert_eq!(
            run_fc_stage(&pre, &data, &fc).unwrap().params(),
            pre.params()
        );
    }

    #[test]
    fn btm_trivial_cases() {
        let (data, test) = small_problem();
        let plan = small_plan();
        let pre = run_pretrain(&plan.model, &data, &plan.pretrain).unwrap();

        let one = SamplerSpec {
            n_datasets: 1,
            ..plan.btm.sampler.clone()
        };
        let out = run_btm(
            &pre,
            &data,
            &one,
            &plan.btm.finetune,
            MergeKind::Average,
            &test,
        )
        .unwrap();
        assert_eq!(out.merged.params(), out.finetunes[0].params());
        assert_eq!(out.finetune_reports.len(), 1);

        let mut frozen = plan.btm.finetune.clone();
        frozen.epochs = 0;
        let out = run_btm(
            &pre,
            &data,
            &plan.btm.sampler,
            &frozen,
            MergeKind::Average,
            &test,
        )
        .unwrap();
        assert_eq!(out.merged.params(), pre.params());
        assert_eq!(out.finetunes.len(), 3);
    }

    #[test]
    fn btm_is_deterministic_under_parallelism() {
        let (data, test) = small_problem();
        let plan = small_plan();
        let pre = run_pretrain(&plan.model, &data, &plan.pretrain).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    run_btm(
                        &pre,
                        &data,
                        &plan.btm.sampler,
                        &plan.btm.finetune,
                        MergeKind::GreedySoupH,
                        &test,
                    )
                    .unwrap()
                })
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.merged, b.merged);
        assert_eq!(a.finetune_reports, b.finetune_reports);
        assert_eq!(a.merge, b.merge);
    }

    #[test]
    fn zero_epoch_experiment_reports_match() {
        let (data, test) = small_problem();
        let run = run_experiment(&zero_epoch_plan(), &data, &test).unwrap();
        let r = &run.record;
        assert_eq!(r.finetunes.len(), 1);
        for stage in r.stages() {
            assert_eq!(stage.report, r.pretrain.report, "{}", stage.name);
        }
    }

    #[test]
    fn experiment_shares_pretrain_and_chains_hashes() {
        let (data, test) = small_problem();
        let plan = small_plan();
        let run = run_experiment(&plan, &data, &test).unwrap();
        let r = &run.record;
        assert_eq!(r.finetunes.len(), plan.btm.sampler.n_datasets);
        assert_eq!(
            r.baseline_posttrain.parent_hash.as_ref(),
            Some(&r.pretrain.hash)
        );
        assert_eq!(r.finetunes[0].parent_hash.as_ref(), Some(&r.pretrain.hash));
        assert_eq!(r.btm_posttrain.parent_hash.as_ref(), Some(&r.merged.hash));

        // rerunning a stage from its recorded input reproduces its hash
        let pre = run.checkpoint("pretrain").unwrap();
        let merged = run.checkpoint("btm_merge").unwrap();
        assert_eq!(
            run_posttrain(pre, &data, &plan.posttrain).unwrap().hash(),
            r.baseline_posttrain.hash
        );
        assert_eq!(
            run_posttrain(merged, &data, &plan.posttrain)
                .unwrap()
                .hash(),
            r.btm_posttrain.hash
        );
        assert_eq!(
            run.checkpoint("btm_posttrain").unwrap().backbone_hash(),
            merged.backbone_hash()
        );
    }

    #[test]
    fn after_stage2_placement_runs_btm_last() {
        let (data, test) = small_problem();
        let mut plan = small_plan();
        plan.placement = Placement::AfterStage2;
        let run = run_experiment(&plan, &data, &test).unwrap();
        let r = &run.record;
        assert_eq!(r.btm_final().name, "btm_merge");
        assert_eq!(
            r.finetunes[0].parent_hash.as_ref(),
            Some(&r.btm_posttrain.hash)
        );
        assert_eq!(r.btm_posttrain.hash, r.baseline_posttrain.hash);
    }

    #[test]
    fn union_experiment_with_same_seed_collapses() {
        let (data, test) = small_problem();
        let plan = small_plan();
        let pre = run_pretrain(&plan.model, &data, &plan.pretrain).unwrap();
        let cmp = observation_union_experiment(&pre, &data, &test, 4, (5, 5), &plan.btm.finetune)
            .unwrap();
        assert_eq!(cmp.subset_a, cmp.subset_b);
        assert_eq!(cmp.union, cmp.subset_a);
        assert_eq!(cmp.midpoint, cmp.subset_a);

        let cmp = observation_union_experiment(&pre, &data, &test, 4, (5, 6), &plan.btm.finetune)
            .unwrap();
        assert!(cmp.union_class_counts[0] > 4);
        assert_eq!(cmp.union_class_counts[3], 3);
    }
}
