//! Ablation grids over merge strategy, subset size and BTM placement.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    draw_subsets, finetune_subsets, merge_finetunes, run_experiment_from, run_fc_stage,
    run_posttrain, run_pretrain, MergeSummary, Placement, SamplerSpec, StagePlan,
};
use crate::dataman::LabeledDataset;
use crate::error::{BtmError, Result};
use crate::merge::MergeKind;
use crate::metrics::{evaluate, MetricsReport, REPORT_CSV_COLUMNS};
use crate::nncore::{Checkpoint, Freeze};

pub const SUBSET_COUNTS: [usize; 5] = [2, 4, 8, 10, 20];
pub const SHOTS_PER_CLASS: [usize; 3] = [5, 10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    MergeStrategies,
    SubsetSize,
    WhenHow,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [
        Ablation::MergeStrategies,
        Ablation::SubsetSize,
        Ablation::WhenHow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::MergeStrategies => "merge-strategies",
            Ablation::SubsetSize => "subset-size",
            Ablation::WhenHow => "when-how",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = BtmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                BtmError::InvalidPlan(format!(
                    "unknown ablation {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Greedy-soup bookkeeping: the soup's selection-set score and the best
/// single ingredient's.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupCheck {
    pub soup_score: f64,
    pub best_single_score: f64,
}

impl SoupCheck {
    fn from_summary(summary: &MergeSummary) -> Option<Self> {
        let soup_score = summary.soup_score?;
        let best_single_score = summary
            .selection_scores
            .as_ref()?
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            soup_score,
            best_single_score,
        })
    }

    pub fn holds(&self) -> bool {
        self.soup_score >= self.best_single_score
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub phase: String,
    pub report: MetricsReport,
    pub soup: Option<SoupCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ablation: Ablation,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn soup_checks(&self) -> impl Iterator<Item = &SoupCheck> {
        self.rows.iter().filter_map(|r| r.soup.as_ref())
    }

    /// Full-precision CSV; soup columns are empty when not applicable.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "variant,phase,{},soup_score,best_single_score\n",
            REPORT_CSV_COLUMNS.join(",")
        );
        for row in &self.rows {
            let (soup, best) = row
                .soup
                .map(|s| (s.soup_score.to_string(), s.best_single_score.to_string()))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{soup},{best}\n",
                row.variant,
                row.phase,
                row.report.csv_fields()
            ));
        }
        out
    }

    pub fn from_csv(ablation: Ablation, text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .skip(1)
            .map(|line| {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != REPORT_CSV_COLUMNS.len() + 4 {
                    return Err(BtmError::Csv(format!("bad ablation row {line:?}")));
                }
                let n = fields.len();
                let soup = match (fields[n - 2], fields[n - 1]) {
                    ("", "") => None,
                    (s, b) => Some(SoupCheck {
                        soup_score: s
                            .parse()
                            .map_err(|e| BtmError::Csv(format!("{s:?}: {e}")))?,
                        best_single_score: b
                            .parse()
                            .map_err(|e| BtmError::Csv(format!("{b:?}: {e}")))?,
                    }),
                };
                Ok(AblationRow {
                    variant: fields[0].to_owned(),
                    phase: fields[1].to_owned(),
                    report: MetricsReport::from_csv_fields(&fields[2..n - 2])?,
                    soup,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { ablation, rows })
    }

    /// Human-readable table with percentages to two decimals.
    pub fn to_text_table(&self) -> String {
        let mut out = format!(
            "{:<28} {:<10} {:>8} {:>8} {:>9} {:>9}\n",
            "variant", "phase", "H-Mean", "G-Mean", "L-Recall", "Accuracy"
        );
        for row in &self.rows {
            let r = &row.report;
            out.push_str(&format!(
                "{:<28} {:<10} {:>8.2} {:>8.2} {:>9.2} {:>9.2}\n",
                row.variant,
                row.phase,
                100.0 * r.h_mean,
                100.0 * r.g_mean,
                100.0 * r.lowest_recall,
                100.0 * r.accuracy
            ));
        }
        out
    }
}

fn btm_start(plan: &StagePlan, data: &LabeledDataset) -> Result<(Checkpoint, Checkpoint)> {
    let pre = run_pretrain(&plan.model, data, &plan.pretrain)?;
    let start = match &plan.fc_stage {
        Some(cfg) => run_fc_stage(&pre, data, cfg)?,
        None => pre.clone(),
    };
    Ok((pre, start))
}

/// Runs one ablation grid.
///
/// - `merge-strategies`: every merge kind on one shared set of fine-tunes,
///   reported after merging and after post-training (10 rows).
/// - `subset-size`: `N_D` x `N_C` over the fixed grid, final models (15 rows).
/// - `when-how`: fine-tuned part (backbone / classifier / whole) x
///   placement, final BTM-arm models (6 rows).
pub fn run_ablation(
    ablation: Ablation,
    plan: &StagePlan,
    data: &LabeledDataset,
    test_set: &LabeledDataset,
) -> Result<AblationTable> {
    plan.validate()?;
    let rows = match ablation {
        Ablation::MergeStrategies => {
            let (_, start) = btm_start(plan, data)?;
            let subsets = draw_subsets(data, &plan.btm.sampler)?;
            let finetunes = finetune_subsets(&start, &subsets, &plan.btm.finetune)?;
            let mut rows = Vec::new();
            for kind in MergeKind::ALL {
                let (merged, summary) = merge_finetunes(&start, &finetunes, &subsets, kind)?;
                let soup = SoupCheck::from_summary(&summary);
                let post = run_posttrain(&merged, data, &plan.posttrain)?;
                log::info!("merge strategy {} done", kind.name());
                for (phase, ckpt) in [("merge", &merged), ("posttrain", &post)] {
                    rows.push(AblationRow {
                        variant: kind.name().to_owned(),
                        phase: phase.to_owned(),
                        report: evaluate(ckpt, test_set)?,
                        soup,
                    });
                }
            }
            rows
        }
        Ablation::SubsetSize => {
            let (_, start) = btm_start(plan, data)?;
            let mut rows = Vec::new();
            for n_datasets in SUBSET_COUNTS {
                for n_per_class in SHOTS_PER_CLASS {
                    let sampler = SamplerSpec {
                        n_datasets,
                        n_per_class,
                        seed: plan.btm.sampler.seed,
                    };
                    let subsets = draw_subsets(data, &sampler)?;
                    let finetunes = finetune_subsets(&start, &subsets, &plan.btm.finetune)?;
                    let (merged, summary) =
                        merge_finetunes(&start, &finetunes, &subsets, plan.btm.strategy)?;
                    let post = run_posttrain(&merged, data, &plan.posttrain)?;
                    log::info!("subset size N_D={n_datasets} N_C={n_per_class} done");
                    rows.push(AblationRow {
                        variant: format!("N_D={n_datasets} N_C={n_per_class}"),
                        phase: "posttrain".to_owned(),
                        report: evaluate(&post, test_set)?,
                        soup: SoupCheck::from_summary(&summary),
                    });
                }
            }
            rows
        }
        Ablation::WhenHow => {
            let pre = run_pretrain(&plan.model, data, &plan.pretrain)?;
            let mut rows = Vec::new();
            for placement in [Placement::BetweenStages, Placement::AfterStage2] {
                for (how, freeze) in [
                    ("backbone", Freeze::Classifier),
                    ("classifier", Freeze::Backbone),
                    ("whole", Freeze::None),
                ] {
                    let mut variant = plan.clone();
                    variant.placement = placement;
                    variant.btm.finetune.freeze = freeze;
                    let run = run_experiment_from(&variant, &pre, data, test_set)?;
                    let when = match placement {
                        Placement::BetweenStages => "between_stages",
                        Placement::AfterStage2 => "after_stage2",
                    };
                    log::info!("when/how {how} {when} done");
                    rows.push(AblationRow {
                        variant: format!("{how} {when}"),
                        phase: "final".to_owned(),
                        report: run.record.btm_final().report.clone(),
                        soup: SoupCheck::from_summary(&run.record.merge),
                    });
                }
            }
            rows
        }
    };
    Ok(AblationTable { ablation, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataman::{downsample_to_longtail, generate_gaussian_mixture, holdout_per_class};

    fn problem() -> (StagePlan, LabeledDataset, LabeledDataset) {
        let pool = generate_gaussian_mixture(3, 3, 3.0, 70, 4).unwrap();
        let (train, test) = holdout_per_class(&pool, 10).unwrap();
        let lt = downsample_to_longtail(&train, &[60, 20, 6], 0).unwrap();
        let mut plan = StagePlan::desk_default();
        plan.model.hidden = vec![6];
        plan.pretrain.epochs = 2;
        plan.btm.sampler.n_datasets = 3;
        plan.btm.finetune.epochs = 1;
        plan.posttrain.epochs = 1;
        (plan, lt, test)
    }

    #[test]
    fn names_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        let err = "bogus".parse::<Ablation>().unwrap_err().to_string();
        assert!(
            err.contains("merge-strategies") && err.contains("when-how"),
            "{err}"
        );
    }

    #[test]
    fn grid_shapes_and_soup_invariant() {
        let (plan, data, test) = problem();
        let t = run_ablation(Ablation::MergeStrategies, &plan, &data, &test).unwrap();
        assert_eq!(t.rows.len(), 10);
        assert_eq!(t.soup_checks().count(), 4);
        assert!(t.soup_checks().all(SoupCheck::holds));
        assert_eq!(AblationTable::from_csv(t.ablation, &t.to_csv()).unwrap(), t);

        let t = run_ablation(Ablation::WhenHow, &plan, &data, &test).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert_eq!(
            t,
            run_ablation(Ablation::WhenHow, &plan, &data, &test).unwrap()
        );
    }

    #[test]
    fn subset_size_grid() {
        let (mut plan, data, test) = problem();
        plan.btm.finetune.epochs = 0;
        let t = run_ablation(Ablation::SubsetSize, &plan, &data, &test).unwrap();
        let variants: Vec<&str> = t.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(variants.len(), 15);
        assert_eq!(variants[0], "N_D=2 N_C=5");
        assert_eq!(variants[14], "N_D=20 N_C=20");
        assert!(t.to_text_table().lines().count() == 16);
    }
}
