//! Experiment records and their on-disk directory layout:
//!
//! ```text
//! <out>/plan.json          full stage plan
//! <out>/record.json        the ExperimentRecord
//! <out>/checkpoints/*.ckpt one per stage / fine-tuned model
//! <out>/reports/*.json     MetricsReport per checkpoint
//! <out>/summary.csv        one row per stage / model
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentRun, Placement, StagePlan};
use crate::error::{BtmError, Result};
use crate::merge::MergeKind;
use crate::metrics::{MetricsReport, REPORT_CSV_COLUMNS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub arm: String,
    pub stage_tag: String,
    pub checkpoint: String,
    pub hash: String,
    pub parent_hash: Option<String>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub kind: MergeKind,
    /// Per fine-tune selection-set score (adaptive and greedy kinds).
    pub selection_scores: Option<Vec<f64>>,
    /// Greedy soup ingredients, in insertion order.
    pub kept: Option<Vec<usize>>,
    /// Selection-set score of the soup.
    pub soup_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub pretrain: u64,
    pub fc: Option<u64>,
    pub sampler: u64,
    pub finetune: u64,
    pub posttrain: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub placement: Placement,
    pub seeds: SeedRecord,
    pub pretrain: StageRecord,
    pub baseline_posttrain: StageRecord,
    pub fc: Option<StageRecord>,
    pub finetunes: Vec<StageRecord>,
    pub merged: StageRecord,
    pub btm_posttrain: StageRecord,
    pub merge: MergeSummary,
}

pub const SUMMARY_PREFIX: [&str; 4] = ["name", "arm", "stage_tag", "hash"];

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub arm: String,
    pub stage_tag: String,
    pub hash: String,
    pub report: MetricsReport,
}

impl ExperimentRecord {
    /// Final model of the BTM arm.
    pub fn btm_final(&self) -> &StageRecord {
        match self.placement {
            Placement::BetweenStages => &self.btm_posttrain,
            Placement::AfterStage2 => &self.merged,
        }
    }

    pub fn baseline_final(&self) -> &StageRecord {
        &self.baseline_posttrain
    }

    /// Every stage in execution order.
    pub fn stages(&self) -> Vec<&StageRecord> {
        let mut out = vec![&self.pretrain, &self.baseline_posttrain];
        out.extend(self.fc.as_ref());
        if self.placement == Placement::AfterStage2 {
            out.push(&self.btm_posttrain);
        }
        out.extend(&self.finetunes);
        out.push(&self.merged);
        if self.placement == Placement::BetweenStages {
            out.push(&self.btm_posttrain);
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = SUMMARY_PREFIX
            .iter()
            .chain(REPORT_CSV_COLUMNS.iter())
            .copied()
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for s in self.stages() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.name,
                s.arm,
                s.stage_tag,
                s.hash,
                s.report.csv_fields()
            ));
        }
        out
    }

    /// Writes the full directory layout under `dir`.
    pub fn write_dir(dir: &Path, plan: &StagePlan, run: &ExperimentRun) -> Result<()> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::create_dir_all(dir.join("reports"))?;
        fs::write(dir.join("plan.json"), serde_json::to_string_pretty(plan)?)?;
        for (name, ckpt) in &run.checkpoints {
            ckpt.save(&dir.join("checkpoints").join(format!("{name}.ckpt")))?;
        }
        for stage in run.record.stages() {
            fs::write(
                dir.join("reports").join(format!("{}.json", stage.name)),
                serde_json::to_string_pretty(&stage.report)?,
            )?;
        }
        fs::write(
            dir.join("record.json"),
            serde_json::to_string_pretty(&run.record)?,
        )?;
        fs::write(dir.join("summary.csv"), run.record.summary_csv())?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(
            dir.join("record.json"),
        )?)?)
    }
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| BtmError::Csv("empty summary".into()))?;
    let expected: Vec<&str> = SUMMARY_PREFIX
        .iter()
        .chain(REPORT_CSV_COLUMNS.iter())
        .copied()
        .collect();
    if header.split(',').collect::<Vec<_>>() != expected {
        return Err(BtmError::Csv(format!(
            "unexpected summary header {header:?}"
        )));
    }
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected.len() {
                return Err(BtmError::Csv(format!(
                    "expected {} fields in {line:?}",
                    expected.len()
                )));
            }
            Ok(SummaryRow {
                name: fields[0].to_owned(),
                arm: fields[1].to_owned(),
                stage_tag: fields[2].to_owned(),
                hash: fields[3].to_owned(),
                report: MetricsReport::from_csv_fields(&fields[4..])?,
            })
        })
        .collect()
}
