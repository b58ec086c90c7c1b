//! Per-class recall and generalized-mean aggregates.
//!
//! The generalized mean with exponent `p` of positive values `x_1..x_n` is
//! `(1/n * sum x_i^p)^(1/p)`, with the limits `p -> 0` (geometric mean),
//! `p -> -inf` (minimum) and `p -> +inf` (maximum). Harmonic (`p = -1`) and
//! geometric (`p = 0`) means of per-class recall are the worst-category
//! oriented scores used throughout the crate.

use serde::{Deserialize, Serialize};

use crate::dataman::LabeledDataset;
use crate::error::{BtmError, Result};
use crate::nncore::{forward, Checkpoint, ParamVector};

/// Floor substituted for zero recalls before taking harmonic/geometric means.
pub const DEFAULT_RECALL_FLOOR: f64 = 1e-3;

/// Per-class recall values, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RecallVector {
    values: Vec<f64>,
}

impl RecallVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(BtmError::Empty("recall vector"));
        }
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(BtmError::OutOfUnitRange { index, value });
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<Vec<f64>> for RecallVector {
    type Error = BtmError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<RecallVector> for Vec<f64> {
    fn from(r: RecallVector) -> Self {
        r.values
    }
}

/// Generalized mean `M_p` of non-negative values.
///
/// `p = 0` is evaluated as the exponential of the mean log, and other finite
/// exponents through a log-sum-exp so that large `|p|` or many classes do not
/// overflow. For `p <= 0` every value must be strictly positive.
pub fn generalized_mean(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(BtmError::Empty("generalized mean input"));
    }
    if p.is_nan() {
        return Err(BtmError::InvalidParams("exponent p is NaN".into()));
    }
    for (index, &value) in values.iter().enumerate() {
        if value.is_nan() || value < 0.0 || (p <= 0.0 && value == 0.0) {
            return Err(BtmError::NonPositive { index, value, p });
        }
    }
    let n = values.len() as f64;
    let mean = if p == f64::NEG_INFINITY {
        values.iter().copied().fold(f64::INFINITY, f64::min)
    } else if p == f64::INFINITY {
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else if p == 1.0 {
        values.iter().sum::<f64>() / n
    } else if p == 0.0 {
        (values.iter().map(|v| v.ln()).sum::<f64>() / n).exp()
    } else {
        let scaled: Vec<f64> = values.iter().map(|v| p * v.ln()).collect();
        let peak = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if peak == f64::NEG_INFINITY {
            // all zeros with p > 0
            return Ok(0.0);
        }
        let sum: f64 = scaled.iter().map(|s| (s - peak).exp()).sum();
        ((peak + (sum / n).ln()) / p).exp()
    };
    Ok(mean)
}

pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    generalized_mean(values, -1.0)
}

pub fn geometric_mean(values: &[f64]) -> Result<f64> {
    generalized_mean(values, 0.0)
}

/// Recall of each class: correct predictions over true occurrences.
pub fn per_class_recall(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<RecallVector> {
    let (correct, support) = class_tallies(predicted, truth, num_classes)?;
    let values = correct
        .iter()
        .zip(&support)
        .map(|(&c, &s)| c as f64 / s as f64)
        .collect();
    RecallVector::new(values)
}

fn class_tallies(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if predicted.len() != truth.len() {
        return Err(BtmError::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if num_classes == 0 {
        return Err(BtmError::Empty("class set"));
    }
    let mut correct = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        for label in [p, t] {
            if label >= num_classes {
                return Err(BtmError::LabelOutOfRange { label, num_classes });
            }
        }
        support[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    if let Some(class) = support.iter().position(|&s| s == 0) {
        return Err(BtmError::EmptyClass { class });
    }
    Ok((correct, support))
}

/// Replaces exact zeros with `floor`; the flag reports whether any were found.
pub fn sanitize_recalls(recalls: &RecallVector, floor: f64) -> (RecallVector, bool) {
    let mut substituted = false;
    let values = recalls
        .values
        .iter()
        .map(|&v| {
            if v == 0.0 {
                substituted = true;
                floor
            } else {
                v
            }
        })
        .collect();
    (RecallVector { values }, substituted)
}

/// Evaluation summary of one model on a balanced test set.
///
/// `recalls` and `lowest_recall` are the raw values; the three means are
/// computed on the sanitized recalls. Field order is the serialized order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub h_mean: f64,
    pub g_mean: f64,
    pub a_mean: f64,
    pub lowest_recall: f64,
    pub accuracy: f64,
    pub recalls: RecallVector,
    pub zero_substituted: bool,
}

pub const REPORT_CSV_COLUMNS: [&str; 7] = [
    "h_mean",
    "g_mean",
    "a_mean",
    "lowest_recall",
    "accuracy",
    "recalls",
    "zero_substituted",
];

impl MetricsReport {
    pub fn from_recalls(recalls: RecallVector, accuracy: f64, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(BtmError::InvalidParams(format!(
                "recall floor must be positive, got {floor}"
            )));
        }
        let (clean, zero_substituted) = sanitize_recalls(&recalls, floor);
        Ok(Self {
            h_mean: harmonic_mean(clean.values())?,
            g_mean: geometric_mean(clean.values())?,
            a_mean: generalized_mean(clean.values(), 1.0)?,
            lowest_recall: recalls.min(),
            accuracy,
            recalls,
            zero_substituted,
        })
    }

    pub fn csv_header() -> String {
        REPORT_CSV_COLUMNS.join(",")
    }

    /// Comma-separated fields in [`REPORT_CSV_COLUMNS`] order; recalls are
    /// `;`-joined. Floats use shortest round-trip formatting.
    pub fn csv_fields(&self) -> String {
        let recalls: Vec<String> = self.recalls.values().iter().map(f64::to_string).collect();
        format!(
            "{},{},{},{},{},{},{}",
            self.h_mean,
            self.g_mean,
            self.a_mean,
            self.lowest_recall,
            self.accuracy,
            recalls.join(";"),
            self.zero_substituted
        )
    }

    /// One-row CSV document (header plus values).
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_fields())
    }

    pub fn from_csv_fields(fields: &[&str]) -> Result<Self> {
        if fields.len() != REPORT_CSV_COLUMNS.len() {
            return Err(BtmError::Csv(format!(
                "expected {} report fields, found {}",
                REPORT_CSV_COLUMNS.len(),
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| BtmError::Csv(format!("bad number {s:?}: {e}")))
        };
        let recalls = fields[5].split(';').map(num).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            h_mean: num(fields[0])?,
            g_mean: num(fields[1])?,
            a_mean: num(fields[2])?,
            lowest_recall: num(fields[3])?,
            accuracy: num(fields[4])?,
            recalls: RecallVector::new(recalls)?,
            zero_substituted: fields[6]
                .parse()
                .map_err(|e| BtmError::Csv(format!("bad flag {:?}: {e}", fields[6])))?,
        })
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == Self::csv_header() => {}
            other => return Err(BtmError::Csv(format!("unexpected header {other:?}"))),
        }
        let row = lines
            .next()
            .ok_or_else(|| BtmError::Csv("missing data row".into()))?;
        Self::from_csv_fields(&row.split(',').collect::<Vec<_>>())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

pub fn predict(params: &ParamVector, dataset: &LabeledDataset) -> Result<Vec<usize>> {
    let logits = forward(params, dataset.features())?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| argmax(row.iter().copied()))
        .collect())
}

pub fn evaluate_params_with_floor(
    params: &ParamVector,
    test_set: &LabeledDataset,
    floor: f64,
) -> Result<MetricsReport> {
    let n_classes = params.arch().n_classes();
    if n_classes != test_set.n_classes() {
        return Err(BtmError::DimensionMismatch(format!(
            "model has {} classes, test set has {}",
            n_classes,
            test_set.n_classes()
        )));
    }
    let predicted = predict(params, test_set)?;
    let (correct, support) = class_tallies(&predicted, test_set.labels(), n_classes)?;
    let recalls = RecallVector::new(
        correct
            .iter()
            .zip(&support)
            .map(|(&c, &s)| c as f64 / s as f64)
            .collect(),
    )?;
    let accuracy = correct.iter().sum::<usize>() as f64 / test_set.len() as f64;
    MetricsReport::from_recalls(recalls, accuracy, floor)
}

pub fn evaluate_params(params: &ParamVector, test_set: &LabeledDataset) -> Result<MetricsReport> {
    evaluate_params_with_floor(params, test_set, DEFAULT_RECALL_FLOOR)
}

/// Forward inference on the test set followed by the full report.
pub fn evaluate(checkpoint: &Checkpoint, test_set: &LabeledDataset) -> Result<MetricsReport> {
    evaluate_params(checkpoint.params(), test_set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PAIR: [f64; 2] = [0.1, 0.9];

    #[test]
    fn two_class_example_means() {
        assert!((generalized_mean(&PAIR, 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((generalized_mean(&PAIR, 0.0).unwrap() - 0.3).abs() < 1e-12);
        assert!((generalized_mean(&PAIR, -1.0).unwrap() - 0.18).abs() < 1e-12);
        assert_eq!(generalized_mean(&PAIR, f64::NEG_INFINITY).unwrap(), 0.1);
        assert_eq!(generalized_mean(&PAIR, f64::INFINITY).unwrap(), 0.9);
    }

    #[test]
    fn constant_vector_is_fixed_point() {
        let v = vec![0.37; 11];
        for p in [
            f64::NEG_INFINITY,
            -3.0,
            -1.0,
            0.0,
            0.5,
            1.0,
            4.0,
            f64::INFINITY,
        ] {
            assert!(
                (generalized_mean(&v, p).unwrap() - 0.37).abs() < 1e-15,
                "p={p}"
            );
        }
    }

    #[test]
    fn rejects_empty_and_zero_for_nonpositive_p() {
        assert!(matches!(
            generalized_mean(&[], 1.0),
            Err(BtmError::Empty(_))
        ));
        let err = generalized_mean(&[0.0, 0.5], -1.0).unwrap_err();
        assert!(err.to_string().contains("sanitize"), "{err}");
        assert!(generalized_mean(&[0.0, 0.5], 0.0).is_err());
        assert_eq!(generalized_mean(&[0.0, 0.5], 1.0).unwrap(), 0.25);
    }

    #[test]
    fn large_class_count_stays_finite() {
        let v: Vec<f64> = (0..10_000).map(|i| 1e-3 + (i as f64) * 1e-4).collect();
        for p in [-50.0, -1.0, 0.0, 1.0, 50.0] {
            let m = generalized_mean(&v, p).unwrap();
            assert!(m.is_finite() && m > 0.0, "p={p} gave {m}");
        }
    }

    #[test]
    fn recall_examples() {
        let r = per_class_recall(&[0, 1, 2, 0], &[0, 1, 2, 0], 3).unwrap();
        assert_eq!(r.values(), &[1.0, 1.0, 1.0]);
        let r = per_class_recall(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.values(), &[0.5, 1.0]);
        let r = per_class_recall(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(r.values(), &[1.0, 0.0]);
    }

    #[test]
    fn recall_errors() {
        assert!(matches!(
            per_class_recall(&[0, 0], &[0, 0], 2),
            Err(BtmError::EmptyClass { class: 1 })
        ));
        assert!(per_class_recall(&[0], &[0, 1], 2).is_err());
        assert!(matches!(
            per_class_recall(&[0, 5], &[0, 1], 2),
            Err(BtmError::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn sanitize_examples() {
        let rv = |v: Vec<f64>| RecallVector::new(v).unwrap();
        let (s, flag) = sanitize_recalls(&rv(vec![0.0, 0.5]), 1e-3);
        assert_eq!((s.values(), flag), (&[0.001, 0.5][..], true));
        let (s, flag) = sanitize_recalls(&rv(vec![0.2, 0.8]), 1e-3);
        assert_eq!((s.values(), flag), (&[0.2, 0.8][..], false));
        let (s, flag) = sanitize_recalls(&rv(vec![0.0, 0.0]), 1e-3);
        assert_eq!((s.values(), flag), (&[0.001, 0.001][..], true));
    }

    #[test]
    fn report_orders_and_serializes() {
        let recalls = RecallVector::new(vec![0.0, 0.4, 1.0]).unwrap();
        let r = MetricsReport::from_recalls(recalls, 0.5, DEFAULT_RECALL_FLOOR).unwrap();
        assert_eq!(r.lowest_recall, 0.0);
        assert!(r.zero_substituted);
        assert!(r.lowest_recall <= r.h_mean && r.h_mean <= r.g_mean && r.g_mean <= r.a_mean);

        let json = serde_json::to_string(&r).unwrap();
        let keys = [
            "h_mean",
            "g_mean",
            "a_mean",
            "lowest_recall",
            "accuracy",
            "recalls",
            "zero_substituted",
        ];
        let positions: Vec<usize> = keys
            .iter()
            .map(|k| json.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{json}");
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);

        let csv = r.to_csv();
        assert!(csv
            .starts_with("h_mean,g_mean,a_mean,lowest_recall,accuracy,recalls,zero_substituted\n"));
        assert_eq!(MetricsReport::from_csv(&csv).unwrap(), r);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax([0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax([1.0, 3.0, 3.0]), 1);
    }

    fn positive_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-4f64..1.0, 2..64)
    }

    proptest! {
        #[test]
        fn power_mean_is_monotone(v in positive_vec()) {
            let ps = [f64::NEG_INFINITY, -4.0, -1.0, -0.25, 0.0, 0.25, 1.0, 3.0, f64::INFINITY];
            let means: Vec<f64> = ps.iter().map(|&p| generalized_mean(&v, p).unwrap()).collect();
            for w in means.windows(2) {
                prop_assert!(w[0] <= w[1] * (1.0 + 1e-14), "{:?}", means);
            }
        }

        #[test]
        fn permutation_invariant(v in positive_vec(), p in -3.0f64..3.0, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = v.clone();
            shuffled.shuffle(&mut crate::rng::seeded(seed));
            let a = generalized_mean(&v, p).unwrap();
            let b = generalized_mean(&shuffled, p).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
        }

        #[test]
        fn homogeneous_of_degree_one(v in positive_vec(), p in -3.0f64..3.0, c in 0.01f64..100.0) {
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            for p in [p, f64::NEG_INFINITY, f64::INFINITY] {
                let lhs = generalized_mean(&scaled, p).unwrap();
                let rhs = c * generalized_mean(&v, p).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs);
            }
        }

        #[test]
        fn continuous_at_zero(v in positive_vec()) {
            let g = generalized_mean(&v, 0.0).unwrap();
            let near = generalized_mean(&v, 1e-9).unwrap();
            prop_assert!((near - g).abs() < 1e-6);
        }

        #[test]
        fn weighted_recall_equals_accuracy(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 8..200)
        ) {
            let mut truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            truth.extend(0..4);
            let mut predicted: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            predicted.extend([3, 2, 1, 0]);
            let r = per_class_recall(&predicted, &truth, 4).unwrap();
            let mut support = [0usize; 4];
            truth.iter().for_each(|&t| support[t] += 1);
            let weighted: f64 = r.values().iter().zip(support).map(|(x, s)| x * s as f64).sum();
            let hits = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();
            prop_assert!((weighted / truth.len() as f64 - hits as f64 / truth.len() as f64).abs() < 1e-12);
        }
    }
}
