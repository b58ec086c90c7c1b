//! Weight-space merging of models that share a common parent.
//!
//! Interpolation follows `lambda * a + (1 - lambda) * b`, so `a` is the
//! fine-tuned model and `b` the model it started from. All sums run in model
//! list order.

use serde::{Deserialize, Serialize};

use crate::dataman::LabeledDataset;
use crate::error::{BtmError, Result};
use crate::metrics::{evaluate_params, MetricsReport};
use crate::nncore::ParamVector;

pub fn interpolate(a: &ParamVector, b: &ParamVector, lambda: f64) -> Result<ParamVector> {
    a.ensure_same_arch(b)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(BtmError::InvalidParams(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    if lambda == 0.0 {
        return Ok(b.clone());
    }
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    ParamVector::new(values, a.arch().clone())
}

fn check_models(models: &[ParamVector]) -> Result<&ParamVector> {
    let first = models.first().ok_or(BtmError::Empty("model list"))?;
    for m in &models[1..] {
        first.ensure_same_arch(m)?;
    }
    Ok(first)
}

/// Elementwise mean: the left-to-right sum divided by the model count.
pub fn average_merge(models: &[ParamVector]) -> Result<ParamVector> {
    let first = check_models(models)?;
    let mut sum = vec![0.0; first.len()];
    for m in models {
        sum.iter_mut().zip(m.values()).for_each(|(s, v)| *s += v);
    }
    let n = models.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    ParamVector::new(sum, first.arch().clone())
}

/// `sum_i c_i * model_i` with the given coefficients.
pub fn weighted_merge(models: &[ParamVector], coefficients: &[f64]) -> Result<ParamVector> {
    let first = check_models(models)?;
    if coefficients.len() != models.len() {
        return Err(BtmError::DimensionMismatch(format!(
            "{} coefficients for {} models",
            coefficients.len(),
            models.len()
        )));
    }
    let mut sum = vec![0.0; first.len()];
    for (m, &c) in models.iter().zip(coefficients) {
        sum.iter_mut()
            .zip(m.values())
            .for_each(|(s, v)| *s += c * v);
    }
    ParamVector::new(sum, first.arch().clone())
}

/// Coefficients proportional to `scores`, normalised to sum to one.
pub fn adaptive_coefficients(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(BtmError::Empty("score list"));
    }
    for (index, &score) in scores.iter().enumerate() {
        if !(score > 0.0) || !score.is_finite() {
            return Err(BtmError::NonPositiveScore { index, score });
        }
    }
    let total: f64 = scores.iter().sum();
    Ok(scores.iter().map(|s| s / total).collect())
}

pub fn adaptive_merge(models: &[ParamVector], scores: &[f64]) -> Result<ParamVector> {
    if models.len() == 1 && scores.len() == 1 {
        adaptive_coefficients(scores)?;
        return Ok(models[0].clone());
    }
    weighted_merge(models, &adaptive_coefficients(scores)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoupOutcome {
    pub params: ParamVector,
    /// Indices (into the input list) of the ingredients kept, in the order
    /// they were added.
    pub kept: Vec<usize>,
    /// Score of the returned soup.
    pub score: f64,
    /// Score of each input model.
    pub individual_scores: Vec<f64>,
}

impl SoupOutcome {
    pub fn best_single_score(&self) -> f64 {
        self.individual_scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Greedy soup: rank models by score, start from the best and add each
/// further model if the uniform average including it scores at least as well
/// as the current soup.
pub fn greedy_soup<F>(models: &[ParamVector], mut score_fn: F) -> Result<SoupOutcome>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    check_models(models)?;
    let individual_scores = models
        .iter()
        .map(&mut score_fn)
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..models.len()).collect();
    // stable sort keeps the original index order on ties
    order.sort_by(|&i, &j| individual_scores[j].total_cmp(&individual_scores[i]));

    let mut kept = vec![order[0]];
    let mut soup = models[order[0]].clone();
    let mut score = individual_scores[order[0]];
    for &candidate in &order[1..] {
        let mut trial_members: Vec<ParamVector> = kept.iter().map(|&k| models[k].clone()).collect();
        trial_members.push(models[candidate].clone());
        let trial = average_merge(&trial_members)?;
        let trial_score = score_fn(&trial)?;
        if trial_score >= score {
            kept.push(candidate);
            soup = trial;
            score = trial_score;
        }
    }
    Ok(SoupOutcome {
        params: soup,
        kept,
        score,
        individual_scores,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    #[default]
    Average,
    AdaptiveH,
    AdaptiveG,
    GreedySoupH,
    GreedySoupG,
}

impl MergeKind {
    pub const ALL: [MergeKind; 5] = [
        MergeKind::Average,
        MergeKind::AdaptiveH,
        MergeKind::AdaptiveG,
        MergeKind::GreedySoupH,
        MergeKind::GreedySoupG,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeKind::Average => "average",
            MergeKind::AdaptiveH => "adaptive_h",
            MergeKind::AdaptiveG => "adaptive_g",
            MergeKind::GreedySoupH => "greedy_soup_h",
            MergeKind::GreedySoupG => "greedy_soup_g",
        }
    }

    pub fn needs_selection_set(self) -> bool {
        self != MergeKind::Average
    }

    fn criterion(self) -> fn(&MetricsReport) -> f64 {
        match self {
            MergeKind::AdaptiveH | MergeKind::GreedySoupH => |r| r.h_mean,
            _ => |r| r.g_mean,
        }
    }
}

/// A merge kind plus the data its score-driven variants evaluate on.
#[derive(Clone, Copy, Debug)]
pub struct MergeStrategy<'a> {
    pub kind: MergeKind,
    pub selection_set: Option<&'a LabeledDataset>,
}

/// Result of applying a [`MergeStrategy`].
#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub params: ParamVector,
    /// Per-model selection scores (adaptive and greedy kinds).
    pub scores: Option<Vec<f64>>,
    /// Present for greedy soups.
    pub soup: Option<SoupOutcome>,
}

impl<'a> MergeStrategy<'a> {
    pub fn average() -> Self {
        Self {
            kind: MergeKind::Average,
            selection_set: None,
        }
    }

    pub fn new(kind: MergeKind, selection_set: Option<&'a LabeledDataset>) -> Result<Self> {
        if kind.needs_selection_set() && selection_set.is_none_or(|s| s.is_empty()) {
            return Err(BtmError::InvalidPlan(format!(
                "merge strategy {} needs a non-empty selection set",
                kind.name()
            )));
        }
        Ok(Self {
            kind,
            selection_set,
        })
    }

    pub fn apply(&self, models: &[ParamVector]) -> Result<MergeOutcome> {
        let criterion = self.kind.criterion();
        let score = |p: &ParamVector| -> Result<f64> {
            let set = self
                .selection_set
                .ok_or_else(|| BtmError::InvalidPlan("missing selection set".into()))?;
            Ok(criterion(&evaluate_params(p, set)?))
        };
        match self.kind {
            MergeKind::Average => Ok(MergeOutcome {
                params: average_merge(models)?,
                scores: None,
                soup: None,
            }),
            MergeKind::AdaptiveH | MergeKind::AdaptiveG => {
                let scores = models.iter().map(score).collect::<Result<Vec<_>>>()?;
                Ok(MergeOutcome {
                    params: adaptive_merge(models, &scores)?,
                    scores: Some(scores),
                    soup: None,
                })
            }
            MergeKind::GreedySoupH | MergeKind::GreedySoupG => {
                let soup = greedy_soup(models, score)?;
                Ok(MergeOutcome {
                    params: soup.params.clone(),
                    scores: Some(soup.individual_scores.clone()),
                    soup: Some(soup),
                })
            }
        }
    }
}

/// Metrics along the segment between two models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaCurve {
    pub lambdas: Vec<f64>,
    pub reports: Vec<MetricsReport>,
}

pub const CURVE_CSV_HEADER: &str = "lambda,h_mean,g_mean,a_mean,lowest_recall,accuracy";

impl LambdaCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CURVE_CSV_HEADER);
        out.push('\n');
        for (l, r) in self.lambdas.iter().zip(&self.reports) {
            out.push_str(&format!(
                "{l},{},{},{},{},{}\n",
                r.h_mean, r.g_mean, r.a_mean, r.lowest_recall, r.accuracy
            ));
        }
        out
    }

    /// Parses the CSV back into `(lambda, [h, g, a, lowest, accuracy])` rows.
    pub fn parse_csv(text: &str) -> Result<Vec<(f64, [f64; 5])>> {
        let mut lines = text.lines();
        if lines.next() != Some(CURVE_CSV_HEADER) {
            return Err(BtmError::Csv("unexpected lambda curve header".into()));
        }
        lines
            .map(|line| {
                let nums = line
                    .split(',')
                    .map(|f| {
                        f.parse::<f64>()
                            .map_err(|e| BtmError::Csv(format!("{f:?}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                match nums.as_slice() {
                    [l, h, g, a, low, acc] => Ok((*l, [*h, *g, *a, *low, *acc])),
                    _ => Err(BtmError::Csv(format!("expected 6 fields in {line:?}"))),
                }
            })
            .collect()
    }
}

/// Evaluates `interpolate(a, b, i / (grid_steps - 1))` for every grid point.
pub fn lambda_sweep(
    a: &ParamVector,
    b: &ParamVector,
    grid_steps: usize,
    test_set: &LabeledDataset,
) -> Result<LambdaCurve> {
    use rayon::prelude::*;

    a.ensure_same_arch(b)?;
    if grid_steps < 2 {
        return Err(BtmError::InvalidParams(format!(
            "lambda grid needs at least 2 points, got {grid_steps}"
        )));
    }
    let lambdas: Vec<f64> = (0..grid_steps)
        .map(|i| i as f64 / (grid_steps - 1) as f64)
        .collect();
    let reports = lambdas
        .par_iter()
        .map(|&l| evaluate_params(&interpolate(a, b, l)?, test_set))
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaCurve { lambdas, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{init_params, Activation, Architecture};
    use proptest::prelude::*;

    fn scalar(v: f64) -> ParamVector {
        ParamVector::new(
            vec![v, 0.0],
            Architecture::new(vec![1, 1], Activation::Relu).unwrap(),
        )
        .unwrap()
    }

    /// Rounded to f32 like checkpoint weights; repeated sums of such values
    /// are exact in f64, so averaging copies is exactly idempotent.
    fn random(seed: u64) -> ParamVector {
        init_params(
            &Architecture::new(vec![3, 4, 2], Activation::Relu).unwrap(),
            seed,
        )
        .unwrap()
        .quantized()
    }

    #[test]
    fn interpolate_examples() {
        let (a, b) = (random(1), random(2));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), a);
        assert_eq!(
            interpolate(&scalar(2.0), &scalar(4.0), 0.5)
                .unwrap()
                .values()[0],
            3.0
        );
        let other = init_params(
            &Architecture::new(vec![3, 5, 2], Activation::Relu).unwrap(),
            0,
        )
        .unwrap();
        assert!(matches!(
            interpolate(&a, &other, 0.5),
            Err(BtmError::ArchitectureMismatch { .. })
        ));
    }

    #[test]
    fn average_examples() {
        let a = random(3);
        assert_eq!(
            average_merge(&[a.clone(), a.clone(), a.clone()]).unwrap(),
            a
        );
        let b = random(4);
        assert_eq!(
            average_merge(&[a.clone(), b.clone()]).unwrap(),
            interpolate(&a, &b, 0.5).unwrap()
        );
        let m = average_merge(&[scalar(0.0), scalar(3.0), scalar(6.0)]).unwrap();
        assert_eq!(m.values()[0], 3.0);
        assert!(matches!(average_merge(&[]), Err(BtmError::Empty(_))));
    }

    #[test]
    fn adaptive_examples() {
        let models = [random(5), random(6)];
        let avg = average_merge(&models).unwrap();
        let eq = adaptive_merge(&models, &[0.4, 0.4]).unwrap();
        for (x, y) in eq.values().iter().zip(avg.values()) {
            assert!((x - y).abs() < 1e-15);
        }
        let c = adaptive_coefficients(&[0.2, 0.6]).unwrap();
        assert!(
            (c[0] - 0.25).abs() < 1e-15 && (c[1] - 0.75).abs() < 1e-15,
            "{c:?}"
        );
        let a = adaptive_merge(&models, &[0.2, 0.6]).unwrap();
        let b = adaptive_merge(&models, &[2.0, 6.0]).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(
            adaptive_merge(&models, &[0.2, 0.0]),
            Err(BtmError::NonPositiveScore { index: 1, .. })
        ));
        assert_eq!(adaptive_merge(&models[..1], &[0.3]).unwrap(), models[0]);
    }

    #[test]
    fn greedy_soup_keeps_helpful_ingredient() {
        // Score peaks at 1.0; 0.9 and 1.1 tie alone, their average hits the
        // peak, and adding -3.0 would pull it away.
        let models = [scalar(-3.0), scalar(0.9), scalar(1.1)];
        let score = |p: &ParamVector| Ok(-(p.values()[0] - 1.0).abs());
        let soup = greedy_soup(&models, score).unwrap();
        assert_eq!(soup.kept, vec![1, 2]);
        assert_eq!(soup.params.values()[0], 1.0);
    }

    #[test]
    fn greedy_soup_rejects_harmful_ingredients() {
        let models = [scalar(5.0), scalar(1.0), scalar(-3.0)];
        let score = |p: &ParamVector| -> Result<f64> { Ok(-(p.values()[0] - 1.0).abs()) };
        // exhaustive oracle: score every non-empty subset average
        let mut best_subset = 0u32;
        let mut best_score = f64::NEG_INFINITY;
        for mask in 1u32..8 {
            let members: Vec<ParamVector> = (0..3)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| models[i].clone())
                .collect();
            let s = score(&average_merge(&members).unwrap()).unwrap();
            if s > best_score {
                best_score = s;
                best_subset = mask;
            }
        }
        assert_eq!(best_subset, 0b010, "only the single best model is optimal");
        let soup = greedy_soup(&models, score).unwrap();
        assert_eq!(soup.kept, vec![1]);
        assert_eq!(soup.params, models[1]);
        assert_eq!(soup.score, best_score);
    }

    #[test]
    fn greedy_soup_trivial_cases() {
        let a = random(7);
        let one = greedy_soup(std::slice::from_ref(&a), |_| Ok(0.5)).unwrap();
        assert_eq!(one.params, a);
        let same = greedy_soup(&[a.clone(), a.clone(), a.clone()], |p| Ok(p.values()[0])).unwrap();
        assert_eq!(same.kept, vec![0, 1, 2]);
        assert_eq!(same.params, a);
        assert!(greedy_soup(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn strategy_requires_selection_set() {
        assert!(MergeStrategy::new(MergeKind::AdaptiveH, None).is_err());
        assert!(MergeStrategy::new(MergeKind::Average, None).is_ok());
    }

    #[test]
    fn merge_kind_names_round_trip() {
        for kind in MergeKind::ALL {
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.name()));
            assert_eq!(serde_json::from_str::<MergeKind>(&json).unwrap(), kind);
        }
    }

    #[test]
    fn curve_csv_round_trip() {
        use crate::dataman::generate_gaussian_mixture;
        let test = generate_gaussian_mixture(2, 3, 2.0, 20, 1).unwrap();
        let a = random(8);
        let b = random(9);
        let curve = lambda_sweep(&a, &b, 11, &test).unwrap();
        assert_eq!(curve.lambdas.len(), 11);
        assert_eq!((curve.lambdas[0], curve.lambdas[10]), (0.0, 1.0));
        assert_eq!(curve.reports[0], evaluate_params(&b, &test).unwrap());
        assert_eq!(curve.reports[10], evaluate_params(&a, &test).unwrap());
        let rows = LambdaCurve::parse_csv(&curve.to_csv()).unwrap();
        for ((l, vals), (l0, r)) in rows.iter().zip(curve.lambdas.iter().zip(&curve.reports)) {
            assert_eq!(l, l0);
            assert_eq!(
                vals,
                &[r.h_mean, r.g_mean, r.a_mean, r.lowest_recall, r.accuracy]
            );
        }
        let flat = lambda_sweep(&a, &a, 5, &test).unwrap();
        assert!(flat.reports.iter().all(|r| r == &flat.reports[0]));
        assert!(lambda_sweep(&a, &b, 1, &test).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_is_affine(sa in any::<u64>(), sb in any::<u64>(), lambda in 0.0f64..1.0) {
            let (a, b) = (random(sa), random(sb));
            let x = interpolate(&a, &b, lambda).unwrap();
            let y = interpolate(&a, &b, 1.0 - lambda).unwrap();
            for i in 0..a.len() {
                prop_assert!((x.values()[i] + y.values()[i] - a.values()[i] - b.values()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn average_is_permutation_invariant(seeds in prop::collection::vec(any::<u64>(), 1..8), rot in 0usize..8) {
            let models: Vec<ParamVector> = seeds.iter().map(|&s| random(s)).collect();
            let mut rotated = models.clone();
            rotated.rotate_left(rot % models.len());
            let a = average_merge(&models).unwrap();
            let b = average_merge(&rotated).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(&a, &average_merge(&models).unwrap());
        }

        #[test]
        fn soup_never_below_best_single(values in prop::collection::vec(-5.0f64..5.0, 1..8), target in -5.0f64..5.0) {
            let models: Vec<ParamVector> = values.iter().map(|&v| scalar(v)).collect();
            let soup = greedy_soup(&models, |p| Ok(-(p.values()[0] - target).powi(2))).unwrap();
            prop_assert!(soup.score >= soup.best_single_score());
            prop_assert_eq!(soup.kept[0], {
                let best = soup.best_single_score();
                soup.individual_scores.iter().position(|&s| s == best).unwrap()
            });
        }
    }
}
