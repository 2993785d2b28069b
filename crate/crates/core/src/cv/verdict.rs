//! The comparison procedure: K-fold adjusted scores, the aggregated bound,
//! and the decision to prefer a model or abstain.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cv::bounds::{error_bound_adjusted, error_bound_naive, BoundReport};
use crate::cv::folds::{assignments, Scheme};
use crate::cv::scores::{cv_scores, CvScores, MissingFolds};
use crate::direct::{hajek_all, DirectEstimates};
use crate::error::{Error, Result};
use crate::models::{AreaEstimates, AreaEstimator};
use crate::rng::{derive_seed, stream};
use crate::survey::{AreaWeights, Id, SurveyDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    PreferA,
    PreferB,
    Inconclusive,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::PreferA => "prefer-a",
            Decision::PreferB => "prefer-b",
            Decision::Inconclusive => "inconclusive",
        }
    }
}

/// Prefers the smaller score when |score_a − score_b| exceeds the threshold.
pub fn decide(difference: f64, threshold: f64) -> Decision {
    if difference.abs() > threshold {
        if difference < 0.0 {
            Decision::PreferA
        } else {
            Decision::PreferB
        }
    } else {
        Decision::Inconclusive
    }
}

/// Cross-validation settings shared by comparisons and studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub scheme: Scheme,
    pub k: usize,
    /// Number of repeated two-fold splits (two-fold scheme only).
    pub resplits: usize,
    pub missing: MissingFolds,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { scheme: Scheme::Ssu, k: 5, resplits: 5, missing: MissingFolds::Drop }
    }
}

impl CvConfig {
    pub fn folds(&self) -> usize {
        if self.scheme == Scheme::Twofold {
            2
        } else {
            self.k
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaVerdict {
    pub area: Id,
    pub naive_a: f64,
    pub naive_b: f64,
    pub adjusted_a: f64,
    pub adjusted_b: f64,
    pub v_hat: f64,
    pub c_hat_a: f64,
    pub c_hat_b: f64,
    pub difference: f64,
    pub bound: f64,
    pub naive_bound: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub model_a: String,
    pub model_b: String,
    pub scheme: Scheme,
    pub k: usize,
    pub score_a: f64,
    pub score_b: f64,
    pub difference: f64,
    pub threshold: f64,
    pub decision: Decision,
    pub naive_a: f64,
    pub naive_b: f64,
    pub naive_difference: f64,
    pub naive_threshold: f64,
    pub naive_decision: Decision,
    pub per_area: Vec<AreaVerdict>,
}

impl Verdict {
    /// Per-area table with the aggregate as a final row named `aggregate`.
    pub fn write_area_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "area", "naive_a", "naive_b", "adjusted_a", "adjusted_b", "v_hat", "c_hat_a", "c_hat_b", "diff", "t_i",
            "decision",
        ])?;
        for a in &self.per_area {
            w.write_record([
                a.area.to_string(),
                a.naive_a.to_string(),
                a.naive_b.to_string(),
                a.adjusted_a.to_string(),
                a.adjusted_b.to_string(),
                a.v_hat.to_string(),
                a.c_hat_a.to_string(),
                a.c_hat_b.to_string(),
                a.difference.to_string(),
                a.bound.to_string(),
                a.decision.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_area_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_area_csv(std::fs::File::create(path)?)
    }

    /// Long-format rows (level, area, difference, bound, naive difference,
    /// naive bound) for score-versus-bound plots.
    pub fn write_plot_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model_a", "model_b", "level", "area", "difference", "bound", "naive_difference", "naive_bound", "decision"])?;
        for a in &self.per_area {
            w.write_record([
                self.model_a.clone(),
                self.model_b.clone(),
                "area".into(),
                a.area.to_string(),
                a.difference.to_string(),
                a.bound.to_string(),
                (a.naive_a - a.naive_b).to_string(),
                a.naive_bound.to_string(),
                a.decision.as_str().into(),
            ])?;
        }
        w.write_record([
            self.model_a.clone(),
            self.model_b.clone(),
            "aggregate".into(),
            String::new(),
            self.difference.to_string(),
            self.threshold.to_string(),
            self.naive_difference.to_string(),
            self.naive_threshold.to_string(),
            self.decision.as_str().into(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Builds the verdict between models `a` and `b` of `scores` using the
/// adjusted-score bound `bounds` (over the scored areas).
pub fn verdict_from_scores(scores: &CvScores, a: usize, b: usize, bounds: &BoundReport) -> Result<Verdict> {
    let mut fold_vars = BTreeMap::new();
    let mut fold_diffs = BTreeMap::new();
    for s in scores.scored_areas() {
        fold_vars.insert(s.area.clone(), vec![s.held_out_var_mean]);
        fold_diffs.insert(s.area.clone(), s.train[a].iter().zip(&s.train[b]).map(|(x, y)| x - y).collect::<Vec<_>>());
    }
    let naive_bounds = error_bound_naive(&fold_vars, &fold_diffs, &scores.q)?;
    let mut per_area = Vec::new();
    for s in scores.scored_areas() {
        let bound = bounds
            .get(&s.area)
            .ok_or_else(|| Error::Domain(format!("no bound for scored area {}", s.area)))?;
        let difference = s.adjusted[a] - s.adjusted[b];
        per_area.push(AreaVerdict {
            area: s.area.clone(),
            naive_a: s.naive[a],
            naive_b: s.naive[b],
            adjusted_a: s.adjusted[a],
            adjusted_b: s.adjusted[b],
            v_hat: s.v_hat,
            c_hat_a: s.c_hat[a],
            c_hat_b: s.c_hat[b],
            difference,
            bound,
            naive_bound: naive_bounds.get(&s.area).unwrap_or(f64::NAN),
            decision: decide(difference, bound),
        });
    }
    let difference = scores.adjusted[a] - scores.adjusted[b];
    let naive_difference = scores.naive[a] - scores.naive[b];
    Ok(Verdict {
        model_a: scores.models[a].clone(),
        model_b: scores.models[b].clone(),
        scheme: scores.scheme,
        k: scores.k,
        score_a: scores.adjusted[a],
        score_b: scores.adjusted[b],
        difference,
        threshold: bounds.aggregated,
        decision: decide(difference, bounds.aggregated),
        naive_a: scores.naive[a],
        naive_b: scores.naive[b],
        naive_difference,
        naive_threshold: naive_bounds.aggregated,
        naive_decision: decide(naive_difference, naive_bounds.aggregated),
        per_area,
    })
}

/// Everything computed while comparing two models.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub scores: CvScores,
    pub directs: DirectEstimates,
    pub full_a: AreaEstimates,
    pub full_b: AreaEstimates,
    pub bounds: BoundReport,
    pub verdict: Verdict,
}

/// Seed of the full-sample fits used for the bound.
pub fn full_fit_seed(seed: u64) -> u64 {
    derive_seed(seed, &[stream::FULL_FIT])
}

/// Seed of the fold assignment.
pub fn fold_seed(seed: u64) -> u64 {
    derive_seed(seed, &[stream::FOLDS])
}

pub fn compare_detailed(
    dataset: &SurveyDataset,
    model_a: &dyn AreaEstimator,
    model_b: &dyn AreaEstimator,
    cv: &CvConfig,
    q: &AreaWeights,
    seed: u64,
) -> Result<Comparison> {
    let splits = assignments(dataset, cv.scheme, cv.k, cv.resplits, fold_seed(seed))?;
    let scores = cv_scores(dataset, &splits, &[model_a, model_b], q, cv.missing, seed)?;
    let directs = hajek_all(dataset);
    let (full_a, full_b) = rayon::join(
        || model_a.estimate(dataset, full_fit_seed(seed)),
        || model_b.estimate(dataset, full_fit_seed(seed)),
    );
    let (full_a, full_b) = (full_a?, full_b?);
    let bounds = error_bound_adjusted(&directs, &full_a, &full_b, &scores.q)?;
    let verdict = verdict_from_scores(&scores, 0, 1, &bounds)?;
    Ok(Comparison { scores, directs, full_a, full_b, bounds, verdict })
}

/// Adjusted scores of both models, the aggregated bound t_q, and the
/// resulting decision.
pub fn compare_models(
    dataset: &SurveyDataset,
    model_a: &dyn AreaEstimator,
    model_b: &dyn AreaEstimator,
    cv: &CvConfig,
    q: &AreaWeights,
    seed: u64,
) -> Result<Verdict> {
    compare_detailed(dataset, model_a, model_b, cv, q, seed).map(|c| c.verdict)
}
