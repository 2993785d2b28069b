//! Naive and adjusted K-fold scores.
//!
//! For area i with held-out directs h_k and training estimates t_k:
//! naive = mean_k (t_k − h_k)², v̂ = mean_k (h_k − h̄)²,
//! ĉ = mean_k (h_k − h̄)(t_k − t̄), adjusted = naive − v̂ + 2ĉ.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::folds::{FoldAssignment, Scheme};
use crate::direct::hajek_all;
use crate::error::{Error, Result};
use crate::models::AreaEstimator;
use crate::rng::{derive_seed, stream};
use crate::survey::{AreaWeights, Id, SurveyDataset};

/// Handling of areas that lack held-out data in some fold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingFolds {
    /// Score only areas valid in every fold; q is renormalised over them.
    #[default]
    Drop,
    /// Average over the valid folds only.
    Partial,
}

/// Held-out direct estimates and training-fit estimates for every fold of
/// one assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResults {
    pub k: usize,
    pub areas: Vec<Id>,
    pub models: Vec<String>,
    /// [fold][area] held-out Hájek estimate.
    pub held_out: Vec<Vec<Option<f64>>>,
    /// [fold][area] design variance of the held-out estimate.
    pub held_out_var: Vec<Vec<Option<f64>>>,
    /// [model][fold][area] training posterior mean.
    pub train_mean: Vec<Vec<Vec<f64>>>,
    /// [model][fold][area] training posterior variance.
    pub train_var: Vec<Vec<Vec<f64>>>,
}

/// Seed of the fits on the training part of `fold`. It does not depend on the
/// model, so identical models give identical results and differences between
/// models use common random numbers.
pub fn fold_fit_seed(seed: u64, replicate: usize, fold: usize) -> u64 {
    derive_seed(seed, &[stream::FIT, replicate as u64, fold as u64])
}

/// Computes held-out directs and fits every model on every training set.
pub fn run_folds(
    dataset: &SurveyDataset,
    assignment: &FoldAssignment,
    models: &[&dyn AreaEstimator],
    seed: u64,
) -> Result<FoldResults> {
    let k = assignment.k;
    let mut held_out = Vec::with_capacity(k);
    let mut held_out_var = Vec::with_capacity(k);
    for fold in 0..k {
        let directs = hajek_all(&assignment.held_out(dataset, fold)?);
        held_out.push(directs.estimates.iter().map(|e| e.as_ref().map(|e| e.point)).collect());
        held_out_var.push(directs.estimates.iter().map(|e| e.as_ref().map(|e| e.variance)).collect());
    }
    let replicate = assignment.replicate.unwrap_or(0);
    let trainings: Vec<SurveyDataset> = (0..k).map(|fold| assignment.training(dataset, fold)).collect();
    let tasks: Vec<(usize, usize)> = (0..models.len()).flat_map(|m| (0..k).map(move |f| (m, f))).collect();
    let fits: Vec<Result<(Vec<f64>, Vec<f64>)>> = tasks
        .par_iter()
        .map(|&(m, fold)| {
            let est = models[m]
                .estimate(&trainings[fold], fold_fit_seed(seed, replicate, fold))
                .map_err(|e| Error::Fit(format!("fold {fold}, model {}: {e}", models[m].label())))?;
            Ok((est.mean, est.variance))
        })
        .collect();
    let mut train_mean = vec![Vec::with_capacity(k); models.len()];
    let mut train_var = vec![Vec::with_capacity(k); models.len()];
    for (&(m, _), fit) in tasks.iter().zip(fits) {
        let (mean, var) = fit?;
        train_mean[m].push(mean);
        train_var[m].push(var);
    }
    Ok(FoldResults {
        k,
        areas: dataset.area_ids().to_vec(),
        models: models.iter().map(|m| m.label().to_string()).collect(),
        held_out,
        held_out_var,
        train_mean,
        train_var,
    })
}

/// Score terms of one area for one model over the given folds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terms {
    pub naive: f64,
    pub v_hat: f64,
    pub c_hat: f64,
}

/// naive, v̂ and ĉ from paired held-out directs and training estimates.
pub fn score_terms(held_out: &[f64], train: &[f64]) -> Terms {
    let n = held_out.len() as f64;
    let mean_h = held_out.iter().sum::<f64>() / n;
    let mean_t = train.iter().sum::<f64>() / n;
    let mut naive = 0.0;
    let mut v_hat = 0.0;
    let mut c_hat = 0.0;
    for (&h, &t) in held_out.iter().zip(train) {
        naive += (t - h) * (t - h);
        v_hat += (h - mean_h) * (h - mean_h);
        c_hat += (h - mean_h) * (t - mean_t);
    }
    Terms { naive: naive / n, v_hat: v_hat / n, c_hat: c_hat / n }
}

pub fn adjusted_score(terms: Terms) -> f64 {
    terms.naive - terms.v_hat + 2.0 * terms.c_hat
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaScore {
    pub area: Id,
    pub valid_folds: usize,
    pub total_folds: usize,
    pub scored: bool,
    /// Per model.
    pub naive: Vec<f64>,
    pub v_hat: f64,
    /// Per model.
    pub c_hat: Vec<f64>,
    /// Per model.
    pub adjusted: Vec<f64>,
    /// Mean over valid folds of the held-out design variance.
    pub held_out_var_mean: f64,
    /// [model][valid fold] training estimates, concatenated over splits.
    pub train: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScores {
    pub models: Vec<String>,
    pub k: usize,
    pub scheme: Scheme,
    pub policy: MissingFolds,
    pub areas: Vec<AreaScore>,
    /// Aggregation weights renormalised over the scored areas.
    pub q: AreaWeights,
    /// Aggregated naive score per model.
    pub naive: Vec<f64>,
    /// Aggregated adjusted score per model.
    pub adjusted: Vec<f64>,
}

impl CvScores {
    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m == name)
    }

    pub fn scored_areas(&self) -> impl Iterator<Item = &AreaScore> {
        self.areas.iter().filter(|a| a.scored)
    }
}

/// Combines fold results of one K-fold split, or of repeated two-fold splits
/// whose terms are averaged before the adjusted score is formed.
pub fn score_folds(results: &[FoldResults], scheme: Scheme, q: &AreaWeights, policy: MissingFolds) -> Result<CvScores> {
    let first = results.first().ok_or_else(|| Error::Domain("no fold results to score".into()))?;
    let n_models = first.models.len();
    let mut areas = Vec::with_capacity(first.areas.len());
    for (i, area) in first.areas.iter().enumerate() {
        let mut valid_total = 0;
        let mut total = 0;
        let mut sums = vec![(0.0, 0.0); n_models];
        let mut v_sum = 0.0;
        let mut splits_used = 0usize;
        let mut var_sum = 0.0;
        let mut train: Vec<Vec<f64>> = vec![Vec::new(); n_models];
        let mut complete = true;
        for res in results {
            total += res.k;
            let valid: Vec<usize> = (0..res.k)
                .filter(|&f| res.held_out[f][i].is_some() && (0..n_models).all(|m| res.train_mean[m][f][i].is_finite()))
                .collect();
            if valid.len() < res.k {
                complete = false;
            }
            valid_total += valid.len();
            if valid.is_empty() {
                continue;
            }
            splits_used += 1;
            let held: Vec<f64> = valid.iter().map(|&f| res.held_out[f][i].expect("valid fold")).collect();
            var_sum += valid.iter().map(|&f| res.held_out_var[f][i].unwrap_or(0.0)).sum::<f64>();
            let mut v_here = 0.0;
            for m in 0..n_models {
                let t: Vec<f64> = valid.iter().map(|&f| res.train_mean[m][f][i]).collect();
                let terms = score_terms(&held, &t);
                sums[m].0 += terms.naive;
                sums[m].1 += terms.c_hat;
                v_here = terms.v_hat;
                train[m].extend(t);
            }
            if n_models == 0 {
                v_here = score_terms(&held, &held).v_hat;
            }
            v_sum += v_here;
        }
        let scored = match policy {
            MissingFolds::Drop => complete,
            MissingFolds::Partial => splits_used > 0,
        };
        let denom = splits_used.max(1) as f64;
        let v_hat = v_sum / denom;
        let naive: Vec<f64> = sums.iter().map(|s| s.0 / denom).collect();
        let c_hat: Vec<f64> = sums.iter().map(|s| s.1 / denom).collect();
        let adjusted = naive
            .iter()
            .zip(&c_hat)
            .map(|(&n, &c)| adjusted_score(Terms { naive: n, v_hat, c_hat: c }))
            .collect();
        areas.push(AreaScore {
            area: area.clone(),
            valid_folds: valid_total,
            total_folds: total,
            scored,
            naive,
            v_hat,
            c_hat,
            adjusted,
            held_out_var_mean: if valid_total > 0 { var_sum / valid_total as f64 } else { f64::NAN },
            train,
        });
    }
    let scored: Vec<&Id> = areas.iter().filter(|a| a.scored).map(|a| &a.area).collect();
    if scored.is_empty() {
        return Err(Error::Domain("no area has held-out data in every fold".into()));
    }
    let q_used = q.restricted(scored)?;
    let aggregate = |pick: &dyn Fn(&AreaScore) -> f64| -> f64 {
        areas.iter().filter(|a| a.scored).map(|a| q_used.get(&a.area).expect("scored area weighted") * pick(a)).sum()
    };
    let naive = (0..n_models).map(|m| aggregate(&|a| a.naive[m])).collect();
    let adjusted = (0..n_models).map(|m| aggregate(&|a| a.adjusted[m])).collect();
    Ok(CvScores {
        models: first.models.clone(),
        k: first.k,
        scheme,
        policy,
        areas,
        q: q_used,
        naive,
        adjusted,
    })
}

/// Runs every fold of every assignment and scores the models.
pub fn cv_scores(
    dataset: &SurveyDataset,
    assignments: &[FoldAssignment],
    models: &[&dyn AreaEstimator],
    q: &AreaWeights,
    policy: MissingFolds,
    seed: u64,
) -> Result<CvScores> {
    let scheme = assignments.first().map(|a| a.scheme).ok_or_else(|| Error::Domain("no fold assignment".into()))?;
    let results = assignments
        .iter()
        .map(|a| run_folds(dataset, a, models, seed))
        .collect::<Result<Vec<_>>>()?;
    score_folds(&results, scheme, q, policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_fold_constant_model_by_hand() {
        let t = score_terms(&[0.4, 0.6], &[0.5, 0.5]);
        assert!((t.naive - 0.01).abs() < 1e-15);
        assert!((t.v_hat - 0.01).abs() < 1e-15);
        assert_eq!(t.c_hat, 0.0);
        assert!(adjusted_score(t).abs() < 1e-15);
    }

    #[test]
    fn perfect_tracking_gives_v_hat() {
        let h = [0.2, 0.5, 0.4, 0.35, 0.6];
        let t = score_terms(&h, &h);
        assert_eq!(t.naive, 0.0);
        assert!((adjusted_score(t) - t.v_hat).abs() < 1e-15);
    }
}
