//! Monte Carlo diagnostics that need the population truth: the remainder of
//! the score difference, the leave-one-area-out gap decomposition, the
//! unbiasedness of the training-error estimate, and direct-estimate
//! calibration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::folds::{assignments, FoldAssignment};
use crate::direct::hajek_all;
use crate::error::{Error, Result};
use crate::models::AreaEstimator;
use crate::rng::{derive_seed, stream};
use crate::sim::config::ScenarioConfig;
use crate::sim::design::draw_survey;
use crate::sim::population::SyntheticPopulation;
use crate::sim::study::{replicate_seed, ReplicateResult, MIN_REMAINDER_REPLICATES};
use crate::survey::Id;

/// Fewest partition draws per survey accepted by [`training_mse_check`].
pub const MIN_PARTITION_DRAWS: usize = 100;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Variance with denominator n − 1.
fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn model_position(names: &[String], name: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Config(format!("model {name} is not part of the study")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderArea {
    pub area: Id,
    pub replicates: usize,
    /// −2·sample-cov(b̂, d̂_a − d̂_b) across replicates.
    pub remainder_estimate: f64,
    pub bound_median: f64,
    pub bound_min: f64,
    pub bound_max: f64,
    /// Replicates whose bound is below |ê|.
    pub replicates_below: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderReport {
    pub model_a: String,
    pub model_b: String,
    pub areas: Vec<RemainderArea>,
    /// Areas with |ê| above the median bound.
    pub median_violations: usize,
    /// Areas with |ê| above the largest bound.
    pub max_violations: usize,
}

/// Cross-replicate estimate of the remainder of the score difference between
/// `a` and `b`, set against the per-replicate bounds t_i.
pub fn remainder_check(model_names: &[String], replicates: &[ReplicateResult], a: &str, b: &str) -> Result<RemainderReport> {
    if replicates.len() < MIN_REMAINDER_REPLICATES {
        return Err(Error::Config(format!(
            "the remainder check needs at least {MIN_REMAINDER_REPLICATES} replicates, got {}",
            replicates.len()
        )));
    }
    let (ia, ib) = (model_position(model_names, a)?, model_position(model_names, b)?);
    let pair = replicates[0]
        .pairs
        .iter()
        .position(|p| p.verdict.model_a == a && p.verdict.model_b == b);
    let areas: Vec<Id> = replicates[0].areas.iter().map(|r| r.area.clone()).collect();
    let mut out = Vec::new();
    for (i, area) in areas.iter().enumerate() {
        let mut held_out_bias = Vec::new();
        let mut d_diff = Vec::new();
        let mut bounds = Vec::new();
        for r in replicates {
            let row = &r.areas[i];
            if !row.scored {
                continue;
            }
            held_out_bias.push(row.held_out_bias);
            d_diff.push(row.models[ia].train_bias - row.models[ib].train_bias);
            if let Some(p) = pair {
                if let Some(v) = r.pairs[p].verdict.per_area.iter().find(|v| v.area == *area) {
                    bounds.push(v.bound);
                }
            } else {
                let vd = row.direct_variance.unwrap_or(f64::NAN);
                bounds.push(crate::cv::bounds::adjusted_bound(vd, row.models[ia].variance, row.models[ib].variance));
            }
        }
        if held_out_bias.len() < 2 {
            continue;
        }
        let remainder_estimate = -2.0 * sample_cov(&held_out_bias, &d_diff);
        out.push(RemainderArea {
            area: area.clone(),
            replicates: held_out_bias.len(),
            remainder_estimate,
            bound_median: median(&bounds),
            bound_min: bounds.iter().copied().fold(f64::INFINITY, f64::min),
            bound_max: bounds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            replicates_below: bounds.iter().filter(|&&t| t < remainder_estimate.abs()).count(),
        });
    }
    Ok(RemainderReport {
        model_a: a.to_string(),
        model_b: b.to_string(),
        median_violations: out.iter().filter(|r| r.remainder_estimate.abs() > r.bound_median).count(),
        max_violations: out.iter().filter(|r| r.remainder_estimate.abs() > r.bound_max).count(),
        areas: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaoGapArea {
    pub area: Id,
    pub replicates: usize,
    /// mean (loao − θ)² − mean (full − θ)².
    pub mse_difference: f64,
    /// var(loao) − var(full), sample variances across replicates.
    pub variance_difference: f64,
    /// (mean loao − θ)² − (mean full − θ)².
    pub squared_bias_difference: f64,
    /// Monte Carlo standard error of `mse_difference`.
    pub standard_error: f64,
    /// Both sides agree within three standard errors.
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaoGapReport {
    pub model: String,
    pub areas: Vec<LoaoGapArea>,
    /// Population-weighted (by the replicates' weights) mean of the per-area
    /// MSE differences.
    pub aggregated_gap: f64,
}

/// Both sides of the decomposition of extrapolation minus smoothing MSE
/// into a variance difference and a squared-bias difference.
pub fn loao_gap_check(model_names: &[String], replicates: &[ReplicateResult], model: &str) -> Result<LoaoGapReport> {
    let m = model_position(model_names, model)?;
    if replicates.len() < 2 {
        return Err(Error::Config("the leave-one-area-out gap needs at least two replicates".into()));
    }
    let n_areas = replicates[0].areas.len();
    let mut areas = Vec::new();
    let mut aggregated_gap = 0.0;
    let mut weight_total = 0.0;
    for i in 0..n_areas {
        let truth = replicates[0].areas[i].truth;
        let mut loao = Vec::new();
        let mut full = Vec::new();
        let mut weight = 0.0;
        for r in replicates {
            let row = &r.areas[i];
            if let Some(p) = row.models[m].loao_prediction {
                loao.push(p);
                full.push(row.models[m].mean);
                weight += row.q;
            }
        }
        if loao.len() < 2 {
            continue;
        }
        let n = loao.len() as f64;
        let diffs: Vec<f64> = loao.iter().zip(&full).map(|(l, f)| (l - truth).powi(2) - (f - truth).powi(2)).collect();
        let mse_difference = mean(&diffs);
        let variance_difference = sample_var(&loao) - sample_var(&full);
        let squared_bias_difference = (mean(&loao) - truth).powi(2) - (mean(&full) - truth).powi(2);
        let standard_error = (sample_var(&diffs) / n).sqrt();
        let rhs = variance_difference + squared_bias_difference;
        areas.push(LoaoGapArea {
            area: replicates[0].areas[i].area.clone(),
            replicates: loao.len(),
            mse_difference,
            variance_difference,
            squared_bias_difference,
            standard_error,
            agrees: (mse_difference - rhs).abs() <= 3.0 * standard_error + 1e-12,
        });
        aggregated_gap += weight * mse_difference;
        weight_total += weight;
    }
    if weight_total > 0.0 {
        aggregated_gap /= weight_total;
    }
    Ok(LoaoGapReport { model: model.to_string(), areas, aggregated_gap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMseArea {
    pub area: Id,
    pub surveys: usize,
    /// Mean over surveys of the estimate m̂_S.
    pub estimate_mean: f64,
    /// Monte Carlo standard error of `estimate_mean`.
    pub estimate_se: f64,
    /// Mean over surveys of the training error from an independent set of
    /// partitions.
    pub oracle: f64,
    pub relative_bias: f64,
    /// |estimate_mean − oracle| in units of `estimate_se`.
    pub z: f64,
    /// Mean over surveys of b_i, the conditional bias of the held-out direct.
    pub held_out_bias_mean: f64,
    pub held_out_bias_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMseReport {
    pub model: String,
    pub surveys: usize,
    pub partitions: usize,
    pub areas: Vec<TrainingMseArea>,
}

/// Per-survey conditional moments of one area over a set of partitions.
#[derive(Debug, Clone, Copy, Default)]
struct PartitionMoments {
    n: usize,
    held: f64,
    held_sq: f64,
    train: f64,
    train_sq: f64,
    cross: f64,
}

impl PartitionMoments {
    fn add(&mut self, h: f64, t: f64) {
        self.n += 1;
        self.held += h;
        self.held_sq += h * h;
        self.train += t;
        self.train_sq += t * t;
        self.cross += h * t;
    }

    /// m̂_S = E(t − h)² − v − b² + 2c + 2·b·d with every moment taken over
    /// the partitions of S, and b, d measured against `truth`.
    fn estimate(&self, truth: f64) -> (f64, f64) {
        let n = self.n as f64;
        let (mh, mt) = (self.held / n, self.train / n);
        let v = self.held_sq / n - mh * mh;
        let c = self.cross / n - mh * mt;
        let sq = (self.train_sq - 2.0 * self.cross + self.held_sq) / n;
        let b = mh - truth;
        let d = mt - truth;
        (sq - v - b * b + 2.0 * c + 2.0 * b * d, b)
    }
}

/// Training fit of `model` and held-out directs on partition `fold` of
/// `assignment`.
fn partition_values(
    dataset: &crate::survey::SurveyDataset,
    assignment: &FoldAssignment,
    model: &dyn AreaEstimator,
    seed: u64,
) -> Result<(Vec<Option<f64>>, Vec<f64>)> {
    let held = hajek_all(&assignment.held_out(dataset, 0)?);
    let fit = model.estimate(&assignment.training(dataset, 0), seed)?;
    Ok((held.estimates.iter().map(|e| e.as_ref().map(|e| e.point)).collect(), fit.mean))
}

/// For every survey S: the estimate m̂_S of the training error from
/// `partitions` random partitions, and the training error itself from an
/// independent set of `partitions` partitions. Partitions take one fold of a
/// random K-fold assignment (scheme and K from `config.cv`) as the held-out
/// part. The survey count is `config.replicates`.
pub fn training_mse_check(
    population: &SyntheticPopulation,
    config: &ScenarioConfig,
    model: &dyn AreaEstimator,
    partitions: usize,
) -> Result<TrainingMseReport> {
    config.validate()?;
    if partitions < MIN_PARTITION_DRAWS {
        return Err(Error::Config(format!(
            "need at least {MIN_PARTITION_DRAWS} partition draws, got {partitions}"
        )));
    }
    let surveys = config.replicates;
    if surveys < 2 {
        return Err(Error::Config("need at least two surveys".into()));
    }
    let areas = population.area_ids();
    let per_survey: Vec<Result<Vec<Option<(f64, f64, f64)>>>> = (0..surveys)
        .into_par_iter()
        .map(|s| {
            let seed = replicate_seed(config.master_seed, s);
            let dataset = draw_survey(population, config, seed)?;
            let mut estimate = vec![PartitionMoments::default(); areas.len()];
            let mut oracle = vec![(0.0, 0usize); areas.len()];
            for set in 0..2u64 {
                for p in 0..partitions {
                    let pseed = derive_seed(seed, &[stream::ORACLE, set, p as u64]);
                    let split = assignments(&dataset, config.cv.scheme, config.cv.folds(), 1, pseed)?;
                    let (held, train) = partition_values(&dataset, &split[0], model, pseed)?;
                    for (i, area) in areas.iter().enumerate() {
                        let j = dataset.area_index(area).expect("declared area");
                        let t = train[j];
                        if !t.is_finite() {
                            continue;
                        }
                        if set == 0 {
                            if let Some(h) = held[j] {
                                estimate[i].add(h, t);
                            }
                        } else {
                            let truth = population.truth[area];
                            oracle[i].0 += (t - truth).powi(2);
                            oracle[i].1 += 1;
                        }
                    }
                }
            }
            Ok(areas
                .iter()
                .enumerate()
                .map(|(i, area)| {
                    (estimate[i].n >= 2 && oracle[i].1 > 0).then(|| {
                        let (m_hat, b) = estimate[i].estimate(population.truth[area]);
                        (m_hat, oracle[i].0 / oracle[i].1 as f64, b)
                    })
                })
                .collect())
        })
        .collect();
    let per_survey = per_survey.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (i, area) in areas.iter().enumerate() {
        let rows: Vec<(f64, f64, f64)> = per_survey.iter().filter_map(|s| s[i]).collect();
        if rows.len() < 2 {
            continue;
        }
        let m: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let o: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let n = rows.len() as f64;
        let estimate_mean = mean(&m);
        let estimate_se = (sample_var(&m) / n).sqrt();
        let oracle = mean(&o);
        out.push(TrainingMseArea {
            area: area.clone(),
            surveys: rows.len(),
            estimate_mean,
            estimate_se,
            oracle,
            relative_bias: (estimate_mean - oracle) / oracle,
            z: (estimate_mean - oracle).abs() / estimate_se,
            held_out_bias_mean: mean(&b),
            held_out_bias_se: (sample_var(&b) / n).sqrt(),
        });
    }
    Ok(TrainingMseReport { model: model.label().to_string(), surveys, partitions, areas: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArea {
    pub area: Id,
    pub truth: f64,
    pub surveys: usize,
    /// Smallest number of sampled clusters in the area over the surveys.
    pub min_psus: usize,
    pub bias: f64,
    pub bias_se: f64,
    pub empirical_variance: f64,
    pub mean_design_variance: f64,
    /// Fraction of surveys whose point ± 1.96·√variance covers the truth.
    pub coverage: f64,
}

/// Repeated surveys from a fixed population: bias, variance and interval
/// coverage of the Hájek estimate per area.
pub fn direct_calibration(population: &SyntheticPopulation, config: &ScenarioConfig, surveys: usize) -> Result<Vec<CalibrationArea>> {
    config.validate()?;
    let areas = population.area_ids();
    let per_survey: Vec<Vec<Option<(f64, f64, usize)>>> = (0..surveys)
        .into_par_iter()
        .map(|s| {
            let dataset = draw_survey(population, config, replicate_seed(config.master_seed, s))?;
            let directs = hajek_all(&dataset);
            Ok(areas
                .iter()
                .map(|a| directs.get(a).map(|d| (d.point, d.variance, d.n_psus)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, area) in areas.iter().enumerate() {
        let rows: Vec<(f64, f64, usize)> = per_survey.iter().filter_map(|s| s[i]).collect();
        if rows.len() < 2 {
            continue;
        }
        let truth = population.truth[area];
        let points: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let vars: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let n = rows.len() as f64;
        let covered = rows.iter().filter(|r| (r.0 - truth).abs() <= 1.96 * r.1.sqrt()).count();
        out.push(CalibrationArea {
            area: area.clone(),
            truth,
            surveys: rows.len(),
            min_psus: rows.iter().map(|r| r.2).min().unwrap_or(0),
            bias: mean(&points) - truth,
            bias_se: (sample_var(&points) / n).sqrt(),
            empirical_variance: sample_var(&points),
            mean_design_variance: mean(&vars),
            coverage: covered as f64 / n,
        });
    }
    Ok(out)
}
