//! Replicate studies: repeated surveys from one population, every model
//! scored by cross-validation and compared against the known truth.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::folds::assignments;
use crate::cv::loao::loao_score;
use crate::cv::scores::{run_folds, score_folds, FoldResults};
use crate::cv::verdict::{decide, fold_seed, full_fit_seed, verdict_from_scores, Decision, Verdict};
use crate::cv::{error_bound_adjusted, CvScores};
use crate::direct::{hajek_all, DirectEstimates};
use crate::error::{Error, Result};
use crate::models::{AreaEstimates, AreaEstimator};
use crate::rng::{derive_seed, stream};
use crate::sim::checks::{loao_gap_check, remainder_check, LoaoGapReport, RemainderReport};
use crate::sim::config::ScenarioConfig;
use crate::sim::design::draw_survey;
use crate::sim::frame::build_frame;
use crate::sim::population::{generate_population, SyntheticPopulation};
use crate::survey::{area_weights, AreaWeights, Id, SurveyDataset};

/// Largest fraction of replicates allowed to fail before a study fails.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// Fewest replicates for which the remainder check is reported.
pub const MIN_REMAINDER_REPLICATES: usize = 30;

pub fn replicate_seed(master_seed: u64, replicate: usize) -> u64 {
    derive_seed(master_seed, &[stream::REPLICATE, replicate as u64])
}

/// Per-model quantities of one area in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaModel {
    pub mean: f64,
    pub variance: f64,
    /// (full-sample mean − truth)².
    pub full_error: f64,
    /// Mean over valid folds of (training mean − truth)².
    pub train_error: f64,
    /// Mean over valid folds of training mean − truth.
    pub train_bias: f64,
    pub naive: f64,
    pub adjusted: f64,
    pub loao_prediction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaReplicate {
    pub area: Id,
    pub truth: f64,
    /// Aggregation weight among scored areas; 0 when not scored.
    pub q: f64,
    pub scored: bool,
    pub direct: Option<f64>,
    pub direct_variance: Option<f64>,
    /// Mean over valid folds of held-out direct − truth.
    pub held_out_bias: f64,
    /// Per model, in configuration order.
    pub models: Vec<AreaModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReplicate {
    pub model: String,
    /// Σ q_i (full-sample mean − truth)² over scored areas.
    pub full_oracle: f64,
    /// Mean over folds of Σ q_i (training mean − truth)².
    pub train_oracle: f64,
    pub naive: f64,
    pub adjusted: f64,
    pub loao: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReplicate {
    pub verdict: Verdict,
    /// full_oracle(a) − full_oracle(b).
    pub oracle_full_diff: f64,
    pub oracle_train_diff: f64,
    /// Per scored area, aligned with `verdict.per_area`.
    pub area_oracle_full_diff: Vec<f64>,
    pub area_oracle_train_diff: Vec<f64>,
    /// loao(a) − loao(b) when both models are scored by leave-one-area-out.
    pub loao_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub models: Vec<ModelReplicate>,
    pub pairs: Vec<PairReplicate>,
    pub areas: Vec<AreaReplicate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    /// Mean over replicates of the full-sample oracle error.
    pub full_mse: f64,
    pub train_mse: f64,
    pub mean_naive: f64,
    pub mean_adjusted: f64,
    /// Mean |adjusted − training oracle|.
    pub mean_abs_adjusted_train_gap: f64,
    /// Mean |training oracle − full-sample oracle|.
    pub mean_abs_train_full_gap: f64,
    pub mean_loao: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub model_a: String,
    pub model_b: String,
    /// Fraction of replicates where the score difference has the sign of the
    /// full-sample oracle difference.
    pub fraction_correct_sign: f64,
    pub fraction_correct_sign_training: f64,
    pub fraction_conclusive: f64,
    pub fraction_prefer_a: f64,
    pub fraction_prefer_b: f64,
    /// Replicates where |difference − training oracle difference| > t_q.
    pub bound_violations: usize,
    pub mean_difference: f64,
    pub mean_threshold: f64,
    pub naive_fraction_conclusive: f64,
    /// Fraction of replicates where leave-one-area-out gives a smaller score
    /// to model a.
    pub loao_fraction_prefer_a: Option<f64>,
    pub loao_fraction_prefer_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub replicates_requested: usize,
    pub replicates_completed: usize,
    pub failures: Vec<ReplicateFailure>,
    pub truth: BTreeMap<Id, f64>,
    pub models: Vec<ModelSummary>,
    pub pairs: Vec<PairSummary>,
    /// Remainder estimates per pair; present with enough replicates.
    pub remainder: Vec<RemainderReport>,
    pub loao_gap: Vec<LoaoGapReport>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub model_names: Vec<String>,
    pub population: SyntheticPopulation,
    pub replicates: Vec<ReplicateResult>,
    pub summary: StudySummary,
}

struct PairIndex {
    a: usize,
    b: usize,
}

/// Frame and population of a scenario, both from the master seed.
pub fn scenario_population(config: &ScenarioConfig) -> Result<SyntheticPopulation> {
    let frame = build_frame(config, config.master_seed)?;
    generate_population(&frame, config, config.master_seed)
}

pub fn study_weights(config: &ScenarioConfig, dataset: &SurveyDataset, population: &SyntheticPopulation) -> Result<AreaWeights> {
    area_weights(config.q_mode, dataset, Some(&population.area_sizes))
}

/// Runs the study on `jobs` worker threads (0 = rayon default). Results are
/// independent of the thread count.
pub fn run_study(config: &ScenarioConfig, jobs: usize) -> Result<StudyReport> {
    config.validate()?;
    if config.models.is_empty() {
        return Err(Error::Config("a study needs at least one model".into()));
    }
    let population = scenario_population(config)?;
    run_study_on(config, &population, jobs)
}

pub fn run_study_on(config: &ScenarioConfig, population: &SyntheticPopulation, jobs: usize) -> Result<StudyReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    let outcomes: Vec<Result<ReplicateResult>> = pool.install(|| {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| {
                let out = run_replicate(config, population, r);
                match &out {
                    Ok(_) => log::info!("replicate {} of {} done", r + 1, config.replicates),
                    Err(e) => log::warn!("replicate {r} failed: {e}"),
                }
                out
            })
            .collect()
    });
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (r, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(res) => replicates.push(res),
            Err(e) => failures.push(ReplicateFailure { replicate: r, error: e.to_string() }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * config.replicates as f64 || replicates.is_empty() {
        return Err(Error::Fit(format!(
            "{} of {} replicates failed; first: {}",
            failures.len(),
            config.replicates,
            failures.first().map(|f| f.error.as_str()).unwrap_or("none")
        )));
    }
    let model_names: Vec<String> = config.models.iter().map(|m| m.name.clone()).collect();
    let summary = summarise(config, population, &model_names, &replicates, failures)?;
    Ok(StudyReport { model_names, population: population.clone(), replicates, summary })
}

fn pair_indices(config: &ScenarioConfig) -> Vec<PairIndex> {
    let pos = |n: &str| config.models.iter().position(|m| m.name == n).expect("validated pair");
    config.pairs.iter().map(|p| PairIndex { a: pos(&p.a), b: pos(&p.b) }).collect()
}

/// Valid folds of area i: held-out data present and every training fit finite.
fn valid_folds(res: &FoldResults, i: usize) -> impl Iterator<Item = usize> + '_ {
    (0..res.k).filter(move |&f| res.held_out[f][i].is_some() && res.train_mean.iter().all(|m| m[f][i].is_finite()))
}

/// One replicate survey and everything computed from it.
pub fn run_replicate(config: &ScenarioConfig, population: &SyntheticPopulation, replicate: usize) -> Result<ReplicateResult> {
    let seed = replicate_seed(config.master_seed, replicate);
    let dataset = draw_survey(population, config, seed)?;
    let q_all = study_weights(config, &dataset, population)?;
    let models: Vec<&dyn AreaEstimator> = config.models.iter().map(|m| m as &dyn AreaEstimator).collect();
    let directs = hajek_all(&dataset);

    let full: Vec<AreaEstimates> = models
        .par_iter()
        .map(|m| m.estimate(&dataset, full_fit_seed(seed)))
        .collect::<Result<_>>()?;
    let splits = assignments(&dataset, config.cv.scheme, config.cv.k, config.cv.resplits, fold_seed(seed))?;
    let fold_results = splits
        .iter()
        .map(|a| run_folds(&dataset, a, &models, seed))
        .collect::<Result<Vec<_>>>()?;
    let scores = score_folds(&fold_results, config.cv.scheme, &q_all, config.cv.missing)?;

    let mut loao = vec![None; models.len()];
    for name in &config.loao_models {
        let m = config.models.iter().position(|s| &s.name == name).expect("validated model");
        loao[m] = Some(loao_score(&dataset, models[m], &q_all, seed)?);
    }

    let areas = area_rows(population, &dataset, &directs, &full, &fold_results, &scores, &loao)?;
    let model_rows = (0..models.len())
        .map(|m| {
            let (full_oracle, train_oracle) = areas
                .iter()
                .filter(|a| a.scored)
                .fold((0.0, 0.0), |(f, t), a| (f + a.q * a.models[m].full_error, t + a.q * a.models[m].train_error));
            ModelReplicate {
                model: config.models[m].name.clone(),
                full_oracle,
                train_oracle,
                naive: scores.naive[m],
                adjusted: scores.adjusted[m],
                loao: loao[m].as_ref().map(|l| l.aggregated),
            }
        })
        .collect::<Vec<_>>();

    let mut pairs = Vec::new();
    for p in pair_indices(config) {
        let bounds = error_bound_adjusted(&directs, &full[p.a], &full[p.b], &scores.q)?;
        let verdict = verdict_from_scores(&scores, p.a, p.b, &bounds)?;
        let by_area: BTreeMap<&Id, &AreaReplicate> = areas.iter().map(|a| (&a.area, a)).collect();
        let area_oracle_full_diff = verdict
            .per_area
            .iter()
            .map(|v| {
                let a = by_area[&v.area];
                a.models[p.a].full_error - a.models[p.b].full_error
            })
            .collect();
        let area_oracle_train_diff = verdict
            .per_area
            .iter()
            .map(|v| {
                let a = by_area[&v.area];
                a.models[p.a].train_error - a.models[p.b].train_error
            })
            .collect();
        pairs.push(PairReplicate {
            oracle_full_diff: model_rows[p.a].full_oracle - model_rows[p.b].full_oracle,
            oracle_train_diff: model_rows[p.a].train_oracle - model_rows[p.b].train_oracle,
            area_oracle_full_diff,
            area_oracle_train_diff,
            loao_diff: match (model_rows[p.a].loao, model_rows[p.b].loao) {
                (Some(x), Some(y)) => Some(x - y),
                _ => None,
            },
            verdict,
        });
    }
    Ok(ReplicateResult { replicate, seed, models: model_rows, pairs, areas })
}

#[allow(clippy::too_many_arguments)]
fn area_rows(
    population: &SyntheticPopulation,
    dataset: &SurveyDataset,
    directs: &DirectEstimates,
    full: &[AreaEstimates],
    fold_results: &[FoldResults],
    scores: &CvScores,
    loao: &[Option<crate::cv::LoaoScore>],
) -> Result<Vec<AreaReplicate>> {
    let mut rows = Vec::with_capacity(dataset.n_areas());
    for (i, area) in dataset.area_ids().iter().enumerate() {
        let truth = *population
            .truth
            .get(area)
            .ok_or_else(|| Error::Consistency(format!("area {area} has no population truth")))?;
        let score = &scores.areas[i];
        let mut held_bias = Vec::new();
        let mut train: Vec<Vec<f64>> = vec![Vec::new(); full.len()];
        for res in fold_results {
            for f in valid_folds(res, i) {
                held_bias.push(res.held_out[f][i].expect("valid fold") - truth);
                for (m, t) in train.iter_mut().enumerate() {
                    t.push(res.train_mean[m][f][i]);
                }
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let models = (0..full.len())
            .map(|m| {
                let j = full[m].index(area).expect("fit covers the area universe");
                let errs: Vec<f64> = train[m].iter().map(|t| (t - truth).powi(2)).collect();
                let devs: Vec<f64> = train[m].iter().map(|t| t - truth).collect();
                AreaModel {
                    mean: full[m].mean[j],
                    variance: full[m].variance[j],
                    full_error: (full[m].mean[j] - truth).powi(2),
                    train_error: mean(&errs),
                    train_bias: mean(&devs),
                    naive: score.naive[m],
                    adjusted: score.adjusted[m],
                    loao_prediction: loao[m]
                        .as_ref()
                        .and_then(|l| l.per_area.iter().find(|a| a.area == *area).map(|a| a.prediction)),
                }
            })
            .collect();
        let direct = directs.estimates[i].as_ref();
        rows.push(AreaReplicate {
            area: area.clone(),
            truth,
            q: scores.q.get(area).unwrap_or(0.0),
            scored: score.scored,
            direct: direct.map(|d| d.point),
            direct_variance: direct.map(|d| d.variance),
            held_out_bias: mean(&held_bias),
            models,
        });
    }
    Ok(rows)
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn summarise(
    config: &ScenarioConfig,
    population: &SyntheticPopulation,
    model_names: &[String],
    replicates: &[ReplicateResult],
    failures: Vec<ReplicateFailure>,
) -> Result<StudySummary> {
    let models = model_names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let rows = || replicates.iter().map(move |r| &r.models[m]);
            let has_loao = rows().all(|r| r.loao.is_some());
            ModelSummary {
                model: name.clone(),
                full_mse: mean_of(rows().map(|r| r.full_oracle)),
                train_mse: mean_of(rows().map(|r| r.train_oracle)),
                mean_naive: mean_of(rows().map(|r| r.naive)),
                mean_adjusted: mean_of(rows().map(|r| r.adjusted)),
                mean_abs_adjusted_train_gap: mean_of(rows().map(|r| (r.adjusted - r.train_oracle).abs())),
                mean_abs_train_full_gap: mean_of(rows().map(|r| (r.train_oracle - r.full_oracle).abs())),
                mean_loao: has_loao.then(|| mean_of(rows().map(|r| r.loao.unwrap_or(f64::NAN)))),
            }
        })
        .collect();
    let n = replicates.len() as f64;
    let fraction = |pred: &dyn Fn(&ReplicateResult) -> bool| replicates.iter().filter(|r| pred(r)).count() as f64 / n;
    let mut pairs = Vec::new();
    let mut remainder = Vec::new();
    for (p, pair) in config.pairs.iter().enumerate() {
        let same_sign = |x: f64, y: f64| x.signum() == y.signum() && x != 0.0 && y != 0.0;
        let has_loao = replicates.iter().all(|r| r.pairs[p].loao_diff.is_some());
        pairs.push(PairSummary {
            model_a: pair.a.clone(),
            model_b: pair.b.clone(),
            fraction_correct_sign: fraction(&|r| same_sign(r.pairs[p].verdict.difference, r.pairs[p].oracle_full_diff)),
            fraction_correct_sign_training: fraction(&|r| {
                same_sign(r.pairs[p].verdict.difference, r.pairs[p].oracle_train_diff)
            }),
            fraction_conclusive: fraction(&|r| r.pairs[p].verdict.decision != Decision::Inconclusive),
            fraction_prefer_a: fraction(&|r| r.pairs[p].verdict.decision == Decision::PreferA),
            fraction_prefer_b: fraction(&|r| r.pairs[p].verdict.decision == Decision::PreferB),
            bound_violations: replicates
                .iter()
                .filter(|r| {
                    let v = &r.pairs[p];
                    (v.verdict.difference - v.oracle_train_diff).abs() > v.verdict.threshold
                })
                .count(),
            mean_difference: mean_of(replicates.iter().map(|r| r.pairs[p].verdict.difference)),
            mean_threshold: mean_of(replicates.iter().map(|r| r.pairs[p].verdict.threshold)),
            naive_fraction_conclusive: fraction(&|r| r.pairs[p].verdict.naive_decision != Decision::Inconclusive),
            loao_fraction_prefer_a: has_loao.then(|| fraction(&|r| r.pairs[p].loao_diff.is_some_and(|d| d < 0.0))),
            loao_fraction_prefer_b: has_loao.then(|| fraction(&|r| r.pairs[p].loao_diff.is_some_and(|d| d > 0.0))),
        });
        if replicates.len() >= MIN_REMAINDER_REPLICATES {
            remainder.push(remainder_check(model_names, replicates, &pair.a, &pair.b)?);
        }
    }
    let mut loao_gap = Vec::new();
    if replicates.len() >= 2 {
        for name in &config.loao_models {
            loao_gap.push(loao_gap_check(model_names, replicates, name)?);
        }
    }
    Ok(StudySummary {
        replicates_requested: config.replicates,
        replicates_completed: replicates.len(),
        failures,
        truth: population.truth.clone(),
        models,
        pairs,
        remainder,
        loao_gap,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl StudyReport {
    /// One row per replicate × pair × level (each scored area, then the
    /// aggregate).
    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "replicate",
            "model_a",
            "model_b",
            "level",
            "area",
            "score_a",
            "score_b",
            "difference",
            "threshold",
            "decision",
            "naive_difference",
            "naive_threshold",
            "naive_decision",
            "oracle_full_diff",
            "oracle_train_diff",
            "loao_diff",
        ])?;
        for r in &self.replicates {
            for p in &r.pairs {
                let v = &p.verdict;
                for (j, a) in v.per_area.iter().enumerate() {
                    let naive_diff = a.naive_a - a.naive_b;
                    w.write_record([
                        r.replicate.to_string(),
                        v.model_a.clone(),
                        v.model_b.clone(),
                        "area".into(),
                        a.area.to_string(),
                        a.adjusted_a.to_string(),
                        a.adjusted_b.to_string(),
                        a.difference.to_string(),
                        a.bound.to_string(),
                        a.decision.as_str().into(),
                        naive_diff.to_string(),
                        a.naive_bound.to_string(),
                        decide(naive_diff, a.naive_bound).as_str().into(),
                        p.area_oracle_full_diff[j].to_string(),
                        p.area_oracle_train_diff[j].to_string(),
                        String::new(),
                    ])?;
                }
                w.write_record([
                    r.replicate.to_string(),
                    v.model_a.clone(),
                    v.model_b.clone(),
                    "aggregate".into(),
                    String::new(),
                    v.score_a.to_string(),
                    v.score_b.to_string(),
                    v.difference.to_string(),
                    v.threshold.to_string(),
                    v.decision.as_str().into(),
                    v.naive_difference.to_string(),
                    v.naive_threshold.to_string(),
                    v.naive_decision.as_str().into(),
                    p.oracle_full_diff.to_string(),
                    p.oracle_train_diff.to_string(),
                    opt(p.loao_diff),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per replicate × area × model.
    pub fn write_areas_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "replicate",
            "area",
            "model",
            "truth",
            "q",
            "scored",
            "direct",
            "direct_variance",
            "mean",
            "variance",
            "full_error",
            "train_error",
            "naive",
            "adjusted",
            "held_out_bias",
            "train_bias",
            "loao_prediction",
        ])?;
        for r in &self.replicates {
            for a in &r.areas {
                for (m, am) in a.models.iter().enumerate() {
                    w.write_record([
                        r.replicate.to_string(),
                        a.area.to_string(),
                        self.model_names[m].clone(),
                        a.truth.to_string(),
                        a.q.to_string(),
                        a.scored.to_string(),
                        opt(a.direct),
                        opt(a.direct_variance),
                        am.mean.to_string(),
                        am.variance.to_string(),
                        am.full_error.to_string(),
                        am.train_error.to_string(),
                        am.naive.to_string(),
                        am.adjusted.to_string(),
                        a.held_out_bias.to_string(),
                        am.train_bias.to_string(),
                        opt(am.loao_prediction),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per replicate × model.
    pub fn write_models_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "model", "full_oracle", "train_oracle", "naive", "adjusted", "loao"])?;
        for r in &self.replicates {
            for m in &r.models {
                w.write_record([
                    r.replicate.to_string(),
                    m.model.clone(),
                    m.full_oracle.to_string(),
                    m.train_oracle.to_string(),
                    m.naive.to_string(),
                    m.adjusted.to_string(),
                    opt(m.loao),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes replicates.csv, areas.csv, models.csv and summary.json.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_replicates_csv(std::fs::File::create(dir.join("replicates.csv"))?)?;
        self.write_areas_csv(std::fs::File::create(dir.join("areas.csv"))?)?;
        self.write_models_csv(std::fs::File::create(dir.join("models.csv"))?)?;
        let mut f = std::fs::File::create(dir.join("summary.json"))?;
        f.write_all(self.summary_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}
