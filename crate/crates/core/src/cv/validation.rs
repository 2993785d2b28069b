//! Scoring against an independent validation survey.

use serde::{Deserialize, Serialize};

use crate::direct::hajek_all;
use crate::error::Result;
use crate::models::AreaEstimator;
use crate::survey::{AreaWeights, Id, SurveyDataset};

/// (prediction − validation direct)² − validation design variance.
pub fn validation_term(prediction: f64, direct: f64, direct_variance: f64) -> f64 {
    (prediction - direct).powi(2) - direct_variance
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub model: String,
    pub per_area: Vec<(Id, f64)>,
    pub q: AreaWeights,
    pub aggregated: f64,
}

/// Fits `model` on `train` and scores it on the direct estimates of an
/// independent `validation` survey over the same areas.
pub fn independent_validation_score(
    train: &SurveyDataset,
    validation: &SurveyDataset,
    model: &dyn AreaEstimator,
    q: &AreaWeights,
    seed: u64,
) -> Result<ValidationScore> {
    let fit = model.estimate(train, seed)?;
    let directs = hajek_all(validation);
    let mut per_area = Vec::new();
    for (i, area) in fit.areas.iter().enumerate() {
        if q.get(area).is_none() {
            continue;
        }
        match directs.get(area) {
            Some(d) => per_area.push((area.clone(), validation_term(fit.mean[i], d.point, d.variance))),
            None => log::warn!("area {area} has no validation data and is excluded"),
        }
    }
    let q_used = q.restricted(per_area.iter().map(|(a, _)| a))?;
    let aggregated = per_area.iter().map(|(a, s)| q_used.get(a).unwrap_or(0.0) * s).sum();
    Ok(ValidationScore { model: model.label().to_string(), per_area, q: q_used, aggregated })
}
