//! Leave-one-area-out scoring: refit without each area and compare the
//! prediction for the unseen area with its full-sample direct estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direct::hajek_all;
use crate::error::{Error, Result};
use crate::models::{predict_held_out_area, AreaEstimator};
use crate::rng::{derive_seed, stream};
use crate::survey::{AreaWeights, Id, SurveyDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaoArea {
    pub area: Id,
    pub prediction: f64,
    pub prediction_var: f64,
    pub direct: f64,
    pub squared_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaoScore {
    pub model: String,
    pub per_area: Vec<LoaoArea>,
    /// Weights renormalised over the scored areas.
    pub q: AreaWeights,
    pub aggregated: f64,
}

/// Seed of the fit that leaves out area `area`; shared by all models.
pub fn loao_fit_seed(seed: u64, area: usize) -> u64 {
    derive_seed(seed, &[stream::LOAO, area as u64])
}

pub fn loao_score(dataset: &SurveyDataset, model: &dyn AreaEstimator, q: &AreaWeights, seed: u64) -> Result<LoaoScore> {
    let directs = hajek_all(dataset);
    let scored: Vec<usize> = (0..dataset.n_areas())
        .filter(|&i| directs.estimates[i].is_some() && q.get(&dataset.area_ids()[i]).is_some())
        .collect();
    if directs.n_present() < 2 {
        return Err(Error::Domain("leave-one-area-out needs at least two areas with data".into()));
    }
    let per_area = scored
        .par_iter()
        .map(|&i| {
            let area = &dataset.area_ids()[i];
            let train = dataset.without_area(i);
            let fit = model
                .estimate(&train, loao_fit_seed(seed, i))
                .map_err(|e| Error::Fit(format!("leaving out area {area}, model {}: {e}", model.label())))?;
            let (prediction, prediction_var) = predict_held_out_area(&fit, area)?;
            let direct = directs.estimates[i].as_ref().expect("scored area has data").point;
            Ok(LoaoArea {
                area: area.clone(),
                prediction,
                prediction_var,
                direct,
                squared_error: (prediction - direct).powi(2),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let q_used = q.restricted(per_area.iter().map(|a| &a.area))?;
    let aggregated = per_area.iter().map(|a| q_used.get(&a.area).unwrap_or(0.0) * a.squared_error).sum();
    Ok(LoaoScore { model: model.label().to_string(), per_area, q: q_used, aggregated })
}
