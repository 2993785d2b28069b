//! Plug-in bounds on the unidentifiable remainder of a score difference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::direct::DirectEstimates;
use crate::error::{Error, Result};
use crate::models::AreaEstimates;
use crate::survey::{AreaWeights, Id};

/// Per-area bounds over the areas carried by `q`, and their q-weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub per_area: BTreeMap<Id, f64>,
    pub aggregated: f64,
}

impl BoundReport {
    fn from_per_area(per_area: BTreeMap<Id, f64>, q: &AreaWeights) -> Self {
        let aggregated = per_area.iter().map(|(a, t)| q.get(a).unwrap_or(0.0) * t).sum();
        BoundReport { per_area, aggregated }
    }

    pub fn get(&self, area: &str) -> Option<f64> {
        self.per_area.get(area).copied()
    }
}

/// 2·√(2·var_direct·(var_a + var_b)).
pub fn adjusted_bound(var_direct: f64, var_a: f64, var_b: f64) -> f64 {
    2.0 * (2.0 * var_direct * (var_a + var_b)).max(0.0).sqrt()
}

/// 2·√(mean_k var_k · mean_k diff_k²).
pub fn naive_bound(fold_direct_vars: &[f64], fold_diffs: &[f64]) -> f64 {
    let mean_var = fold_direct_vars.iter().sum::<f64>() / fold_direct_vars.len() as f64;
    let mean_sq = fold_diffs.iter().map(|d| d * d).sum::<f64>() / fold_diffs.len() as f64;
    2.0 * (mean_var * mean_sq).max(0.0).sqrt()
}

/// Bound for the adjusted-score difference from full-sample direct variances
/// and the two models' full-sample posterior variances.
pub fn error_bound_adjusted(
    direct_full: &DirectEstimates,
    fit_a: &AreaEstimates,
    fit_b: &AreaEstimates,
    q: &AreaWeights,
) -> Result<BoundReport> {
    let mut per_area = BTreeMap::new();
    for (area, _) in q.iter() {
        let missing = || Error::Domain(format!("area {area} lacks a variance for the error bound"));
        let vd = direct_full.get(area).map(|d| d.variance).ok_or_else(missing)?;
        let va = fit_a.index(area).map(|i| fit_a.variance[i]).filter(|v| v.is_finite()).ok_or_else(missing)?;
        let vb = fit_b.index(area).map(|i| fit_b.variance[i]).filter(|v| v.is_finite()).ok_or_else(missing)?;
        per_area.insert(area.clone(), adjusted_bound(vd, va, vb));
    }
    Ok(BoundReport::from_per_area(per_area, q))
}

/// Bound for the naive-score difference from per-fold held-out design
/// variances and per-fold training differences between the two models.
pub fn error_bound_naive(
    fold_direct_variances: &BTreeMap<Id, Vec<f64>>,
    fold_model_diffs: &BTreeMap<Id, Vec<f64>>,
    q: &AreaWeights,
) -> Result<BoundReport> {
    let mut per_area = BTreeMap::new();
    for (area, _) in q.iter() {
        let missing = || Error::Domain(format!("area {area} lacks fold terms for the naive bound"));
        let vars = fold_direct_variances.get(area).filter(|v| !v.is_empty()).ok_or_else(missing)?;
        let diffs = fold_model_diffs.get(area).filter(|v| !v.is_empty()).ok_or_else(missing)?;
        per_area.insert(area.clone(), naive_bound(vars, diffs));
    }
    Ok(BoundReport::from_per_area(per_area, q))
}
