//! Fold assignment: households within clusters, clusters within strata, and
//! repeated two-fold splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::survey::{rescale_weights, Id, SurveyDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Households dealt into K folds within each cluster.
    Ssu,
    /// Clusters dealt into K folds within each stratum.
    Psu,
    /// Repeated random halves of the households within each cluster.
    Twofold,
}

impl std::str::FromStr for Scheme {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssu" => Ok(Scheme::Ssu),
            "psu" => Ok(Scheme::Psu),
            "twofold" => Ok(Scheme::Twofold),
            other => Err(domain(format!("unknown scheme `{other}` (expected ssu, psu or twofold)"))),
        }
    }
}

/// Which unit a split deals into folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitUnits {
    /// (PSU, SSU) → fold.
    Ssu(BTreeMap<(Id, Id), usize>),
    /// PSU → fold.
    Psu(BTreeMap<Id, usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub scheme: Scheme,
    pub seed: u64,
    /// Index within a repeated two-fold sequence.
    pub replicate: Option<usize>,
    pub units: SplitUnits,
    /// Fold of every dataset row.
    pub row_fold: Vec<usize>,
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    /// Rows outside fold `k`.
    pub fn training(&self, dataset: &SurveyDataset, k: usize) -> SurveyDataset {
        dataset.restrict(|r| self.row_fold[r] != k)
    }

    /// Rows of fold `k`, weights multiplied by K.
    pub fn held_out(&self, dataset: &SurveyDataset, k: usize) -> Result<SurveyDataset> {
        rescale_weights(&dataset.restrict(|r| self.row_fold[r] == k), self.k as f64)
    }

    /// Rows of fold `k` with the original weights.
    pub fn held_out_unscaled(&self, dataset: &SurveyDataset, k: usize) -> SurveyDataset {
        dataset.restrict(|r| self.row_fold[r] == k)
    }
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(domain(format!("fold count must be at least 2, got {k}")));
    }
    Ok(())
}

/// Shuffles `items` and deals them round-robin starting at a random fold, so
/// fold sizes differ by at most one and the folds receiving the extra items
/// are random.
fn deal<T: Clone, R: Rng>(items: &[T], k: usize, rng: &mut R) -> Vec<(T, usize)> {
    let mut order: Vec<T> = items.to_vec();
    order.shuffle(rng);
    let offset = rng.random_range(0..k);
    order.into_iter().enumerate().map(|(j, item)| (item, (offset + j) % k)).collect()
}

fn assign_ssu(dataset: &SurveyDataset, k: usize, seed: u64, scheme: Scheme, replicate: Option<usize>) -> Result<FoldAssignment> {
    check_k(k)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::FOLDS]));
    let mut units = BTreeMap::new();
    let mut row_fold = vec![0; dataset.len()];
    for psus in dataset.design_index().values() {
        for (psu, ssus) in psus {
            let keys: Vec<&Id> = ssus.keys().collect();
            for (ssu, fold) in deal(&keys, k, &mut rng) {
                for &row in &ssus[ssu] {
                    row_fold[row] = fold;
                }
                units.insert((psu.clone(), ssu.clone()), fold);
            }
        }
    }
    Ok(FoldAssignment { k, scheme, seed, replicate, units: SplitUnits::Ssu(units), row_fold, warnings: Vec::new() })
}

fn assign_psu(dataset: &SurveyDataset, k: usize, seed: u64, scheme: Scheme, replicate: Option<usize>) -> Result<FoldAssignment> {
    check_k(k)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::FOLDS]));
    let mut units = BTreeMap::new();
    let mut row_fold = vec![0; dataset.len()];
    let mut warnings = Vec::new();
    for (stratum, psus) in dataset.design_index() {
        if psus.len() < k {
            let msg = format!("stratum {stratum} has {} PSUs for {k} folds; some folds get none", psus.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let keys: Vec<&Id> = psus.keys().collect();
        for (psu, fold) in deal(&keys, k, &mut rng) {
            for rows in psus[psu].values() {
                for &row in rows {
                    row_fold[row] = fold;
                }
            }
            units.insert(psu.clone(), fold);
        }
    }
    Ok(FoldAssignment { k, scheme, seed, replicate, units: SplitUnits::Psu(units), row_fold, warnings })
}

/// Households of every cluster dealt into `k` folds.
pub fn assign_folds_ssu(dataset: &SurveyDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    assign_ssu(dataset, k, seed, Scheme::Ssu, None)
}

/// Clusters of every stratum dealt into `k` folds.
pub fn assign_folds_psu(dataset: &SurveyDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    assign_psu(dataset, k, seed, Scheme::Psu, None)
}

/// `repeats` independent two-fold splits with derived seeds. `by_psu` splits
/// clusters within strata instead of households within clusters.
pub fn resplit_two_fold(dataset: &SurveyDataset, repeats: usize, seed: u64, by_psu: bool) -> Result<Vec<FoldAssignment>> {
    if repeats == 0 {
        return Err(domain("need at least one two-fold split"));
    }
    (0..repeats)
        .map(|r| {
            let s = derive_seed(seed, &[stream::RESPLIT, r as u64]);
            if by_psu {
                assign_psu(dataset, 2, s, Scheme::Twofold, Some(r))
            } else {
                assign_ssu(dataset, 2, s, Scheme::Twofold, Some(r))
            }
        })
        .collect()
}

/// The assignments a scheme uses: one K-fold split, or `resplits` two-fold
/// splits.
pub fn assignments(dataset: &SurveyDataset, scheme: Scheme, k: usize, resplits: usize, seed: u64) -> Result<Vec<FoldAssignment>> {
    match scheme {
        Scheme::Ssu => Ok(vec![assign_folds_ssu(dataset, k, seed)?]),
        Scheme::Psu => Ok(vec![assign_folds_psu(dataset, k, seed)?]),
        Scheme::Twofold => resplit_two_fold(dataset, resplits, seed, false),
    }
}
