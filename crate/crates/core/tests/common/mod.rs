#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use saecv_core::cv::folds::{FoldAssignment, Scheme};
use saecv_core::models::ModelSpec;
use saecv_core::rng::rng_from_seed;
use saecv_core::sim::{PairConfig, ScenarioConfig};
use saecv_core::survey::{id, SurveyDataset, UnitRecord};

/// Random two-stage survey: 1–3 strata, 2–6 clusters each, 1–8 households
/// per cluster, 1–2 respondents per household, clusters spread over
/// `n_areas` areas.
pub fn random_survey(seed: u64, n_areas: usize) -> SurveyDataset {
    let mut rng = rng_from_seed(seed);
    let mut units = Vec::new();
    let strata = rng.random_range(1..=3);
    for s in 0..strata {
        for c in 0..rng.random_range(2..=6) {
            let area = format!("A{}", rng.random_range(0..n_areas));
            let w_cluster: f64 = rng.random_range(0.5..20.0);
            for h in 0..rng.random_range(1..=8) {
                for u in 0..rng.random_range(1..=2) {
                    units.push(UnitRecord {
                        unit_id: id(u.to_string()),
                        stratum_id: id(format!("S{s}")),
                        psu_id: id(format!("S{s}-C{c}")),
                        ssu_id: id(format!("h{h}")),
                        area_id: id(&area),
                        weight: w_cluster * rng.random_range(0.8..1.25),
                        y: u8::from(rng.random_bool(0.4)),
                    });
                }
            }
        }
    }
    SurveyDataset::new(units, &[]).unwrap()
}

/// The three candidate models: beta-binomial with a default prior, area-level
/// Fay-Herriot with the same prior, and the beta-binomial with a highly
/// informative prior that over-smooths.
pub fn candidate_models() -> Vec<ModelSpec> {
    vec![
        ModelSpec::beta_binomial("M1", 1.0, 0.01).unwrap(),
        ModelSpec::fay_herriot("M2", 1.0, 0.01).unwrap(),
        ModelSpec::beta_binomial("M3", 0.01, 0.01).unwrap(),
    ]
}

/// Desk-scale version of the design-based study: ten single-stratum areas,
/// 200 frame clusters each, clusters varying around their area prevalence.
pub fn study_scenario(clusters: usize, households: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::ten_provinces(clusters, households);
    c.cluster_logit_sd = 0.8;
    c.master_seed = 20_240_601;
    c.replicates = 50;
    c.models = candidate_models();
    c.pairs = vec![
        PairConfig { a: "M3".into(), b: "M1".into() },
        PairConfig { a: "M2".into(), b: "M1".into() },
    ];
    c.loao_models = vec!["M1".into(), "M3".into()];
    c
}

/// Counts violations of the partition properties of one fold assignment:
/// every sampling unit in one fold, held-out sets disjoint and exhaustive,
/// held-out weights scaled by K, and fold sizes balanced within one.
pub fn partition_violations(ds: &SurveyDataset, split: &FoldAssignment) -> usize {
    let k = split.k;
    let mut bad = 0;
    let units = ds.units();
    // Membership: one fold per sampling unit, every row in exactly one held-out set.
    let mut ssu_fold: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut psu_fold: BTreeMap<String, usize> = BTreeMap::new();
    for (r, u) in units.iter().enumerate() {
        let f = split.row_fold[r];
        if f >= k {
            bad += 1;
        }
        let key = (u.psu_id.to_string(), u.ssu_id.to_string());
        if *ssu_fold.entry(key).or_insert(f) != f {
            bad += 1;
        }
        if split.scheme == Scheme::Psu && *psu_fold.entry(u.psu_id.to_string()).or_insert(f) != f {
            bad += 1;
        }
    }
    let mut covered = 0;
    for f in 0..k {
        let held = split.held_out(ds, f).unwrap();
        let train = split.training(ds, f);
        covered += held.len();
        if held.len() + train.len() != ds.len() {
            bad += 1;
        }
        let w_held: f64 = held.units().iter().map(|u| u.weight).sum();
        let w_orig: f64 = units.iter().enumerate().filter(|(r, _)| split.row_fold[*r] == f).map(|(_, u)| u.weight).sum();
        if (w_held - k as f64 * w_orig).abs() > 1e-9 * w_held.max(1.0) {
            bad += 1;
        }
    }
    if covered != ds.len() {
        bad += 1;
    }
    // Balance: SSUs within each cluster, or PSUs within each stratum.
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    match split.scheme {
        Scheme::Psu => {
            let mut seen = BTreeSet::new();
            for u in units {
                if seen.insert(u.psu_id.to_string()) {
                    groups.entry(u.stratum_id.to_string()).or_insert_with(|| vec![0; k])[psu_fold[&*u.psu_id]] += 1;
                }
            }
        }
        _ => {
            for ((psu, _), f) in &ssu_fold {
                groups.entry(psu.clone()).or_insert_with(|| vec![0; k])[*f] += 1;
            }
        }
    }
    for counts in groups.values() {
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        if hi - lo > 1 {
            bad += 1;
        }
    }
    bad
}
