//! Two-stage stratified survey: systematic PPS of clusters within strata,
//! then simple random sampling of households within selected clusters.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{child_rng, stream};
use crate::sim::config::ScenarioConfig;
use crate::sim::population::{PopulationCluster, SyntheticPopulation};
use crate::survey::{id, SurveyDataset, UnitRecord};

/// Inclusion probabilities n·size/Σsize, with clusters whose probability
/// would reach one taken with certainty and the rest recomputed over the
/// remaining clusters until no probability exceeds one.
pub fn pps_inclusion_probabilities(sizes: &[f64], n: usize) -> Result<Vec<f64>> {
    if n > sizes.len() {
        return Err(Error::Config(format!("cannot select {n} of {} clusters", sizes.len())));
    }
    if sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Domain("cluster sizes must be positive".into()));
    }
    let mut pi = vec![0.0; sizes.len()];
    let mut certain = vec![false; sizes.len()];
    loop {
        let n_certain = certain.iter().filter(|&&c| c).count();
        let remaining = (n - n_certain) as f64;
        let total: f64 = sizes.iter().zip(&certain).filter(|(_, &c)| !c).map(|(s, _)| s).sum();
        let mut changed = false;
        for (j, &s) in sizes.iter().enumerate() {
            if certain[j] {
                pi[j] = 1.0;
                continue;
            }
            pi[j] = if total > 0.0 { remaining * s / total } else { 0.0 };
            if pi[j] >= 1.0 {
                certain[j] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(pi);
        }
    }
}

/// Systematic selection over a random ordering of the clusters with
/// probabilities `pi` (each in (0,1], summing to an integer n). Returns the
/// selected indices in ascending order.
pub fn systematic_pps<R: Rng>(pi: &[f64], rng: &mut R) -> Vec<usize> {
    let mut selected: Vec<usize> = (0..pi.len()).filter(|&j| pi[j] >= 1.0).collect();
    let mut rest: Vec<usize> = (0..pi.len()).filter(|&j| pi[j] < 1.0 && pi[j] > 0.0).collect();
    let total: f64 = rest.iter().map(|&j| pi[j]).sum();
    let target = total.round();
    if target >= 1.0 {
        rest.shuffle(rng);
        let scale = target / total;
        let start: f64 = rng.random::<f64>();
        let mut cum = 0.0;
        for (pos, &j) in rest.iter().enumerate() {
            let before = cum;
            cum = if pos + 1 == rest.len() { target } else { cum + pi[j] * scale };
            // Selected when some start + m lies in [before, cum).
            if (cum - start).ceil() > (before - start).ceil() {
                selected.push(j);
            }
        }
    }
    selected.sort_unstable();
    selected
}

/// One survey from the population. Weights are 1/(π₁·π₂) with π₁ the PPS
/// inclusion probability of the cluster and π₂ = m/N_c for the m households
/// drawn from its N_c; a cluster smaller than the household take is taken
/// whole. Outcomes come from the cluster's finite pool of events.
pub fn draw_survey(population: &SyntheticPopulation, config: &ScenarioConfig, seed: u64) -> Result<SurveyDataset> {
    let mut by_stratum: BTreeMap<&str, Vec<&PopulationCluster>> = BTreeMap::new();
    for c in &population.clusters {
        by_stratum.entry(&c.stratum_id).or_default().push(c);
    }
    let mut units = Vec::new();
    let mut take_all = 0usize;
    for (s, (stratum, clusters)) in by_stratum.iter().enumerate() {
        let sizes: Vec<f64> = clusters.iter().map(|c| f64::from(c.size)).collect();
        let pi = pps_inclusion_probabilities(&sizes, config.clusters_per_stratum)
            .map_err(|e| Error::Config(format!("stratum {stratum}: {e}")))?;
        let mut rng = child_rng(seed, &[stream::STAGE_ONE, s as u64]);
        for j in systematic_pps(&pi, &mut rng) {
            let c = clusters[j];
            let n_c = c.size as usize;
            let m = config.households_per_cluster.min(n_c);
            if m < config.households_per_cluster {
                take_all += 1;
                log::warn!("cluster {} has {n_c} households; all are taken", c.cluster_id);
            }
            let weight = 1.0 / (pi[j] * m as f64 / n_c as f64);
            let mut hh_rng = child_rng(seed, &[stream::STAGE_TWO, s as u64, j as u64]);
            let mut households = index::sample(&mut hh_rng, n_c, m).into_vec();
            households.sort_unstable();
            for h in households {
                units.push(UnitRecord {
                    unit_id: id("1"),
                    stratum_id: c.stratum_id.clone(),
                    psu_id: c.cluster_id.clone(),
                    ssu_id: id(format!("h{h:04}")),
                    area_id: c.area_id.clone(),
                    weight,
                    // The first Y_c households hold the events.
                    y: u8::from(h < c.events as usize),
                });
            }
        }
    }
    let dataset = SurveyDataset::new(units, &population.area_ids())?;
    Ok(if take_all > 0 { dataset.with_metadata("take_all_clusters", take_all.to_string()) } else { dataset })
}
