//! Finite synthetic population: event counts per frame cluster and the area
//! prevalences they imply.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::summary::{expit, logit};
use crate::rng::{child_rng, stream};
use crate::sim::config::ScenarioConfig;
use crate::sim::frame::FrameCluster;
use crate::survey::{id, Id};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationCluster {
    pub cluster_id: Id,
    pub area_id: Id,
    pub stratum_id: Id,
    pub size: u32,
    pub events: u32,
    /// Prevalence the counts were generated around.
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPopulation {
    pub clusters: Vec<PopulationCluster>,
    /// Σ events / Σ size per area.
    pub truth: BTreeMap<Id, f64>,
    /// Σ size per area.
    pub area_sizes: BTreeMap<Id, f64>,
}

impl SyntheticPopulation {
    pub fn from_clusters(clusters: Vec<PopulationCluster>) -> Result<Self> {
        let mut totals: BTreeMap<Id, (u64, u64)> = BTreeMap::new();
        for c in &clusters {
            if c.events > c.size || c.size == 0 {
                return Err(Error::Domain(format!(
                    "cluster {}: {} events among {} households",
                    c.cluster_id, c.events, c.size
                )));
            }
            let t = totals.entry(c.area_id.clone()).or_default();
            t.0 += u64::from(c.events);
            t.1 += u64::from(c.size);
        }
        let truth = totals.iter().map(|(a, &(y, n))| (a.clone(), y as f64 / n as f64)).collect();
        let area_sizes = totals.iter().map(|(a, &(_, n))| (a.clone(), n as f64)).collect();
        Ok(SyntheticPopulation { clusters, truth, area_sizes })
    }

    pub fn area_ids(&self) -> Vec<Id> {
        self.truth.keys().cloned().collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cluster", "area", "stratum", "size", "events", "prevalence"])?;
        for c in &self.clusters {
            w.write_record([
                c.cluster_id.to_string(),
                c.area_id.to_string(),
                c.stratum_id.to_string(),
                c.size.to_string(),
                c.events.to_string(),
                c.prevalence.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            cluster: String,
            area: String,
            stratum: String,
            size: u32,
            events: u32,
            prevalence: f64,
        }
        let mut clusters = Vec::new();
        let mut reader = csv::Reader::from_reader(source);
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse { line: i + 2, message: e.to_string() })?;
            clusters.push(PopulationCluster {
                cluster_id: id(row.cluster),
                area_id: id(row.area),
                stratum_id: id(row.stratum),
                size: row.size,
                events: row.events,
                prevalence: row.prevalence,
            });
        }
        Self::from_clusters(clusters)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// `area,truth,population,clusters`.
    pub fn write_truth_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut counts: BTreeMap<&Id, usize> = BTreeMap::new();
        for c in &self.clusters {
            *counts.entry(&c.area_id).or_default() += 1;
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["area", "truth", "population", "clusters"])?;
        for (area, theta) in &self.truth {
            w.write_record([
                area.to_string(),
                theta.to_string(),
                self.area_sizes[area].to_string(),
                counts[area].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_truth_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_truth_csv(std::fs::File::create(path)?)
    }
}

/// Draws Y ~ BetaBinomial(n, p, d) with mean np and variance
/// np(1−p)(1+(n−1)d), as a binomial with a Beta(p(1−d)/d, (1−p)(1−d)/d)
/// success probability.
pub fn draw_betabinomial<R: Rng>(n: u32, p: f64, d: f64, rng: &mut R) -> Result<u32> {
    let prob = if d > 0.0 {
        let scale = (1.0 - d) / d;
        Beta::new(p * scale, (1.0 - p) * scale)
            .map_err(|e| Error::Domain(format!("beta draw with p = {p}, d = {d}: {e}")))?
            .sample(rng)
    } else {
        p
    };
    let y = Binomial::new(u64::from(n), prob.clamp(0.0, 1.0))
        .map_err(|e| Error::Domain(format!("binomial draw with p = {prob}: {e}")))?
        .sample(rng);
    Ok(y as u32)
}

/// Event counts for every frame cluster. Clusters of area i draw from the
/// stream of area i, so areas are independent of each other's frame size.
pub fn generate_population(frame: &[FrameCluster], config: &ScenarioConfig, seed: u64) -> Result<SyntheticPopulation> {
    config.validate()?;
    let mut clusters = Vec::with_capacity(frame.len());
    for (i, area) in config.areas.iter().enumerate() {
        let mut rng = child_rng(seed, &[stream::POPULATION, i as u64]);
        let base = logit(area.prevalence);
        for c in frame.iter().filter(|c| *c.area_id == *area.id) {
            let prevalence = if config.cluster_logit_sd > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                expit(base + config.cluster_logit_sd * z)
            } else {
                area.prevalence
            };
            let events = draw_betabinomial(c.size, prevalence, config.d_pop, &mut rng)?;
            clusters.push(PopulationCluster {
                cluster_id: c.cluster_id.clone(),
                area_id: c.area_id.clone(),
                stratum_id: c.stratum_id.clone(),
                size: c.size,
                events,
                prevalence,
            });
        }
    }
    SyntheticPopulation::from_clusters(clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn betabinomial_draw_moments() {
        let mut rng = rng_from_seed(5);
        let (n, p, d) = (20u32, 0.3, 0.2);
        let draws: Vec<f64> = (0..40_000).map(|_| draw_betabinomial(n, p, d, &mut rng).unwrap() as f64).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let target_var = f64::from(n) * p * (1.0 - p) * (1.0 + f64::from(n - 1) * d);
        assert!((mean - 6.0).abs() < 0.06, "{mean}");
        assert!((var / target_var - 1.0).abs() < 0.04, "{var} vs {target_var}");
    }

    #[test]
    fn inconsistent_counts_rejected() {
        let c = PopulationCluster {
            cluster_id: id("c"),
            area_id: id("A"),
            stratum_id: id("s"),
            size: 3,
            events: 4,
            prevalence: 0.5,
        };
        assert!(SyntheticPopulation::from_clusters(vec![c]).is_err());
    }
}
