//! Scenario configuration for synthetic populations and replicate studies.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cv::CvConfig;
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::survey::WeightMode;

/// Inclusive range of frame cluster sizes (households).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRange {
    pub min: u32,
    pub max: u32,
}

impl Default for SizeRange {
    fn default() -> Self {
        SizeRange { min: 80, max: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaConfig {
    pub id: String,
    /// Defaults to the area identifier (one stratum per area).
    #[serde(default)]
    pub stratum: Option<String>,
    pub prevalence: f64,
    pub frame_clusters: usize,
    /// Overrides the scenario-wide size range.
    #[serde(default)]
    pub cluster_size: Option<SizeRange>,
}

impl AreaConfig {
    pub fn stratum_id(&self) -> &str {
        self.stratum.as_deref().unwrap_or(&self.id)
    }
}

/// A model pair to compare; differences are `a − b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub a: String,
    pub b: String,
}

fn default_replicates() -> usize {
    50
}

fn default_q_mode() -> WeightMode {
    WeightMode::Population
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub areas: Vec<AreaConfig>,
    #[serde(default)]
    pub cluster_size: SizeRange,
    /// Overdispersion of cluster event counts around the cluster prevalence.
    #[serde(default)]
    pub d_pop: f64,
    /// Standard deviation of cluster-level logit deviations from the area
    /// prevalence; 0 makes every cluster share the area prevalence.
    #[serde(default)]
    pub cluster_logit_sd: f64,
    pub clusters_per_stratum: usize,
    pub households_per_cluster: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_q_mode")]
    pub q_mode: WeightMode,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub pairs: Vec<PairConfig>,
    /// Models additionally scored by leave-one-area-out.
    #[serde(default)]
    pub loao_models: Vec<String>,
}

impl ScenarioConfig {
    /// Ten areas, one stratum each, 200 frame clusters per stratum. The
    /// prevalences span the range of female literacy across the provinces of
    /// a national survey, and the two most literate areas are also the most
    /// populous (larger clusters), as for urban provinces.
    pub fn ten_provinces(clusters_per_stratum: usize, households_per_cluster: usize) -> Self {
        const AREAS: [(f64, u32, u32); 10] = [
            (0.69, 80, 200),
            (0.87, 150, 400),
            (0.54, 80, 200),
            (0.58, 80, 200),
            (0.89, 200, 500),
            (0.62, 80, 200),
            (0.61, 80, 200),
            (0.67, 80, 200),
            (0.71, 80, 200),
            (0.56, 80, 200),
        ];
        ScenarioConfig {
            areas: AREAS
                .iter()
                .enumerate()
                .map(|(i, &(p, min, max))| AreaConfig {
                    id: format!("P{:02}", i + 1),
                    stratum: None,
                    prevalence: p,
                    frame_clusters: 200,
                    cluster_size: Some(SizeRange { min, max }),
                })
                .collect(),
            cluster_size: SizeRange::default(),
            d_pop: 0.00001,
            cluster_logit_sd: 0.0,
            clusters_per_stratum,
            households_per_cluster,
            replicates: 50,
            q_mode: WeightMode::Population,
            master_seed: 1,
            cv: CvConfig::default(),
            models: Vec::new(),
            pairs: Vec::new(),
            loao_models: Vec::new(),
        }
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn strata(&self) -> Vec<String> {
        self.areas.iter().map(|a| a.stratum_id().to_string()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn frame_clusters_in(&self, stratum: &str) -> usize {
        self.areas.iter().filter(|a| a.stratum_id() == stratum).map(|a| a.frame_clusters).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.areas.is_empty() {
            return bad("scenario has no areas".into());
        }
        let mut ids = BTreeSet::new();
        for a in &self.areas {
            if !ids.insert(a.id.as_str()) {
                return bad(format!("area {} listed twice", a.id));
            }
            if !(a.prevalence > 0.0 && a.prevalence < 1.0) {
                return bad(format!("area {}: prevalence must lie in (0,1), got {}", a.id, a.prevalence));
            }
            if a.frame_clusters == 0 {
                return bad(format!("area {}: frame_clusters must be positive", a.id));
            }
            let size = a.cluster_size.unwrap_or(self.cluster_size);
            if size.min == 0 || size.min > size.max {
                return bad(format!("area {}: invalid cluster size range {}..={}", a.id, size.min, size.max));
            }
        }
        if !(0.0..1.0).contains(&self.d_pop) {
            return bad(format!("d_pop must lie in [0,1), got {}", self.d_pop));
        }
        if !(self.cluster_logit_sd >= 0.0 && self.cluster_logit_sd.is_finite()) {
            return bad(format!("cluster_logit_sd must be nonnegative, got {}", self.cluster_logit_sd));
        }
        if self.clusters_per_stratum == 0 || self.households_per_cluster == 0 || self.replicates == 0 {
            return bad("clusters_per_stratum, households_per_cluster and replicates must be positive".into());
        }
        for s in self.strata() {
            let available = self.frame_clusters_in(&s);
            if self.clusters_per_stratum > available {
                return bad(format!(
                    "stratum {s}: {} clusters requested but the frame holds {available}",
                    self.clusters_per_stratum
                ));
            }
        }
        if self.cv.k < 2 {
            return bad(format!("cv.k must be at least 2, got {}", self.cv.k));
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return bad(format!("model {} defined twice", m.name));
            }
            m.validate()?;
        }
        for p in &self.pairs {
            for n in [&p.a, &p.b] {
                if !names.contains(n.as_str()) {
                    return bad(format!("pair refers to undefined model {n}"));
                }
            }
        }
        for n in &self.loao_models {
            if !names.contains(n.as_str()) {
                return bad(format!("leave-one-area-out refers to undefined model {n}"));
            }
        }
        Ok(())
    }
}
