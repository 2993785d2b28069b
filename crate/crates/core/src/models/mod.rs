//! Small area models behind one interface returning per-area posterior means
//! and variances on the probability scale.

pub mod beta_binomial;
pub mod fay_herriot;
pub mod grid;
pub mod prior;
pub mod summary;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::direct::{hajek_all, hajek_all_with, SingletonPolicy};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::survey::{Id, SurveyDataset};

pub use beta_binomial::{betabinomial_logpmf, fit_betabinomial};
pub use fay_herriot::fit_fay_herriot;
pub use prior::{pc_rate, NormalPrior, PcPrior};
pub use summary::{MixturePosterior, NodeGaussians};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    FayHerriot,
    BetaBinomial,
}

/// Node counts of the integration grid. The coarse pass only locates the
/// posterior mass; the fine counts set the accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub sigma_nodes: usize,
    pub d_nodes: usize,
    pub coarse_sigma_nodes: usize,
    pub coarse_d_nodes: usize,
}

impl GridSpec {
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::FayHerriot => GridSpec { sigma_nodes: 31, d_nodes: 1, coarse_sigma_nodes: 61, coarse_d_nodes: 1 },
            Family::BetaBinomial => GridSpec { sigma_nodes: 21, d_nodes: 21, coarse_sigma_nodes: 25, coarse_d_nodes: 14 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub draws: usize,
    /// Mixed into the fit seed; models with different values use different
    /// streams.
    pub seed: u64,
}

impl Default for McSpec {
    fn default() -> Self {
        McSpec { draws: 2000, seed: 0 }
    }
}

/// Full specification of a candidate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub family: Family,
    pub sigma_prior: PcPrior,
    /// Prior on logit d (beta-binomial only).
    pub overdispersion_prior: NormalPrior,
    /// Standard deviation of the Normal prior standing in for a flat prior on
    /// the intercept.
    pub intercept_sd: f64,
    pub grid: GridSpec,
    pub mc: McSpec,
    /// Pins σ_u instead of integrating over it; 0 gives complete pooling.
    pub fixed_sigma: Option<f64>,
    /// Pins d (beta-binomial only).
    pub fixed_overdispersion: Option<f64>,
    /// Singleton-stratum handling for the direct estimates an area-level
    /// model is fitted to.
    pub singleton: SingletonPolicy,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, family: Family, sigma_prior: PcPrior) -> Self {
        ModelSpec {
            name: name.into(),
            family,
            sigma_prior,
            overdispersion_prior: NormalPrior::default(),
            intercept_sd: 1000.0,
            grid: GridSpec::for_family(family),
            mc: McSpec::default(),
            fixed_sigma: None,
            fixed_overdispersion: None,
            singleton: SingletonPolicy::default(),
        }
    }

    pub fn fay_herriot(name: impl Into<String>, u: f64, alpha: f64) -> Result<Self> {
        Ok(Self::new(name, Family::FayHerriot, PcPrior::new(u, alpha)?))
    }

    pub fn beta_binomial(name: impl Into<String>, u: f64, alpha: f64) -> Result<Self> {
        Ok(Self::new(name, Family::BetaBinomial, PcPrior::new(u, alpha)?))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model {}: {m}", self.name)));
        if self.fixed_sigma.is_none() && self.grid.sigma_nodes < 15 {
            return bad(format!("needs at least 15 sigma nodes, got {}", self.grid.sigma_nodes));
        }
        if self.family == Family::BetaBinomial && self.fixed_overdispersion.is_none() && self.grid.d_nodes < 15 {
            return bad(format!("needs at least 15 overdispersion nodes, got {}", self.grid.d_nodes));
        }
        if self.grid.coarse_sigma_nodes < 2 || (self.family == Family::BetaBinomial && self.grid.coarse_d_nodes < 2) {
            return bad("coarse grid needs at least 2 nodes per dimension".into());
        }
        if self.mc.draws < 500 {
            return bad(format!("needs at least 500 Monte Carlo draws, got {}", self.mc.draws));
        }
        if !(self.intercept_sd > 0.0) {
            return bad("intercept prior sd must be positive".into());
        }
        if let Some(s) = self.fixed_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("fixed sigma must be nonnegative, got {s}"));
            }
        }
        if let Some(d) = self.fixed_overdispersion {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("fixed overdispersion must lie in [0,1), got {d}"));
            }
        }
        if !(self.overdispersion_prior.sd > 0.0) {
            return bad("overdispersion prior sd must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn mc_seed(&self, seed: u64) -> u64 {
        derive_seed(seed, &[stream::MONTE_CARLO, self.mc.seed])
    }
}

/// Flat configuration-file form of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub pc_u: f64,
    pub pc_alpha: f64,
    #[serde(default)]
    pub sigma_nodes: Option<usize>,
    #[serde(default)]
    pub d_nodes: Option<usize>,
    #[serde(default)]
    pub coarse_sigma_nodes: Option<usize>,
    #[serde(default)]
    pub coarse_d_nodes: Option<usize>,
    #[serde(default)]
    pub mc_draws: Option<usize>,
    #[serde(default)]
    pub mc_seed: Option<u64>,
    #[serde(default)]
    pub logit_d_prior_mean: Option<f64>,
    #[serde(default)]
    pub logit_d_prior_sd: Option<f64>,
    #[serde(default)]
    pub intercept_sd: Option<f64>,
    #[serde(default)]
    pub fixed_sigma: Option<f64>,
    #[serde(default)]
    pub fixed_d: Option<f64>,
    #[serde(default)]
    pub singleton: Option<SingletonPolicy>,
}

impl ModelConfig {
    pub fn to_spec(&self, name: &str) -> Result<ModelSpec> {
        let prior = PcPrior::new(self.pc_u, self.pc_alpha).map_err(|e| Error::Config(format!("model {name}: {e}")))?;
        let mut spec = ModelSpec::new(name, self.family, prior);
        let g = &mut spec.grid;
        g.sigma_nodes = self.sigma_nodes.unwrap_or(g.sigma_nodes);
        g.d_nodes = self.d_nodes.unwrap_or(g.d_nodes);
        g.coarse_sigma_nodes = self.coarse_sigma_nodes.unwrap_or(g.coarse_sigma_nodes);
        g.coarse_d_nodes = self.coarse_d_nodes.unwrap_or(g.coarse_d_nodes);
        spec.mc.draws = self.mc_draws.unwrap_or(spec.mc.draws);
        spec.mc.seed = self.mc_seed.unwrap_or(spec.mc.seed);
        spec.overdispersion_prior.mean = self.logit_d_prior_mean.unwrap_or(spec.overdispersion_prior.mean);
        spec.overdispersion_prior.sd = self.logit_d_prior_sd.unwrap_or(spec.overdispersion_prior.sd);
        spec.intercept_sd = self.intercept_sd.unwrap_or(spec.intercept_sd);
        spec.fixed_sigma = self.fixed_sigma;
        spec.fixed_overdispersion = self.fixed_d;
        spec.singleton = self.singleton.unwrap_or_default();
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSummary {
    pub sigma_mean: f64,
    pub intercept_mean: f64,
    pub overdispersion_mean: Option<f64>,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDiagnostic {
    pub sigma: f64,
    pub overdispersion: Option<f64>,
    pub log_marginal: f64,
    pub log_posterior: f64,
    pub weight: f64,
}

/// How a fit predicts an area it has not seen.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Mixture(Arc<MixturePosterior>),
    Fixed { mean: f64, variance: f64 },
    Unavailable,
}

/// Per-area posterior summaries on the probability scale, aligned with the
/// area universe of the data the model was fitted to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaEstimates {
    pub model: String,
    pub areas: Vec<Id>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Whether the area contributed data to the fit.
    pub present: Vec<bool>,
    pub hyper: Option<HyperSummary>,
    pub diagnostics: Vec<NodeDiagnostic>,
    #[serde(skip)]
    pub prediction: Prediction,
}

impl AreaEstimates {
    pub fn index(&self, area: &str) -> Option<usize> {
        self.areas.binary_search_by(|a| (**a).cmp(area)).ok()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["area", "mean", "variance", "present"])?;
        for i in 0..self.areas.len() {
            w.write_record([
                self.areas[i].to_string(),
                self.mean[i].to_string(),
                self.variance[i].to_string(),
                self.present[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Hyperparameter summary and per-node diagnostics as JSON.
    pub fn hyper_json(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "hyper": self.hyper,
            "nodes": self.diagnostics,
        })
    }
}

/// Prediction for an area the fit did not see: the summary of
/// expit(α + u_new) integrated over the hyperparameter posterior.
pub fn predict_held_out_area(fit: &AreaEstimates, area: &str) -> Result<(f64, f64)> {
    let i = fit
        .index(area)
        .ok_or_else(|| Error::Contract(format!("area {area} is not in the fitted universe")))?;
    if fit.present[i] {
        return Err(Error::Contract(format!("area {area} was part of the training data")));
    }
    match &fit.prediction {
        Prediction::Mixture(post) => Ok(post.new_area()),
        Prediction::Fixed { mean, variance } => Ok((*mean, *variance)),
        Prediction::Unavailable => Err(Error::Contract(format!("model {} cannot predict unseen areas", fit.model))),
    }
}

/// Anything that maps a survey sample to per-area estimates.
pub trait AreaEstimator: Sync + Send {
    fn label(&self) -> &str;
    fn estimate(&self, dataset: &SurveyDataset, seed: u64) -> Result<AreaEstimates>;
}

impl AreaEstimator for ModelSpec {
    fn label(&self) -> &str {
        &self.name
    }

    fn estimate(&self, dataset: &SurveyDataset, seed: u64) -> Result<AreaEstimates> {
        match self.family {
            Family::FayHerriot => fit_fay_herriot(&hajek_all_with(dataset, self.singleton), self, seed),
            Family::BetaBinomial => fit_betabinomial(dataset, self, seed),
        }
    }
}

/// Predicts the same value for every area.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantEstimator {
    pub label: String,
    pub value: f64,
    pub variance: f64,
}

impl AreaEstimator for ConstantEstimator {
    fn label(&self) -> &str {
        &self.label
    }

    fn estimate(&self, dataset: &SurveyDataset, _seed: u64) -> Result<AreaEstimates> {
        let m = dataset.n_areas();
        let counts = dataset.area_unit_counts();
        Ok(AreaEstimates {
            model: self.label.clone(),
            areas: dataset.area_ids().to_vec(),
            mean: vec![self.value; m],
            variance: vec![self.variance; m],
            present: counts.iter().map(|&c| c > 0).collect(),
            hyper: None,
            diagnostics: Vec::new(),
            prediction: Prediction::Fixed { mean: self.value, variance: self.variance },
        })
    }
}

/// The Hájek estimator viewed as a model. Areas without data get NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectEstimator {
    pub label: String,
}

impl AreaEstimator for DirectEstimator {
    fn label(&self) -> &str {
        &self.label
    }

    fn estimate(&self, dataset: &SurveyDataset, _seed: u64) -> Result<AreaEstimates> {
        let directs = hajek_all(dataset);
        let mean = directs.estimates.iter().map(|e| e.as_ref().map_or(f64::NAN, |e| e.point)).collect();
        let variance = directs.estimates.iter().map(|e| e.as_ref().map_or(f64::NAN, |e| e.variance)).collect();
        Ok(AreaEstimates {
            model: self.label.clone(),
            areas: directs.areas.clone(),
            mean,
            variance,
            present: directs.estimates.iter().map(Option::is_some).collect(),
            hyper: None,
            diagnostics: Vec::new(),
            prediction: Prediction::Unavailable,
        })
    }
}

/// Assembles [`AreaEstimates`] from a mixture posterior.
pub(crate) fn estimates_from_mixture(
    spec: &ModelSpec,
    areas: Vec<Id>,
    present: Vec<bool>,
    posterior: MixturePosterior,
    diagnostics: Vec<NodeDiagnostic>,
) -> AreaEstimates {
    let (mean, variance): (Vec<f64>, Vec<f64>) = (0..areas.len()).map(|i| posterior.area(i)).unzip();
    let (sigma_mean, intercept_mean, overdispersion_mean) = posterior.hyper_means();
    AreaEstimates {
        model: spec.name.clone(),
        areas,
        mean,
        variance,
        present,
        hyper: Some(HyperSummary { sigma_mean, intercept_mean, overdispersion_mean, nodes: posterior.nodes.len() }),
        diagnostics,
        prediction: Prediction::Mixture(Arc::new(posterior)),
    }
}
