//! Priors on the random-effect standard deviation and on the overdispersion.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Exponential rate of the penalised-complexity prior with Pr(σ > U) = alpha.
pub fn pc_rate(u: f64, alpha: f64) -> Result<f64> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(domain(format!("PC prior upper value must be positive, got {u}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!("PC prior tail probability must lie in (0,1), got {alpha}")));
    }
    Ok(-alpha.ln() / u)
}

/// Penalised-complexity prior on a standard deviation: exponential with
/// rate −ln(alpha)/U.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PcPrior {
    pub u: f64,
    pub alpha: f64,
    pub rate: f64,
}

impl PcPrior {
    pub fn new(u: f64, alpha: f64) -> Result<Self> {
        Ok(PcPrior { u, alpha, rate: pc_rate(u, alpha)? })
    }

    pub fn log_density(&self, sigma: f64) -> f64 {
        self.rate.ln() - self.rate * sigma
    }

    /// Log density of log σ.
    pub fn log_density_log_sigma(&self, log_sigma: f64) -> f64 {
        let sigma = log_sigma.exp();
        self.log_density(sigma) + log_sigma
    }

    pub fn quantile(&self, p: f64) -> f64 {
        -(-p).ln_1p() / self.rate
    }
}

impl<'de> Deserialize<'de> for PcPrior {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            u: f64,
            alpha: f64,
        }
        let raw = Raw::deserialize(d)?;
        PcPrior::new(raw.u, raw.alpha).map_err(serde::de::Error::custom)
    }
}

/// Normal prior, used on logit d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

impl Default for NormalPrior {
    fn default() -> Self {
        NormalPrior { mean: 0.0, sd: 10.0 }
    }
}
