//! Area-level Fay-Herriot model on logit-transformed direct estimates.
//!
//! φ̂_i ~ N(α + u_i, V̂_i), u_i ~ N(0, σ²). Given σ everything is Gaussian, so
//! the marginal likelihood and the conditionals are closed form at each grid
//! node.

use std::f64::consts::PI;

use crate::direct::DirectEstimates;
use crate::error::{Error, Result};
use crate::models::grid::{adaptive_grid, normalised_weights, Axis};
use crate::models::summary::{MixturePosterior, NodeGaussians};
use crate::models::{estimates_from_mixture, AreaEstimates, ModelSpec, NodeDiagnostic};
use crate::rng::rng_from_seed;

/// Posterior of the intercept and log marginal likelihood at one σ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterceptPosterior {
    pub mean: f64,
    pub var: f64,
    pub log_marginal: f64,
}

/// Closed-form integration over α ~ N(0, A²) of the Gaussian marginal model
/// φ̂_i ~ N(α, V̂_i + σ²).
pub fn intercept_posterior(phi: &[f64], v: &[f64], sigma: f64, intercept_sd: f64) -> InterceptPosterior {
    let a2 = intercept_sd * intercept_sd;
    let mut precision = 1.0 / a2;
    let mut weighted = 0.0;
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for (&p, &vi) in phi.iter().zip(v) {
        let s = vi + sigma * sigma;
        precision += 1.0 / s;
        weighted += p / s;
        quad += p * p / s;
        log_det += (2.0 * PI * s).ln();
    }
    let mean = weighted / precision;
    let log_marginal = -0.5 * log_det - 0.5 * (2.0 * PI * a2).ln() + 0.5 * (2.0 * PI / precision).ln()
        - 0.5 * (quad - precision * mean * mean);
    InterceptPosterior { mean, var: 1.0 / precision, log_marginal }
}

/// Fits the model to the areas with defined logit-scale estimates; the rest
/// of the universe receives the prediction for a new area.
pub fn fit_fay_herriot(directs: &DirectEstimates, spec: &ModelSpec, seed: u64) -> Result<AreaEstimates> {
    spec.validate()?;
    let m = directs.areas.len();
    let mut used = vec![false; m];
    let mut phi = Vec::new();
    let mut v = Vec::new();
    for (i, est) in directs.estimates.iter().enumerate() {
        if let Some(l) = est.as_ref().and_then(|e| e.logit) {
            used[i] = true;
            phi.push(l.point);
            v.push(l.variance);
        }
    }
    if phi.len() < 2 {
        return Err(Error::Fit(format!(
            "model {}: needs at least 2 areas with defined logit estimates, got {}",
            spec.name,
            phi.len()
        )));
    }

    let prior = spec.sigma_prior;
    let (axis, fixed) = match spec.fixed_sigma {
        Some(s) => (Axis::fixed(s), true),
        None => {
            let lo = prior.quantile(1e-4).ln();
            let hi = prior.quantile(0.9999).max(5.0).ln();
            (Axis { lo, hi, n: spec.grid.coarse_sigma_nodes }, false)
        }
    };
    let sigma_of = |x: f64| if fixed { x } else { x.exp() };
    let log_post = |x: f64| -> Result<(f64, f64, InterceptPosterior)> {
        let sigma = sigma_of(x);
        let ip = intercept_posterior(&phi, &v, sigma, spec.intercept_sd);
        let lp = ip.log_marginal + if fixed { 0.0 } else { prior.log_density_log_sigma(x) };
        if !lp.is_finite() {
            return Err(Error::Numeric(format!(
                "model {}: non-finite log likelihood at sigma = {sigma}",
                spec.name
            )));
        }
        Ok((lp, ip.log_marginal, ip))
    };
    let points = adaptive_grid(axis, Axis::fixed(0.0), spec.grid.sigma_nodes, 1, |x, _| Ok(log_post(x)?.0))?;
    let weights = normalised_weights(&points);

    let mut nodes = Vec::with_capacity(points.len());
    let mut diagnostics = Vec::with_capacity(points.len());
    for (pt, &weight) in points.iter().zip(&weights) {
        let (lp, lml, ip) = log_post(pt.x)?;
        let sigma = sigma_of(pt.x);
        let s2 = sigma * sigma;
        let mut area_mean = Vec::with_capacity(m);
        let mut area_var = Vec::with_capacity(m);
        let mut k = 0;
        for &is_used in &used {
            if is_used {
                let shrink = s2 / (s2 + v[k]);
                area_mean.push(shrink * phi[k] + (1.0 - shrink) * ip.mean);
                area_var.push(shrink * v[k] + (1.0 - shrink).powi(2) * ip.var);
                k += 1;
            } else {
                area_mean.push(ip.mean);
                area_var.push(ip.var + s2);
            }
        }
        nodes.push(NodeGaussians {
            weight,
            sigma,
            overdispersion: None,
            intercept_mean: ip.mean,
            intercept_var: ip.var,
            area_mean,
            area_var,
        });
        diagnostics.push(NodeDiagnostic { sigma, overdispersion: None, log_marginal: lml, log_posterior: lp, weight });
    }
    let posterior = MixturePosterior::new(nodes, spec.mc.draws, &mut rng_from_seed(spec.mc_seed(seed)));
    Ok(estimates_from_mixture(spec, directs.areas.clone(), used, posterior, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direct::{DirectEstimate, LogitScale};
    use crate::models::summary::expit;
    use crate::models::predict_held_out_area;
    use crate::survey::id;

    fn directs(phi: &[f64], v: &[f64]) -> DirectEstimates {
        let areas: Vec<_> = (0..phi.len()).map(|i| id(format!("A{i}"))).collect();
        let estimates = phi
            .iter()
            .zip(v)
            .zip(&areas)
            .map(|((&p, &vi), a)| {
                Some(DirectEstimate {
                    area_id: a.clone(),
                    point: expit(p),
                    variance: vi,
                    logit: Some(LogitScale { point: p, variance: vi, floored: false }),
                    n_units: 10,
                    n_psus: 2,
                })
            })
            .collect();
        DirectEstimates { areas, estimates }
    }

    // Brute-force marginal: integrate N(φ; α1, diag(V+σ²)) N(α; 0, A²) over α
    // by quadrature.
    #[test]
    fn marginal_matches_quadrature() {
        let phi = [-1.0, 0.2, 0.7];
        let v = [0.3, 0.2, 0.5];
        let sigma = 0.4;
        let a = 3.0;
        let ip = intercept_posterior(&phi, &v, sigma, a);
        let h = 1e-3;
        let mut total = 0.0;
        let mut alpha = -30.0;
        while alpha < 30.0 {
            let mut log = -0.5 * (alpha / a).powi(2) - 0.5 * (2.0 * PI * a * a).ln();
            for (&p, &vi) in phi.iter().zip(&v) {
                let s = vi + sigma * sigma;
                log += -0.5 * (p - alpha).powi(2) / s - 0.5 * (2.0 * PI * s).ln();
            }
            total += log.exp() * h;
            alpha += h;
        }
        assert!((ip.log_marginal - total.ln()).abs() < 1e-8, "{} vs {}", ip.log_marginal, total.ln());
    }

    #[test]
    fn three_area_shrinkage() {
        let d = directs(&[-1.0, 0.0, 1.0], &[0.25, 0.25, 0.25]);
        let mut spec = ModelSpec::fay_herriot("fh", 1.0, 0.01).unwrap();
        spec.fixed_sigma = Some(0.5);
        let fit = fit_fay_herriot(&d, &spec, 1).unwrap();
        let post = match &fit.prediction {
            crate::models::Prediction::Mixture(p) => p.clone(),
            _ => unreachable!(),
        };
        let node = &post.nodes[0];
        let alpha = node.intercept_mean;
        assert!(alpha.abs() < 1e-12);
        for (i, p) in [-1.0f64, 0.0, 1.0].iter().enumerate() {
            let textbook = (p / 0.25 + alpha / 0.25) / (1.0 / 0.25 + 1.0 / 0.25);
            assert!((node.area_mean[i] - textbook).abs() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_areas_recover_common_value() {
        let d = directs(&[0.4; 6], &[0.1; 6]);
        let spec = ModelSpec::fay_herriot("fh", 1.0, 0.01).unwrap();
        let fit = fit_fay_herriot(&d, &spec, 7).unwrap();
        for i in 0..6 {
            let se = (fit.variance[i] / spec.mc.draws as f64).sqrt();
            assert!((fit.mean[i] - expit(0.4)).abs() < 3.0 * se + 1e-3, "{} {}", fit.mean[i], se);
        }
    }

    #[test]
    fn complete_pooling_at_zero_sigma() {
        let phi = [-1.0, 0.5, 1.2];
        let v = [0.2, 0.4, 0.1];
        let d = directs(&phi, &v);
        let mut spec = ModelSpec::fay_herriot("fh", 1.0, 0.01).unwrap();
        spec.fixed_sigma = Some(0.0);
        let fit = fit_fay_herriot(&d, &spec, 3).unwrap();
        assert!((fit.mean[0] - fit.mean[1]).abs() < 1e-15);
        assert!((fit.mean[1] - fit.mean[2]).abs() < 1e-15);
        let w: f64 = v.iter().map(|x| 1.0 / x).sum();
        let pooled = phi.iter().zip(&v).map(|(p, x)| p / x).sum::<f64>() / w;
        let se = (fit.variance[0] / spec.mc.draws as f64).sqrt();
        assert!((fit.mean[0] - expit(pooled)).abs() < 3.0 * se + 1e-3);
    }

    #[test]
    fn too_few_areas() {
        let d = directs(&[0.1], &[0.1]);
        let spec = ModelSpec::fay_herriot("fh", 1.0, 0.01).unwrap();
        assert!(matches!(fit_fay_herriot(&d, &spec, 1), Err(Error::Fit(_))));
    }

    #[test]
    fn undefined_area_gets_new_area_prediction() {
        let mut d = directs(&[-0.5, 0.1, 0.6, 0.2], &[0.1, 0.2, 0.1, 0.3]);
        d.estimates[3].as_mut().unwrap().logit = None;
        let spec = ModelSpec::fay_herriot("fh", 1.0, 0.01).unwrap();
        let fit = fit_fay_herriot(&d, &spec, 11).unwrap();
        assert!(!fit.present[3]);
        let (m, v) = predict_held_out_area(&fit, "A3").unwrap();
        assert_eq!(m, fit.mean[3]);
        assert_eq!(v, fit.variance[3]);
        assert!(predict_held_out_area(&fit, "A0").is_err());
    }

    #[test]
    fn deterministic() {
        let d = directs(&[-0.5, 0.1, 0.6, 0.2], &[0.1, 0.2, 0.1, 0.3]);
        let spec = ModelSpec::fay_herriot("fh", 1.0, 0.01).unwrap();
        assert_eq!(fit_fay_herriot(&d, &spec, 5).unwrap(), fit_fay_herriot(&d, &spec, 5).unwrap());
    }
}
