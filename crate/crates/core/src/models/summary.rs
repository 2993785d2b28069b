//! Probability-scale summaries of a Gaussian mixture posterior on the logit
//! scale, by weighted Monte Carlo.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Gaussian approximations of the logit-scale quantities at one
/// hyperparameter node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGaussians {
    pub weight: f64,
    pub sigma: f64,
    /// Overdispersion at the node; `None` for area-level models.
    pub overdispersion: Option<f64>,
    pub intercept_mean: f64,
    pub intercept_var: f64,
    /// Per area of the universe: logit mean and variance. For areas without
    /// data these describe α + u_new.
    pub area_mean: Vec<f64>,
    pub area_var: Vec<f64>,
}

impl NodeGaussians {
    /// Distribution of α + u_new for an unseen area.
    pub fn new_area(&self) -> (f64, f64) {
        (self.intercept_mean, self.intercept_var + self.sigma * self.sigma)
    }
}

/// Mixture over hyperparameter nodes together with the Monte Carlo draws
/// used to summarise it, so later predictions reuse the same draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePosterior {
    pub nodes: Vec<NodeGaussians>,
    /// Antithetic pairs: node index and a standard normal deviate. Each pair
    /// contributes the draws at +z and −z.
    pub draws: Vec<(u32, f64)>,
}

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl MixturePosterior {
    /// Allocates `n_draws` draws (rounded up to an even count) to nodes by
    /// systematic resampling on the node weights.
    pub fn new<R: Rng>(nodes: Vec<NodeGaussians>, n_draws: usize, rng: &mut R) -> Self {
        let pairs = n_draws.div_ceil(2).max(1);
        let start: f64 = rng.random::<f64>();
        let mut draws = Vec::with_capacity(pairs);
        let mut node = 0;
        let mut cumulative = nodes[0].weight;
        for k in 0..pairs {
            let position = (k as f64 + start) / pairs as f64;
            while position > cumulative && node + 1 < nodes.len() {
                node += 1;
                cumulative += nodes[node].weight;
            }
            let z: f64 = rng.sample(StandardNormal);
            draws.push((node as u32, z));
        }
        MixturePosterior { nodes, draws }
    }

    /// Mean and variance of expit(η) where η | node ~ N(mean(node), var(node)).
    pub fn summarise(&self, gaussian: impl Fn(&NodeGaussians) -> (f64, f64)) -> (f64, f64) {
        let params: Vec<(f64, f64)> = self.nodes.iter().map(|n| {
            let (m, v) = gaussian(n);
            (m, v.max(0.0).sqrt())
        }).collect();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for &(node, z) in &self.draws {
            let (m, s) = params[node as usize];
            let a = expit(m + s * z);
            let b = expit(m - s * z);
            sum += a + b;
            sum_sq += a * a + b * b;
        }
        let n = 2.0 * self.draws.len() as f64;
        let mean = sum / n;
        (mean, (sum_sq / n - mean * mean).max(0.0))
    }

    pub fn area(&self, i: usize) -> (f64, f64) {
        self.summarise(|n| (n.area_mean[i], n.area_var[i]))
    }

    pub fn new_area(&self) -> (f64, f64) {
        self.summarise(NodeGaussians::new_area)
    }

    /// Posterior means of σ, α, and d (when present).
    pub fn hyper_means(&self) -> (f64, f64, Option<f64>) {
        let sigma = self.nodes.iter().map(|n| n.weight * n.sigma).sum();
        let alpha = self.nodes.iter().map(|n| n.weight * n.intercept_mean).sum();
        let d = self
            .nodes
            .iter()
            .map(|n| n.overdispersion.map(|d| n.weight * d))
            .sum::<Option<f64>>();
        (sigma, alpha, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn node(weight: f64, mean: f64, var: f64) -> NodeGaussians {
        NodeGaussians {
            weight,
            sigma: 0.0,
            overdispersion: None,
            intercept_mean: mean,
            intercept_var: var,
            area_mean: vec![mean],
            area_var: vec![var],
        }
    }

    #[test]
    fn point_mass_is_exact() {
        let post = MixturePosterior::new(vec![node(1.0, 0.3, 0.0)], 1000, &mut rng_from_seed(1));
        let (m, v) = post.area(0);
        assert!((m - expit(0.3)).abs() < 1e-13);
        assert!(v < 1e-13);
    }

    #[test]
    fn systematic_allocation_follows_weights() {
        let post = MixturePosterior::new(vec![node(0.25, 0.0, 1.0), node(0.75, 1.0, 1.0)], 2000, &mut rng_from_seed(3));
        let first = post.draws.iter().filter(|d| d.0 == 0).count();
        assert!((first as i64 - 250).abs() <= 1);
    }

    #[test]
    fn matches_numerical_integration() {
        let post = MixturePosterior::new(vec![node(1.0, 0.4, 0.5)], 20000, &mut rng_from_seed(5));
        let (m, _) = post.area(0);
        // Trapezoid integral of expit(0.4 + √0.5 z) φ(z).
        let s = 0.5f64.sqrt();
        let h = 1e-3;
        let mut exact = 0.0;
        let mut z = -10.0;
        while z <= 10.0 {
            exact += expit(0.4 + s * z) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * h;
            z += h;
        }
        assert!((m - exact).abs() < 2e-3, "{m} vs {exact}");
    }
}
