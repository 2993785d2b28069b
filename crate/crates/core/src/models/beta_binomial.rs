//! Cluster-level beta-binomial model with iid area random effects.
//!
//! Y_c ~ BetaBinomial(n_c, p_c, d), logit p_c = α + u_{area(c)},
//! u_i ~ N(0, σ²). With r = d/(1−d) the pmf is
//! C(n,y) Π_{k<y}(p+kr) Π_{k<n−y}(q+kr) / Π_{k<n}(1+kr), which reduces to
//! the binomial at d = 0. Each (σ, d) grid node is integrated by a Laplace
//! approximation around the joint mode of (α, u).

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use crate::error::{domain, Error, Result};
use crate::models::grid::{adaptive_grid, normalised_weights, Axis};
use crate::models::summary::{expit, logit, MixturePosterior, NodeGaussians};
use crate::models::{estimates_from_mixture, AreaEstimates, ModelSpec, NodeDiagnostic};
use crate::rng::rng_from_seed;
use crate::survey::SurveyDataset;

const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 30;
const GRADIENT_TOLERANCE: f64 = 1e-8;
const LOGIT_D_RANGE: (f64, f64) = (-12.0, 1.0);

fn log_choose(n: u32, y: u32) -> f64 {
    let k = y.min(n - y);
    (1..=k).map(|j| ((n - k + j) as f64 / j as f64).ln()).sum()
}

/// Log pmf of BetaBinomial(n, a, b) with a = p(1−d)/d and b = (1−p)(1−d)/d;
/// the binomial log pmf at d = 0.
pub fn betabinomial_logpmf(y: u32, n: u32, p: f64, d: f64) -> Result<f64> {
    if y > n {
        return Err(domain(format!("count {y} exceeds trials {n}")));
    }
    if !(0.0..1.0).contains(&d) {
        return Err(domain(format!("overdispersion must lie in [0,1), got {d}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(domain(format!("probability must lie in (0,1), got {p}")));
    }
    let r = d / (1.0 - d);
    let q = 1.0 - p;
    let mut out = log_choose(n, y);
    for k in 0..y {
        out += (p + k as f64 * r).ln();
    }
    for k in 0..n - y {
        out += (q + k as f64 * r).ln();
    }
    for k in 0..n {
        out -= (1.0 + k as f64 * r).ln();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct Group {
    n: usize,
    y: usize,
    count: f64,
    log_choose: f64,
}

/// Cluster counts grouped by area and by distinct (n, y).
#[derive(Debug, Clone, PartialEq)]
pub struct BetaBinomialData {
    n_areas: usize,
    groups: Vec<Vec<Group>>,
    n_max: usize,
    total_y: f64,
    total_n: f64,
}

impl BetaBinomialData {
    /// `clusters` holds (area index, trials, successes).
    pub fn from_clusters(n_areas: usize, clusters: &[(usize, u32, u32)]) -> Result<Self> {
        let mut tally: Vec<BTreeMap<(u32, u32), usize>> = vec![BTreeMap::new(); n_areas];
        let (mut total_y, mut total_n) = (0.0, 0.0);
        for &(a, n, y) in clusters {
            if a >= n_areas || y > n || n == 0 {
                return Err(domain(format!("invalid cluster (area {a}, n {n}, y {y})")));
            }
            *tally[a].entry((n, y)).or_default() += 1;
            total_y += f64::from(y);
            total_n += f64::from(n);
        }
        let groups: Vec<Vec<Group>> = tally
            .into_iter()
            .map(|t| {
                t.into_iter()
                    .map(|((n, y), c)| Group { n: n as usize, y: y as usize, count: c as f64, log_choose: log_choose(n, y) })
                    .collect()
            })
            .collect();
        let n_max = groups.iter().flatten().map(|g| g.n).max().unwrap_or(0);
        Ok(BetaBinomialData { n_areas, groups, n_max, total_y, total_n })
    }

    /// Aggregates units to cluster totals (Y_c, n_c); weights are not used.
    pub fn from_dataset(dataset: &SurveyDataset) -> Result<Self> {
        let mut per_psu: BTreeMap<usize, (u32, u32)> = BTreeMap::new();
        for (row, u) in dataset.units().iter().enumerate() {
            let e = per_psu.entry(dataset.row_psu(row)).or_default();
            e.0 += 1;
            e.1 += u32::from(u.y);
        }
        let clusters: Vec<(usize, u32, u32)> =
            per_psu.into_iter().map(|(p, (n, y))| (dataset.psu_area(p), n, y)).collect();
        Self::from_clusters(dataset.n_areas(), &clusters)
    }

    pub fn has_data(&self, area: usize) -> bool {
        !self.groups[area].is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.groups.iter().flatten().map(|g| g.count as usize).sum()
    }
}

/// Scratch prefix sums for one area evaluation.
struct Workspace {
    log_p: Vec<f64>,
    inv_p: Vec<f64>,
    inv_p2: Vec<f64>,
    log_q: Vec<f64>,
    inv_q: Vec<f64>,
    inv_q2: Vec<f64>,
    log_one: Vec<f64>,
}

impl Workspace {
    fn new(n_max: usize) -> Self {
        let v = || vec![0.0; n_max + 1];
        Workspace { log_p: v(), inv_p: v(), inv_p2: v(), log_q: v(), inv_q: v(), inv_q2: v(), log_one: v() }
    }

    /// f, f', f'' of the area log likelihood as a function of η.
    fn area(&mut self, groups: &[Group], eta: f64, r: f64) -> (f64, f64, f64) {
        let p = expit(eta);
        let q = expit(-eta);
        let top = groups.iter().map(|g| g.n).max().unwrap_or(0);
        for k in 0..top {
            let kr = k as f64 * r;
            let a = p + kr;
            let b = q + kr;
            self.log_p[k + 1] = self.log_p[k] + a.ln();
            self.inv_p[k + 1] = self.inv_p[k] + 1.0 / a;
            self.inv_p2[k + 1] = self.inv_p2[k] + 1.0 / (a * a);
            self.log_q[k + 1] = self.log_q[k] + b.ln();
            self.inv_q[k + 1] = self.inv_q[k] + 1.0 / b;
            self.inv_q2[k + 1] = self.inv_q2[k] + 1.0 / (b * b);
            self.log_one[k + 1] = self.log_one[k] + kr.ln_1p();
        }
        let pq = p * q;
        let (mut f, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for g in groups {
            let m = g.n - g.y;
            let diff = self.inv_p[g.y] - self.inv_q[m];
            f += g.count * (g.log_choose + self.log_p[g.y] + self.log_q[m] - self.log_one[g.n]);
            d1 += g.count * diff;
            d2 += g.count * ((q - p) * diff - pq * (self.inv_p2[g.y] + self.inv_q2[m]));
        }
        (f, pq * d1, pq * d2)
    }
}

/// Laplace approximation at one (σ, d) node.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceNode {
    /// Joint mode: intercept followed by the random effects of areas with data.
    pub mode: Vec<f64>,
    pub log_marginal: f64,
    pub intercept_var: f64,
    /// Logit-scale mean and variance of α + u_i per area of the universe; for
    /// areas without data, α + u_new.
    pub area_mean: Vec<f64>,
    pub area_var: Vec<f64>,
    pub iterations: usize,
}

struct Evaluation {
    objective: f64,
    grad: Vec<f64>,
    /// −f_i'' per data area.
    curvature: Vec<f64>,
}

struct Problem<'a> {
    data: &'a BetaBinomialData,
    areas: Vec<usize>,
    sigma: f64,
    r: f64,
    intercept_sd: f64,
}

impl Problem<'_> {
    fn pooled(&self) -> bool {
        self.sigma == 0.0
    }

    fn evaluate(&self, x: &[f64], ws: &mut Workspace) -> Evaluation {
        let alpha = x[0];
        let a2 = self.intercept_sd * self.intercept_sd;
        let mut objective = -0.5 * alpha * alpha / a2 - 0.5 * (2.0 * PI * a2).ln();
        let mut grad = vec![0.0; x.len()];
        let mut curvature = Vec::with_capacity(self.areas.len());
        grad[0] = -alpha / a2;
        let s2 = self.sigma * self.sigma;
        for (k, &a) in self.areas.iter().enumerate() {
            let u = if self.pooled() { 0.0 } else { x[k + 1] };
            let (f, d1, d2) = ws.area(&self.data.groups[a], alpha + u, self.r);
            objective += f;
            grad[0] += d1;
            curvature.push(-d2);
            if !self.pooled() {
                objective -= 0.5 * u * u / s2 + 0.5 * (2.0 * PI * s2).ln();
                grad[k + 1] = d1 - u / s2;
            }
        }
        Evaluation { objective, grad, curvature }
    }

    /// Solves H δ = g for the arrow-shaped negative Hessian. Returns δ, the
    /// diagonal pivots D_i and the Schur complement S, or `None` if H is not
    /// positive definite.
    fn solve(&self, e: &Evaluation, floor_curvature: bool) -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let h: Vec<f64> = e.curvature.iter().map(|&c| if floor_curvature { c.max(0.0) } else { c }).collect();
        let a2 = self.intercept_sd * self.intercept_sd;
        let h_alpha: f64 = h.iter().sum::<f64>() + 1.0 / a2;
        if self.pooled() {
            if h_alpha <= 0.0 {
                return None;
            }
            return Some((vec![e.grad[0] / h_alpha], Vec::new(), h_alpha));
        }
        let prec = 1.0 / (self.sigma * self.sigma);
        let pivots: Vec<f64> = h.iter().map(|&hi| hi + prec).collect();
        if pivots.iter().any(|&d| d <= 0.0) {
            return None;
        }
        let schur = h_alpha - h.iter().zip(&pivots).map(|(hi, di)| hi * hi / di).sum::<f64>();
        if schur <= 0.0 {
            return None;
        }
        let rhs = e.grad[0] - h.iter().zip(&pivots).zip(&e.grad[1..]).map(|((hi, di), gi)| hi * gi / di).sum::<f64>();
        let step_alpha = rhs / schur;
        let mut step = Vec::with_capacity(e.grad.len());
        step.push(step_alpha);
        for ((hi, di), gi) in h.iter().zip(&pivots).zip(&e.grad[1..]) {
            step.push((gi - hi * step_alpha) / di);
        }
        Some((step, pivots, schur))
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Finds the joint mode of (α, u) at fixed (σ, d) by damped Newton and
/// returns the Laplace approximation there. `start` is an optional warm
/// start of the same layout as [`LaplaceNode::mode`].
pub fn laplace_node(
    data: &BetaBinomialData,
    sigma: f64,
    d: f64,
    intercept_sd: f64,
    start: Option<&[f64]>,
) -> Result<LaplaceNode> {
    let areas: Vec<usize> = (0..data.n_areas).filter(|&a| data.has_data(a)).collect();
    if areas.is_empty() {
        return Err(Error::Fit("no clusters to fit".into()));
    }
    let problem = Problem { data, areas, sigma, r: d / (1.0 - d), intercept_sd };
    let dim = if problem.pooled() { 1 } else { problem.areas.len() + 1 };
    let mut x = match start {
        Some(s) if s.len() == dim && s.iter().all(|v| v.is_finite()) => s.to_vec(),
        _ => {
            let pooled = (data.total_y / data.total_n).clamp(1e-3, 1.0 - 1e-3);
            let mut x = vec![0.0; dim];
            x[0] = logit(pooled);
            x
        }
    };
    let node = || format!("sigma = {sigma}, d = {d}");
    let mut ws = Workspace::new(data.n_max);
    let mut eval = problem.evaluate(&x, &mut ws);
    let mut iterations = 0;
    loop {
        if max_abs(&eval.grad) < GRADIENT_TOLERANCE {
            break;
        }
        if iterations == MAX_ITERATIONS {
            return Err(Error::Fit(format!("Newton did not converge in {MAX_ITERATIONS} iterations at {}", node())));
        }
        iterations += 1;
        let (step, _, _) = problem
            .solve(&eval, false)
            .or_else(|| problem.solve(&eval, true))
            .ok_or_else(|| Error::Numeric(format!("singular Hessian at {}", node())))?;
        let mut scale = 1.0;
        let tolerance = 1e-12 * eval.objective.abs().max(1.0);
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(xi, si)| xi + scale * si).collect();
            let e = problem.evaluate(&trial, &mut ws);
            if e.objective.is_finite() && e.objective >= eval.objective - tolerance {
                accepted = Some((trial, e));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((trial, e)) => {
                x = trial;
                eval = e;
            }
            // Rounding can stall the line search right at the mode.
            None if max_abs(&eval.grad) < 1e3 * GRADIENT_TOLERANCE => break,
            None => return Err(Error::Fit(format!("line search failed at {}", node()))),
        }
    }

    let (_, pivots, schur) = problem
        .solve(&eval, false)
        .ok_or_else(|| Error::Numeric(format!("Hessian not positive definite at the mode, {}", node())))?;
    let log_det: f64 = pivots.iter().map(|d| d.ln()).sum::<f64>() + schur.ln();
    let log_marginal = eval.objective + 0.5 * dim as f64 * (2.0 * PI).ln() - 0.5 * log_det;
    if !log_marginal.is_finite() {
        return Err(Error::Numeric(format!("non-finite Laplace marginal at {}", node())));
    }
    let intercept_var = 1.0 / schur;
    let new_var = intercept_var + sigma * sigma;
    let mut area_mean = vec![x[0]; data.n_areas];
    let mut area_var = vec![new_var; data.n_areas];
    for (k, &a) in problem.areas.iter().enumerate() {
        if problem.pooled() {
            area_var[a] = intercept_var;
        } else {
            let ratio = eval.curvature[k] / pivots[k];
            area_mean[a] = x[0] + x[k + 1];
            area_var[a] = 1.0 / pivots[k] + (1.0 - ratio) * (1.0 - ratio) / schur;
        }
    }
    Ok(LaplaceNode { mode: x, log_marginal, intercept_var, area_mean, area_var, iterations })
}

/// Fits the model to the cluster totals of `dataset`.
pub fn fit_betabinomial(dataset: &SurveyDataset, spec: &ModelSpec, seed: u64) -> Result<AreaEstimates> {
    spec.validate()?;
    let data = BetaBinomialData::from_dataset(dataset)?;
    if data.n_clusters() == 0 {
        return Err(Error::Fit(format!("model {}: dataset has no clusters", spec.name)));
    }
    let prior = spec.sigma_prior;
    let (sigma_axis, sigma_fixed) = match spec.fixed_sigma {
        Some(s) => (Axis::fixed(s), true),
        None => (
            Axis {
                lo: prior.quantile(1e-4).ln(),
                hi: prior.quantile(0.9999).max(5.0).ln(),
                n: spec.grid.coarse_sigma_nodes,
            },
            false,
        ),
    };
    let (d_axis, d_fixed) = match spec.fixed_overdispersion {
        Some(d) => (Axis::fixed(d), true),
        None => (Axis { lo: LOGIT_D_RANGE.0, hi: LOGIT_D_RANGE.1, n: spec.grid.coarse_d_nodes }, false),
    };
    let sigma_of = |x: f64| if sigma_fixed { x } else { x.exp() };
    let d_of = |y: f64| if d_fixed { y } else { expit(y) };

    let mut warm: Option<Vec<f64>> = None;
    let mut solved: HashMap<(u64, u64), (LaplaceNode, f64)> = HashMap::new();
    let points = adaptive_grid(sigma_axis, d_axis, spec.grid.sigma_nodes, spec.grid.d_nodes, |x, y| {
        let (sigma, d) = (sigma_of(x), d_of(y));
        let node = match laplace_node(&data, sigma, d, spec.intercept_sd, warm.as_deref()) {
            Ok(n) => n,
            Err(_) if warm.is_some() => laplace_node(&data, sigma, d, spec.intercept_sd, None)?,
            Err(e) => return Err(e),
        };
        let mut lp = node.log_marginal;
        if !sigma_fixed {
            lp += prior.log_density_log_sigma(x);
        }
        if !d_fixed {
            lp += spec.overdispersion_prior.log_density(y);
        }
        warm = Some(node.mode.clone());
        solved.insert((x.to_bits(), y.to_bits()), (node, lp));
        Ok(lp)
    })
    .map_err(|e| match e {
        Error::Fit(m) => Error::Fit(format!("model {}: {m}", spec.name)),
        Error::Numeric(m) => Error::Numeric(format!("model {}: {m}", spec.name)),
        other => other,
    })?;
    let weights = normalised_weights(&points);

    let mut nodes = Vec::with_capacity(points.len());
    let mut diagnostics = Vec::with_capacity(points.len());
    for (pt, &weight) in points.iter().zip(&weights) {
        let (node, lp) = solved.remove(&(pt.x.to_bits(), pt.y.to_bits())).expect("every grid point was solved");
        let (sigma, d) = (sigma_of(pt.x), d_of(pt.y));
        diagnostics.push(NodeDiagnostic {
            sigma,
            overdispersion: Some(d),
            log_marginal: node.log_marginal,
            log_posterior: lp,
            weight,
        });
        nodes.push(NodeGaussians {
            weight,
            sigma,
            overdispersion: Some(d),
            intercept_mean: node.mode[0],
            intercept_var: node.intercept_var,
            area_mean: node.area_mean,
            area_var: node.area_var,
        });
    }
    let present = (0..data.n_areas).map(|a| data.has_data(a)).collect();
    let posterior = MixturePosterior::new(nodes, spec.mc.draws, &mut rng_from_seed(spec.mc_seed(seed)));
    Ok(estimates_from_mixture(spec, dataset.area_ids().to_vec(), present, posterior, diagnostics))
}
