//! Two-pass integration grid over hyperparameters.
//!
//! A coarse pass over a wide domain locates the region holding the posterior
//! mass; a fine pass with the configured node counts covers that region.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Coarse nodes whose log posterior is within this of the maximum define the
/// fine region.
const REGION_DROP: f64 = 12.0;

/// Fine nodes whose weight falls below this fraction of the largest are
/// discarded.
pub(crate) const NEGLIGIBLE_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn fixed(x: f64) -> Self {
        Axis { lo: x, hi: x, n: 1 }
    }

    pub fn point(&self, i: usize) -> f64 {
        if self.n <= 1 {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub log_post: f64,
}

/// Visits every node of `x × y` in snake order so consecutive nodes are
/// neighbours, which lets callers warm-start inner optimisations.
fn sweep<F>(x: Axis, y: Axis, eval: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    let mut out = vec![vec![f64::NEG_INFINITY; y.n]; x.n];
    for j in 0..y.n {
        let yv = y.point(j);
        for step in 0..x.n {
            let i = if j % 2 == 0 { step } else { x.n - 1 - step };
            out[i][j] = eval(x.point(i), yv)?;
        }
    }
    Ok(out)
}

fn region(axis: Axis, lo_idx: usize, hi_idx: usize, fine_n: usize) -> Axis {
    if axis.n <= 1 {
        return axis;
    }
    let lo = lo_idx.saturating_sub(1);
    let hi = (hi_idx + 1).min(axis.n - 1);
    Axis { lo: axis.point(lo), hi: axis.point(hi), n: fine_n }
}

/// Evaluates `log_post` on the coarse grid, then on a fine grid of
/// `fine_nx × fine_ny` nodes over the region carrying the mass. Returns the
/// fine nodes with non-negligible weight.
pub fn adaptive_grid<F>(coarse_x: Axis, coarse_y: Axis, fine_nx: usize, fine_ny: usize, mut log_post: F) -> Result<Vec<GridPoint>>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    let fine = if coarse_x.n <= 1 && coarse_y.n <= 1 {
        (coarse_x, coarse_y)
    } else {
        let coarse = sweep(coarse_x, coarse_y, &mut log_post)?;
        let max = coarse.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut ilo, mut ihi, mut jlo, mut jhi) = (usize::MAX, 0, usize::MAX, 0);
        for (i, col) in coarse.iter().enumerate() {
            for (j, &v) in col.iter().enumerate() {
                if v >= max - REGION_DROP {
                    ilo = ilo.min(i);
                    ihi = ihi.max(i);
                    jlo = jlo.min(j);
                    jhi = jhi.max(j);
                }
            }
        }
        (region(coarse_x, ilo, ihi, fine_nx), region(coarse_y, jlo, jhi, fine_ny))
    };
    let values = sweep(fine.0, fine.1, &mut log_post)?;
    let max = values.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = max + NEGLIGIBLE_WEIGHT.ln();
    let mut points = Vec::new();
    for (i, col) in values.iter().enumerate() {
        for (j, &v) in col.iter().enumerate() {
            if v >= cutoff {
                points.push(GridPoint { x: fine.0.point(i), y: fine.1.point(j), log_post: v });
            }
        }
    }
    Ok(points)
}

/// Normalised weights ∝ exp(log_post).
pub fn normalised_weights(points: &[GridPoint]) -> Vec<f64> {
    let max = points.iter().map(|p| p.log_post).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = points.iter().map(|p| (p.log_post - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_mass_is_captured() {
        // log density of N(1.3, 0.2²) on a wide domain.
        let pts = adaptive_grid(Axis { lo: -10.0, hi: 10.0, n: 41 }, Axis::fixed(0.0), 31, 1, |x, _| {
            Ok(-0.5 * ((x - 1.3) / 0.2f64).powi(2))
        })
        .unwrap();
        let w = normalised_weights(&pts);
        let mean: f64 = pts.iter().zip(&w).map(|(p, w)| p.x * w).sum();
        let var: f64 = pts.iter().zip(&w).map(|(p, w)| (p.x - mean).powi(2) * w).sum();
        assert!((mean - 1.3).abs() < 1e-6, "{mean}");
        assert!((var.sqrt() - 0.2).abs() < 1e-3, "{}", var.sqrt());
    }

    #[test]
    fn fixed_axes_evaluate_once() {
        let mut calls = 0;
        let pts = adaptive_grid(Axis::fixed(0.5), Axis::fixed(2.0), 31, 21, |x, y| {
            calls += 1;
            Ok(x + y)
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(pts.len(), 1);
    }
}
