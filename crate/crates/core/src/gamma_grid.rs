//! Data-driven ranges for the policy coefficients `gamma`.
//!
//! Each cluster gets a univariate logistic regression (with intercept) of
//! treatment on one covariate. The range for that covariate runs between
//! percentiles of the fitted slopes over the clusters where the fit has a
//! finite maximum-likelihood estimate.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{ClusterData, Dataset};
use crate::error::{Error, Result};
use crate::numeric::{expit, percentile_sorted};

pub const MAX_IRLS_ITERATIONS: usize = 50;
pub const SCORE_TOLERANCE: f64 = 1e-8;
pub const MIN_CONVERGED: usize = 5;
pub const DEFAULT_PERCENTILES: (f64, f64) = (0.10, 0.90);
pub const DEFAULT_POINTS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SlopeFit {
    Converged { intercept: f64, slope: f64, iterations: usize },
    /// Treatment is constant within the cluster.
    ConstantTreatment,
    ConstantCovariate,
    /// The covariate separates treated from untreated units (possibly with ties).
    Separated,
    NoConvergence,
}

impl SlopeFit {
    pub fn slope(&self) -> Option<f64> {
        match self {
            SlopeFit::Converged { slope, .. } => Some(*slope),
            _ => None,
        }
    }
}

/// Maximum-likelihood fit of `logit P(A = 1) = b0 + b1 X_k` by IRLS.
pub fn per_cluster_logit_slope(cluster: &ClusterData, k: usize) -> SlopeFit {
    let a: Vec<f64> = cluster.treatment.iter().map(|&t| t as f64).collect();
    let x: Vec<f64> = (0..cluster.len()).map(|j| cluster.covariate(j, k)).collect();
    logit_slope(&x, &a)
}

fn logit_slope(x: &[f64], a: &[f64]) -> SlopeFit {
    let n = a.len() as f64;
    let treated = a.iter().sum::<f64>();
    if treated == 0.0 || treated == n {
        return SlopeFit::ConstantTreatment;
    }
    let extent = |arm: f64| {
        x.iter()
            .zip(a)
            .filter(|(_, &t)| t == arm)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)))
    };
    let (lo0, hi0) = extent(0.0);
    let (lo1, hi1) = extent(1.0);
    if lo0.min(lo1) == hi0.max(hi1) {
        return SlopeFit::ConstantCovariate;
    }
    if hi0 <= lo1 || hi1 <= lo0 {
        return SlopeFit::Separated;
    }

    let mut b0 = (treated / (n - treated)).ln();
    let mut b1 = 0.0;
    for it in 0..=MAX_IRLS_ITERATIONS {
        let (mut s0, mut s1, mut i00, mut i01, mut i11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xj, &aj) in x.iter().zip(a) {
            let p = expit(b0 + b1 * xj);
            let w = p * (1.0 - p);
            s0 += aj - p;
            s1 += (aj - p) * xj;
            i00 += w;
            i01 += w * xj;
            i11 += w * xj * xj;
        }
        if s0.abs().max(s1.abs()) < SCORE_TOLERANCE {
            return SlopeFit::Converged { intercept: b0, slope: b1, iterations: it };
        }
        if it == MAX_IRLS_ITERATIONS {
            break;
        }
        let det = i00 * i11 - i01 * i01;
        if !(det > 0.0) || !det.is_finite() {
            break;
        }
        b0 += (i11 * s0 - i01 * s1) / det;
        b1 += (i00 * s1 - i01 * s0) / det;
    }
    SlopeFit::NoConvergence
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaRange {
    pub covariate: usize,
    pub name: String,
    /// Per-cluster fits, in dataset order.
    pub delta: Vec<SlopeFit>,
    pub lo: f64,
    pub hi: f64,
    pub n_converged: usize,
    pub n_dropped: usize,
}

/// Percentile range of the per-cluster slopes of covariate `k`.
pub fn gamma_range(dataset: &Dataset, k: usize, percentiles: (f64, f64)) -> Result<GammaRange> {
    if k >= dataset.n_covariates() {
        return Err(Error::IndexOutOfRange { index: k, len: dataset.n_covariates() });
    }
    let (p_lo, p_hi) = percentiles;
    if !(0.0..=1.0).contains(&p_lo) || !(0.0..=1.0).contains(&p_hi) || p_lo > p_hi {
        return Err(Error::invalid(format!("invalid percentiles ({p_lo}, {p_hi})")));
    }
    let delta: Vec<SlopeFit> = dataset.clusters().par_iter().map(|c| per_cluster_logit_slope(c, k)).collect();
    let mut slopes: Vec<f64> = delta.iter().filter_map(SlopeFit::slope).collect();
    if slopes.len() < MIN_CONVERGED {
        return Err(Error::TooFewClusters { needed: MIN_CONVERGED, found: slopes.len() });
    }
    slopes.sort_by(f64::total_cmp);
    Ok(GammaRange {
        covariate: k,
        name: dataset.covariate_names()[k].clone(),
        n_converged: slopes.len(),
        n_dropped: delta.len() - slopes.len(),
        lo: percentile_sorted(&slopes, p_lo),
        hi: percentile_sorted(&slopes, p_hi),
        delta,
    })
}

/// `points` evenly spaced values on `[lo, hi]`, plus 0 when it lies inside.
pub fn axis_points(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let mut out: Vec<f64> = if points == 1 || lo == hi {
        vec![lo]
    } else {
        let step = (hi - lo) / (points - 1) as f64;
        (0..points)
            .map(|i| if i + 1 == points { hi } else { lo + step * i as f64 })
            .map(|v| if v.abs() < 1e-12 * (hi - lo) { 0.0 } else { v })
            .collect()
    };
    if lo <= 0.0 && 0.0 <= hi && !out.contains(&0.0) {
        out.push(0.0);
        out.sort_by(f64::total_cmp);
    }
    out
}

/// Cartesian product of the axis points of each range, embedded in
/// `n_covariates`-vectors with zeros elsewhere. The zero vector is appended
/// when the product does not contain it.
pub fn materialize_grid(ranges: &[GammaRange], n_covariates: usize, points: usize) -> Result<Vec<Vec<f64>>> {
    let bounds: Vec<(usize, f64, f64)> = ranges.iter().map(|r| (r.covariate, r.lo, r.hi)).collect();
    grid_from_bounds(&bounds, n_covariates, points)
}

/// As [`materialize_grid`], from `(covariate, lo, hi)` triples.
pub fn grid_from_bounds(bounds: &[(usize, f64, f64)], n_covariates: usize, points: usize) -> Result<Vec<Vec<f64>>> {
    if bounds.is_empty() {
        return Err(Error::invalid("no covariates selected for the gamma grid"));
    }
    if points < 2 {
        return Err(Error::invalid("at least 2 points per axis required"));
    }
    for (i, &(k, lo, hi)) in bounds.iter().enumerate() {
        if k >= n_covariates {
            return Err(Error::IndexOutOfRange { index: k, len: n_covariates });
        }
        if bounds[..i].iter().any(|b| b.0 == k) {
            return Err(Error::invalid(format!("covariate {k} listed twice")));
        }
        if !(lo <= hi) {
            return Err(Error::invalid(format!("empty range [{lo}, {hi}]")));
        }
    }
    let mut grid = vec![vec![0.0; n_covariates]];
    for &(k, lo, hi) in bounds {
        let axis = axis_points(lo, hi, points);
        grid = grid
            .iter()
            .flat_map(|g| {
                axis.iter().map(move |&v| {
                    let mut g = g.clone();
                    g[k] = v;
                    g
                })
            })
            .collect();
    }
    let zero = vec![0.0; n_covariates];
    if !grid.contains(&zero) {
        grid.push(zero);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(x: &[f64], a: &[u8]) -> ClusterData {
        ClusterData::new("c", x.to_vec(), 1, a.to_vec(), vec![0.0; a.len()]).unwrap()
    }

    #[test]
    fn degenerate_clusters() {
        assert_eq!(per_cluster_logit_slope(&cluster(&[0.0, 1.0, 2.0], &[1, 1, 1]), 0), SlopeFit::ConstantTreatment);
        assert_eq!(per_cluster_logit_slope(&cluster(&[1.0, 1.0, 1.0], &[0, 1, 1]), 0), SlopeFit::ConstantCovariate);
        assert_eq!(per_cluster_logit_slope(&cluster(&[0.0, 1.0, 2.0], &[0, 1, 1]), 0), SlopeFit::Separated);
        // quasi-complete: tie at the boundary
        assert_eq!(per_cluster_logit_slope(&cluster(&[0.0, 1.0, 1.0, 2.0], &[0, 0, 1, 1]), 0), SlopeFit::Separated);
    }

    #[test]
    fn balanced_table_has_zero_slope() {
        let f = per_cluster_logit_slope(&cluster(&[0.0, 1.0, 0.0, 1.0], &[0, 0, 1, 1]), 0);
        assert!(f.slope().unwrap().abs() < 1e-10);
    }

    #[test]
    fn two_by_two_matches_log_odds_ratio() {
        // cells (x, a): (0,0)=3, (0,1)=1, (1,0)=2, (1,1)=5
        let mut x = vec![];
        let mut a = vec![];
        for (xv, av, n) in [(0.0, 0, 3), (0.0, 1, 1), (1.0, 0, 2), (1.0, 1, 5)] {
            for _ in 0..n {
                x.push(xv);
                a.push(av);
            }
        }
        let f = per_cluster_logit_slope(&cluster(&x, &a), 0);
        let lor = ((5.0 * 3.0) / (2.0 * 1.0_f64)).ln();
        assert!((f.slope().unwrap() - lor).abs() < 1e-6);
    }

    #[test]
    fn continuous_fit_satisfies_score_equations() {
        let x = [-1.2, -0.4, 0.1, 0.3, 0.9, 1.5, 2.0, -2.2];
        let a = [0u8, 1, 0, 1, 1, 0, 1, 0];
        let SlopeFit::Converged { intercept, slope, .. } = per_cluster_logit_slope(&cluster(&x, &a), 0) else {
            panic!("no fit")
        };
        let (mut s0, mut s1) = (0.0, 0.0);
        for (xv, av) in x.iter().zip(a) {
            let r = av as f64 - expit(intercept + slope * xv);
            s0 += r;
            s1 += r * xv;
        }
        assert!(s0.abs() < 1e-8 && s1.abs() < 1e-8);
    }

    #[test]
    fn axis_examples() {
        assert_eq!(axis_points(-1.0, 1.0, 3), vec![-1.0, 0.0, 1.0]);
        let asym = axis_points(-0.29, 0.091, 9);
        assert_eq!(asym.first(), Some(&-0.29));
        assert_eq!(asym.last(), Some(&0.091));
        assert!(asym.contains(&0.0));
        assert_eq!(asym.len(), 10);
        assert_eq!(axis_points(0.2, 0.5, 4).len(), 4);
    }

    #[test]
    fn grid_products() {
        let g = grid_from_bounds(&[(0, -1.0, 1.0)], 2, 3).unwrap();
        assert_eq!(g, vec![vec![-1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]);
        let g = grid_from_bounds(&[(0, -1.0, 1.0), (1, -2.0, 2.0)], 2, 3).unwrap();
        assert_eq!(g.len(), 9);
        let g = grid_from_bounds(&[(1, 0.5, 1.0)], 2, 2).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.last().unwrap(), &vec![0.0, 0.0]);
        assert!(grid_from_bounds(&[], 2, 3).is_err());
        assert!(grid_from_bounds(&[(0, -1.0, 1.0)], 2, 1).is_err());
    }

    #[test]
    fn range_over_clusters() {
        // slope of cluster i is ln(i) by construction (2x2 tables)
        let clusters: Vec<ClusterData> = (1..=8)
            .map(|i| {
                let mut x = vec![];
                let mut a = vec![];
                for (xv, av, n) in [(0.0, 0u8, 1), (0.0, 1, 1), (1.0, 0, 1), (1.0, 1, i)] {
                    for _ in 0..n {
                        x.push(xv);
                        a.push(av);
                    }
                }
                let len = a.len();
                ClusterData::new(format!("c{i}"), x, 1, a, vec![0.0; len]).unwrap()
            })
            .chain(std::iter::once(
                ClusterData::new("sep", vec![0.0, 1.0], 1, vec![0, 1], vec![0.0; 2]).unwrap(),
            ))
            .collect();
        let ds = Dataset::new(clusters, vec!["x".into()]).unwrap();
        let r = gamma_range(&ds, 0, (0.0, 1.0)).unwrap();
        assert_eq!((r.n_converged, r.n_dropped), (8, 1));
        assert!(r.lo.abs() < 1e-6 && (r.hi - 8f64.ln()).abs() < 1e-6);
        assert!(gamma_range(&ds, 1, DEFAULT_PERCENTILES).is_err());
    }
}
