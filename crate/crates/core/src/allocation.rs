//! Hypothetical stochastic allocation policies.
//!
//! A policy treats units independently with
//! `logit P(A_ij = 1) = xi_i + gamma' X_ij`, where the cluster intercept
//! `xi_i` is chosen so that the propensities of cluster `i` average to
//! `alpha`. The mean-propensity map is continuous and strictly increasing in
//! `xi` with limits 0 and 1, so the intercept always exists and is unique.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset};
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, expit, log_expit, logit};

/// Default tolerance on `|mean propensity - alpha|`.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPolicy {
    pub alpha: f64,
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub link: Link,
}

impl AllocationPolicy {
    pub fn new(alpha: f64, gamma: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("gamma must be finite"));
        }
        Ok(Self { alpha, gamma, link: Link::Logit })
    }
}

/// `gamma' X_ij` for every unit of a cluster.
pub fn linear_offsets(cluster: &ClusterData, gamma: &[f64]) -> Result<Vec<f64>> {
    if gamma.len() != cluster.n_covariates() {
        return Err(Error::DimensionMismatch {
            expected: cluster.n_covariates(),
            found: gamma.len(),
        });
    }
    Ok((0..cluster.len())
        .map(|j| cluster.row(j).iter().zip(gamma).map(|(x, g)| x * g).sum())
        .collect())
}

/// Solves `mean_j expit(xi + offsets_j) = alpha` for `xi`.
///
/// Safeguarded Newton iteration inside the bracket
/// `[logit(alpha) - M - 1, logit(alpha) + M + 1]`, `M = max_j |offsets_j|`;
/// every propensity is at most `alpha` at the lower end and at least `alpha`
/// at the upper end, so the root lies inside. Steps leaving the bracket are
/// replaced by bisection.
pub fn solve_intercept(offsets: &[f64], alpha: f64, tol: f64) -> f64 {
    debug_assert!(alpha > 0.0 && alpha < 1.0 && tol > 0.0 && !offsets.is_empty());
    let n = offsets.len() as f64;
    let residual = |xi: f64| -> (f64, f64) {
        let mut g = 0.0;
        let mut dg = 0.0;
        for &o in offsets {
            let p = expit(xi + o);
            g += p;
            dg += p * (1.0 - p);
        }
        (g / n - alpha, dg / n)
    };

    let center = logit(alpha);
    let m = offsets.iter().fold(0.0f64, |acc, o| acc.max(o.abs()));
    let mut lo = center - m - 1.0;
    let mut hi = center + m + 1.0;
    let mut xi = center - offsets.iter().sum::<f64>() / n;
    if !(xi > lo && xi < hi) {
        xi = 0.5 * (lo + hi);
    }

    let mut best = (f64::INFINITY, xi);
    for _ in 0..MAX_ITERATIONS {
        let (g, dg) = residual(xi);
        if g.abs() < best.0 {
            best = (g.abs(), xi);
        }
        if g.abs() <= tol {
            // one more Newton step brings the residual to round-off level
            let polished = xi - g / dg;
            if dg > 0.0 && polished.is_finite() && residual(polished).0.abs() <= g.abs() {
                return polished;
            }
            return xi;
        }
        if g < 0.0 {
            lo = xi;
        } else {
            hi = xi;
        }
        let newton = xi - g / dg;
        let next = if dg > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if next == xi || hi - lo <= f64::EPSILON * xi.abs().max(1.0) {
            break;
        }
        xi = next;
    }
    best.1
}

/// A policy's solution on one cluster: intercept plus per-unit log
/// propensities, cached for every downstream computation.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedCluster {
    pub xi: f64,
    linear: Vec<f64>,
    log_p: Vec<f64>,
    log_q: Vec<f64>,
}

impl SolvedCluster {
    pub fn solve(cluster: &ClusterData, policy: &AllocationPolicy, tol: f64) -> Result<Self> {
        let offsets = linear_offsets(cluster, &policy.gamma)?;
        let xi = solve_intercept(&offsets, policy.alpha, tol);
        let linear: Vec<f64> = offsets.iter().map(|o| xi + o).collect();
        Ok(Self::from_linear(xi, linear))
    }

    fn from_linear(xi: f64, linear: Vec<f64>) -> Self {
        let log_p = linear.iter().map(|&l| log_expit(l)).collect();
        let log_q = linear.iter().map(|&l| log_expit(-l)).collect();
        Self { xi, linear, log_p, log_q }
    }

    pub fn len(&self) -> usize {
        self.linear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linear.is_empty()
    }

    /// `P(A_ij = 1) = expit(xi + gamma' X_ij)`.
    pub fn propensity(&self, j: usize) -> f64 {
        expit(self.linear[j])
    }

    pub fn propensities(&self) -> Vec<f64> {
        self.linear.iter().map(|&l| expit(l)).collect()
    }

    /// Log-probability of unit `j` taking treatment `a`.
    pub fn log_unit_prob(&self, j: usize, a: u8) -> f64 {
        if a == 1 {
            self.log_p[j]
        } else {
            self.log_q[j]
        }
    }

    /// `ln P(A_i = a)` under the policy.
    pub fn log_prob(&self, a: &[u8]) -> Result<f64> {
        if a.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: a.len() });
        }
        Ok(compensated_sum(a.iter().enumerate().map(|(j, &aj)| self.log_unit_prob(j, aj))))
    }

    /// `ln P(A_{i,-j} = a_{-j})`: the vector probability with unit `j`
    /// marginalized out. Independence turns the marginal into a subtraction
    /// of unit `j`'s own term.
    pub fn log_prob_loo(&self, a: &[u8], j: usize) -> Result<f64> {
        if j >= self.len() {
            return Err(Error::IndexOutOfRange { index: j, len: self.len() });
        }
        if a.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: a.len() });
        }
        Ok(compensated_sum(
            a.iter()
                .enumerate()
                .filter(|&(h, _)| h != j)
                .map(|(h, &ah)| self.log_unit_prob(h, ah)),
        ))
    }
}

/// A policy solved on every cluster of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedPolicy {
    pub policy: AllocationPolicy,
    clusters: Vec<SolvedCluster>,
}

impl SolvedPolicy {
    /// Solves the intercept of every cluster at [`DEFAULT_TOLERANCE`].
    ///
    /// # Panics
    /// If `policy.gamma` does not match the dataset's covariate count; use
    /// [`SolvedPolicy::try_solve`] to get an error instead.
    pub fn solve(dataset: &Dataset, policy: &AllocationPolicy) -> Self {
        Self::try_solve(dataset, policy, DEFAULT_TOLERANCE).expect("gamma length matches covariates")
    }

    pub fn try_solve(dataset: &Dataset, policy: &AllocationPolicy, tol: f64) -> Result<Self> {
        if policy.gamma.len() != dataset.n_covariates() {
            return Err(Error::DimensionMismatch {
                expected: dataset.n_covariates(),
                found: policy.gamma.len(),
            });
        }
        let clusters = dataset
            .clusters()
            .par_iter()
            .map(|c| SolvedCluster::solve(c, policy, tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { policy: policy.clone(), clusters })
    }

    pub fn clusters(&self) -> &[SolvedCluster] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &SolvedCluster {
        &self.clusters[i]
    }

    pub fn intercepts(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.xi).collect()
    }
}

/// Unit propensities of `cluster` under `policy`.
pub fn unit_propensities(cluster: &ClusterData, policy: &AllocationPolicy) -> Result<Vec<f64>> {
    Ok(SolvedCluster::solve(cluster, policy, DEFAULT_TOLERANCE)?.propensities())
}

/// `ln P_policy(A_i = a)`.
pub fn log_policy_prob(solved: &SolvedCluster, a: &[u8]) -> Result<f64> {
    solved.log_prob(a)
}

/// `ln P_policy(A_{i,-j} = a_{-j})`.
pub fn log_policy_prob_loo(solved: &SolvedCluster, a: &[u8], j: usize) -> Result<f64> {
    solved.log_prob_loo(a, j)
}
