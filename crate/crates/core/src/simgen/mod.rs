//! Simulation scenarios and their true effects.
//!
//! Scenario 1 draws two binary covariates per unit and a linear outcome with
//! homogeneous (`T`) and covariate-specific (`T1`, `T2`) spillover terms.
//! Scenario 2 is a five-unit star per cluster with one-step independent
//! cascade diffusion from treated neighbors.
//!
//! Cluster `i` of a generated dataset draws from RNG substream `(seed, i)`.

mod oracle;

pub use oracle::{
    exact_potential_means, exact_true_effects, oracle_true_effects, scenario2_exact_effects, DiffusionLaw,
    ExactMeans, IdentityLaw, LinearLaw, OracleMethod, OutcomeLaw, TrueEffect, TrueEffects, MAX_ENUMERATION,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset, DesignPropensity};
use crate::error::{Error, Result};
use crate::numeric::substream;

pub const STAR_SIZE: usize = 5;

/// `x1` with probability `rho`, otherwise `1 - x1`.
pub fn correlated_binary<R: Rng + ?Sized>(x1: u8, rho: f64, rng: &mut R) -> u8 {
    if rng.random_bool(rho) {
        x1
    } else {
        1 - x1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Beta {
    pub b0: f64,
    pub b1: f64,
    pub b2: [f64; 2],
    pub b3: f64,
    pub b4: f64,
    pub b5: f64,
}

impl Default for Beta {
    fn default() -> Self {
        Self { b0: 1.0, b1: 3.0, b2: [0.0, 0.0], b3: 0.0, b4: 0.0, b5: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario1Params {
    pub clusters: usize,
    pub cluster_size: usize,
    pub rho: f64,
    pub beta: Beta,
    pub sigma: f64,
    pub design_p: f64,
}

impl Default for Scenario1Params {
    fn default() -> Self {
        Self { clusters: 200, cluster_size: 15, rho: 0.5, beta: Beta::default(), sigma: 1.0, design_p: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario2Params {
    pub clusters: usize,
    pub rho: f64,
    pub p_d: f64,
    pub design_p: f64,
}

impl Default for Scenario2Params {
    fn default() -> Self {
        Self { clusters: 200, rho: 0.5, p_d: 0.5, design_p: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "kebab-case")]
pub enum Scenario {
    Linear(Scenario1Params),
    Diffusion(Scenario2Params),
}

fn check_probability(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn check_design(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("design probability must lie in (0, 1), got {p}")))
    }
}

impl Scenario1Params {
    pub fn validate(&self) -> Result<()> {
        check_probability("rho", self.rho)?;
        check_design(self.design_p)?;
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid("sigma must be non-negative"));
        }
        if self.clusters == 0 || self.cluster_size < 2 {
            return Err(Error::invalid("need at least one cluster of at least two units"));
        }
        Ok(())
    }
}

impl Scenario2Params {
    pub fn validate(&self) -> Result<()> {
        check_probability("rho", self.rho)?;
        check_probability("p_d", self.p_d)?;
        check_design(self.design_p)?;
        if self.clusters == 0 {
            return Err(Error::invalid("need at least one cluster"));
        }
        Ok(())
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        match self {
            Scenario::Linear(p) => p.validate(),
            Scenario::Diffusion(p) => p.validate(),
        }
    }

    pub fn clusters(&self) -> usize {
        match self {
            Scenario::Linear(p) => p.clusters,
            Scenario::Diffusion(p) => p.clusters,
        }
    }

    pub fn design(&self) -> DesignPropensity {
        let p = match self {
            Scenario::Linear(p) => p.design_p,
            Scenario::Diffusion(p) => p.design_p,
        };
        DesignPropensity::ConstantBernoulli { p }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self {
            Scenario::Linear(p) => gen_scenario1(p, seed),
            Scenario::Diffusion(p) => gen_scenario2(p, seed),
        }
    }

    pub(crate) fn draw_covariates(&self, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
        match self {
            Scenario::Linear(p) => {
                let x1: Vec<u8> = (0..p.cluster_size).map(|_| rng.random_bool(0.5) as u8).collect();
                let x2 = x1.iter().map(|&x| correlated_binary(x, p.rho, rng)).collect();
                (x1, x2)
            }
            Scenario::Diffusion(p) => {
                let x1 = star_center_indicator();
                let x2 = x1.iter().map(|&x| correlated_binary(x, p.rho, rng)).collect();
                (x1, x2)
            }
        }
    }
}

pub(crate) fn covariate_names() -> Vec<String> {
    vec!["x1".into(), "x2".into()]
}

fn interleave(x1: &[u8], x2: &[u8]) -> Vec<f64> {
    x1.iter().zip(x2).flat_map(|(&a, &b)| [a as f64, b as f64]).collect()
}

/// Noise-free Scenario-1 outcome of unit `j` under treatment vector `a`.
///
/// `T1`/`T2` are 0 when no neighbor is treated.
pub fn linear_mean(beta: &Beta, x1: &[u8], x2: &[u8], a: &[u8], j: usize) -> f64 {
    let n = a.len();
    let (mut t, mut t1, mut t2) = (0.0, 0.0, 0.0);
    for h in (0..n).filter(|&h| h != j && a[h] == 1) {
        t += 1.0;
        t1 += x1[h] as f64;
        t2 += x2[h] as f64;
    }
    let (f1, f2) = if t > 0.0 { (t1 / t, t2 / t) } else { (0.0, 0.0) };
    beta.b0
        + beta.b1 * a[j] as f64
        + beta.b2[0] * x1[j] as f64
        + beta.b2[1] * x2[j] as f64
        + beta.b3 * t / (n - 1) as f64
        + beta.b4 * f1
        + beta.b5 * f2
}

/// Scenario-1 dataset with covariates `x1`, `x2`.
pub fn gen_scenario1(params: &Scenario1Params, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let scenario = Scenario::Linear(*params);
    let clusters = (0..params.clusters)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let (x1, x2) = scenario.draw_covariates(&mut rng);
            let a: Vec<u8> = (0..params.cluster_size).map(|_| rng.random_bool(params.design_p) as u8).collect();
            let y = (0..a.len())
                .map(|j| {
                    let e: f64 = rng.sample(StandardNormal);
                    linear_mean(&params.beta, &x1, &x2, &a, j) + params.sigma * e
                })
                .collect();
            ClusterData::new(format!("c{i}"), interleave(&x1, &x2), 2, a, y)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clusters, covariate_names())
}

/// `x1` of a star cluster: 1 for the center (unit 0), 0 for the leaves.
pub fn star_center_indicator() -> Vec<u8> {
    (0..STAR_SIZE).map(|j| (j == 0) as u8).collect()
}

/// Neighbors in the star implied by `x1`: a center links to every leaf and a
/// leaf links to every center.
pub fn star_neighbors(x1: &[u8], j: usize) -> impl Iterator<Item = usize> + '_ {
    let own = x1[j];
    (0..x1.len()).filter(move |&h| h != j && x1[h] != own)
}

/// Outcomes under one-step cascade given, for each directed edge `h -> j`,
/// whether it transmits.
pub(crate) fn diffuse(x1: &[u8], a: &[u8], transmits: impl Fn(usize, usize) -> bool) -> Vec<u8> {
    (0..a.len())
        .map(|j| (a[j] == 1 || star_neighbors(x1, j).any(|h| a[h] == 1 && transmits(h, j))) as u8)
        .collect()
}

/// Scenario-2 dataset of five-unit stars with covariates `x1` (center) and `x2`.
pub fn gen_scenario2(params: &Scenario2Params, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let scenario = Scenario::Diffusion(*params);
    let clusters = (0..params.clusters)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let (x1, x2) = scenario.draw_covariates(&mut rng);
            let a: Vec<u8> = (0..STAR_SIZE).map(|_| rng.random_bool(params.design_p) as u8).collect();
            let edge: Vec<f64> = (0..STAR_SIZE * STAR_SIZE).map(|_| rng.random::<f64>()).collect();
            let y = diffuse(&x1, &a, |h, j| edge[h * STAR_SIZE + j] < params.p_d);
            ClusterData::new(format!("c{i}"), interleave(&x1, &x2), 2, a, y.into_iter().map(f64::from).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clusters, covariate_names())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concordance() {
        let mut rng = substream(5, 0);
        let n = 100_000;
        for (rho, tol) in [(1.0, 0.0), (0.5, 0.01), (0.65, 0.01)] {
            let same = (0..n)
                .filter(|_| {
                    let x1 = rng.random_bool(0.5) as u8;
                    correlated_binary(x1, rho, &mut rng) == x1
                })
                .count();
            assert!((same as f64 / n as f64 - rho).abs() <= tol);
        }
    }

    #[test]
    fn noiseless_outcomes_take_two_values() {
        let p = Scenario1Params { sigma: 0.0, clusters: 20, ..Default::default() };
        let ds = gen_scenario1(&p, 1).unwrap();
        for c in ds.clusters() {
            for (&a, &y) in c.treatment.iter().zip(&c.outcome) {
                assert_eq!(y, if a == 1 { 4.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let p = Scenario1Params { clusters: 30, ..Default::default() };
        assert_eq!(gen_scenario1(&p, 7).unwrap(), gen_scenario1(&p, 7).unwrap());
        assert_ne!(gen_scenario1(&p, 7).unwrap(), gen_scenario1(&p, 8).unwrap());
        let q = Scenario2Params { clusters: 30, ..Default::default() };
        assert_eq!(gen_scenario2(&q, 7).unwrap(), gen_scenario2(&q, 7).unwrap());
    }

    #[test]
    fn spillover_fractions() {
        let beta = Beta { b0: 0.0, b1: 0.0, b3: 1.0, b4: 10.0, b5: 100.0, ..Default::default() };
        let x1 = [1, 0, 1, 0];
        let x2 = [0, 0, 1, 1];
        // unit 0 sees treated neighbors 2 (x1=1,x2=1) and 3 (x1=0,x2=1)
        let a = [1, 0, 1, 1];
        assert!((linear_mean(&beta, &x1, &x2, &a, 0) - (2.0 / 3.0 + 5.0 + 100.0)).abs() < 1e-12);
        assert_eq!(linear_mean(&beta, &x1, &x2, &[0, 0, 0, 0], 1), 0.0);
    }

    #[test]
    fn star_structure_and_diffusion() {
        let x1 = star_center_indicator();
        assert_eq!(star_neighbors(&x1, 0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(star_neighbors(&x1, 3).collect::<Vec<_>>(), vec![0]);
        let a = [1, 0, 0, 0, 0];
        assert_eq!(diffuse(&x1, &a, |_, _| true), vec![1; 5]);
        assert_eq!(diffuse(&x1, &a, |_, _| false), vec![1, 0, 0, 0, 0]);
        // a treated leaf reaches only the center; no second hop
        assert_eq!(diffuse(&x1, &[0, 1, 0, 0, 0], |_, _| true), vec![1, 1, 0, 0, 0]);

        let q = Scenario2Params { p_d: 0.0, clusters: 50, ..Default::default() };
        for c in gen_scenario2(&q, 3).unwrap().clusters() {
            assert!(c.treatment.iter().zip(&c.outcome).all(|(&a, &y)| y == a as f64));
            assert_eq!(c.covariate(0, 0), 1.0);
        }
    }

    #[test]
    fn single_edge_cascade_rate() {
        let mut rng = substream(11, 0);
        let x1 = star_center_indicator();
        let a = [1, 0, 0, 0, 0];
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                let edge: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
                diffuse(&x1, &a, |h, j| edge[h * 5 + j] < 0.5)[2] == 1
            })
            .count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(gen_scenario1(&Scenario1Params { rho: 1.5, ..Default::default() }, 0).is_err());
        assert!(gen_scenario2(&Scenario2Params { p_d: -0.1, ..Default::default() }, 0).is_err());
        assert!(gen_scenario2(&Scenario2Params { design_p: 1.0, ..Default::default() }, 0).is_err());
    }
}
