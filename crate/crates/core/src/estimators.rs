//! Standardized weighting estimators of average potential outcomes and their
//! direct, indirect and overall contrasts.
//!
//! Cluster weights compare the probability of the observed treatment vector
//! under a hypothetical policy with its probability under the design:
//! `w_i = P_policy(A_i) / f(A_i)`. Fixed-arm weights replace the numerator by
//! the policy probability of the rest of the cluster and keep only units whose
//! own treatment equals the arm. Each estimator is a ratio of weighted sums,
//! so it is unchanged by a common rescaling of the weights.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationPolicy, SolvedCluster, SolvedPolicy, DEFAULT_TOLERANCE};
use crate::data::{log_design_prob, ClusterData, Dataset, DesignPropensity};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// `w_i = exp(ln P_policy(A_i) - ln f(A_i))`.
pub fn cluster_weight(
    cluster: &ClusterData,
    solved: &SolvedCluster,
    design: &DesignPropensity,
) -> Result<f64> {
    Ok((solved.log_prob(&cluster.treatment)? - log_design_prob(cluster, design)?).exp())
}

/// `w_ij(a) = I(A_ij = a) P_policy(A_{i,-j}) / f(A_i)`.
pub fn unit_weight_fixed(
    cluster: &ClusterData,
    solved: &SolvedCluster,
    design: &DesignPropensity,
    j: usize,
    a: u8,
) -> Result<f64> {
    if j >= cluster.len() {
        return Err(Error::IndexOutOfRange { index: j, len: cluster.len() });
    }
    if cluster.treatment[j] != a {
        return Ok(0.0);
    }
    Ok((solved.log_prob_loo(&cluster.treatment, j)? - log_design_prob(cluster, design)?).exp())
}

/// All weights of one policy on one dataset.
#[derive(Debug, Clone)]
pub(crate) struct PolicyWeights {
    /// `w_i`, shared by every unit of cluster `i`.
    pub cluster: Vec<f64>,
    /// `w_ij(A_ij)`: the fixed-arm weight for the arm the unit actually received.
    pub unit: Vec<Vec<f64>>,
}

impl PolicyWeights {
    pub fn compute(dataset: &Dataset, solved: &SolvedPolicy, design: &DesignPropensity) -> Result<Self> {
        let per_cluster = dataset
            .clusters()
            .par_iter()
            .zip(solved.clusters())
            .map(|(c, sc)| {
                let log_f = log_design_prob(c, design)?;
                let log_p = sc.log_prob(&c.treatment)?;
                let unit = (0..c.len())
                    .map(|j| (log_p - sc.log_unit_prob(j, c.treatment[j]) - log_f).exp())
                    .collect();
                Ok(((log_p - log_f).exp(), unit))
            })
            .collect::<Result<Vec<(f64, Vec<f64>)>>>()?;
        let (cluster, unit) = per_cluster.into_iter().unzip();
        Ok(Self { cluster, unit })
    }

    /// Weight of unit `j` of cluster `i` for `estimand`.
    pub fn weight(&self, dataset: &Dataset, estimand: Estimand, i: usize, j: usize) -> f64 {
        match estimand.arm() {
            None => self.cluster[i],
            Some(a) if dataset.cluster(i).treatment[j] == a => self.unit[i][j],
            Some(_) => 0.0,
        }
    }

    /// Hájek ratio for `estimand`, accumulated in cluster order.
    pub fn ratio(&self, dataset: &Dataset, estimand: Estimand) -> Result<f64> {
        if let Some(a) = estimand.arm() {
            let any = dataset.clusters().iter().any(|c| c.treatment.contains(&a));
            if !any {
                return Err(Error::DegenerateArm { arm: a });
            }
        }
        let mut num = CompensatedSum::new();
        let mut den = CompensatedSum::new();
        for (i, c) in dataset.clusters().iter().enumerate() {
            for (j, &y) in c.outcome.iter().enumerate() {
                let w = self.weight(dataset, estimand, i, j);
                num.add(w * y);
                den.add(w);
            }
        }
        let den = den.value();
        if den > 0.0 && den.is_finite() {
            Ok(num.value() / den)
        } else {
            Err(Error::ZeroDenominator)
        }
    }
}

/// `Ŷ(alpha, gamma)`.
pub fn estimate_mu(dataset: &Dataset, solved: &SolvedPolicy, design: &DesignPropensity) -> Result<f64> {
    PolicyWeights::compute(dataset, solved, design)?.ratio(dataset, Estimand::Overall)
}

/// `Ŷ(a, alpha, gamma)`.
pub fn estimate_mu_fixed(
    dataset: &Dataset,
    solved: &SolvedPolicy,
    design: &DesignPropensity,
    a: u8,
) -> Result<f64> {
    let estimand = match a {
        0 => Estimand::Untreated,
        1 => Estimand::Treated,
        _ => return Err(Error::invalid("arm must be 0 or 1")),
    };
    PolicyWeights::compute(dataset, solved, design)?.ratio(dataset, estimand)
}

/// The three average potential outcomes estimated for each policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    /// `Ȳ(0, alpha, gamma)`
    Untreated,
    /// `Ȳ(1, alpha, gamma)`
    Treated,
    /// `Ȳ(alpha, gamma)`
    Overall,
}

impl Estimand {
    pub const ALL: [Estimand; 3] = [Estimand::Untreated, Estimand::Treated, Estimand::Overall];

    pub fn arm(self) -> Option<u8> {
        match self {
            Estimand::Untreated => Some(0),
            Estimand::Treated => Some(1),
            Estimand::Overall => None,
        }
    }

    fn block(self) -> usize {
        match self {
            Estimand::Untreated => 0,
            Estimand::Treated => 1,
            Estimand::Overall => 2,
        }
    }
}

/// Estimates for every `gamma` of a grid at fixed `alpha`.
///
/// `values` is stacked in three blocks of length `R = gammas.len()`:
/// `[Ȳ(0, ·, γ_1..γ_R), Ȳ(1, ·, γ_1..γ_R), Ȳ(·, γ_1..γ_R)]`. The same order
/// is used for every covariance matrix built from a `MuSet`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSet {
    pub alpha: f64,
    pub gammas: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub labels: Vec<String>,
    pub n_clusters: usize,
    pub n_units: usize,
}

impl MuSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_policies(&self) -> usize {
        self.gammas.len()
    }

    pub fn index(&self, estimand: Estimand, r: usize) -> usize {
        estimand.block() * self.gammas.len() + r
    }

    /// Position of `gamma` in the grid (exact comparison).
    pub fn gamma_index(&self, gamma: &[f64]) -> Result<usize> {
        self.gammas
            .iter()
            .position(|g| g.as_slice() == gamma)
            .ok_or_else(|| Error::GammaNotFound(gamma.to_vec()))
    }

    pub fn value(&self, estimand: Estimand, gamma: &[f64]) -> Result<f64> {
        Ok(self.values[self.index(estimand, self.gamma_index(gamma)?)])
    }

    /// `(estimand, policy index)` of stacked position `m`.
    pub fn position(&self, m: usize) -> (Estimand, usize) {
        let r = self.gammas.len();
        (Estimand::ALL[m / r], m % r)
    }
}

pub(crate) fn mu_label(estimand: Estimand, alpha: f64, gamma: &[f64]) -> String {
    let g = gamma.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    match estimand.arm() {
        Some(a) => format!("Y({a},{alpha},[{g}])"),
        None => format!("Y({alpha},[{g}])"),
    }
}

pub(crate) fn check_gammas(dataset: &Dataset, gammas: &[Vec<f64>]) -> Result<()> {
    if gammas.is_empty() {
        return Err(Error::invalid("the gamma grid is empty"));
    }
    for (r, g) in gammas.iter().enumerate() {
        if g.len() != dataset.n_covariates() {
            return Err(Error::DimensionMismatch { expected: dataset.n_covariates(), found: g.len() });
        }
        if gammas[..r].contains(g) {
            return Err(Error::DuplicateGamma(g.clone()));
        }
    }
    Ok(())
}

/// Weights of every policy of the grid, in grid order.
pub(crate) fn grid_weights(
    dataset: &Dataset,
    design: &DesignPropensity,
    alpha: f64,
    gammas: &[Vec<f64>],
) -> Result<Vec<PolicyWeights>> {
    check_gammas(dataset, gammas)?;
    gammas
        .par_iter()
        .map(|g| {
            let policy = AllocationPolicy::new(alpha, g.clone())?;
            let solved = SolvedPolicy::try_solve(dataset, &policy, DEFAULT_TOLERANCE)?;
            PolicyWeights::compute(dataset, &solved, design)
        })
        .collect()
}

pub(crate) fn mu_set_from_weights(
    dataset: &Dataset,
    alpha: f64,
    gammas: &[Vec<f64>],
    weights: &[PolicyWeights],
) -> Result<MuSet> {
    let r = gammas.len();
    let mut values = vec![0.0; 3 * r];
    let mut labels = vec![String::new(); 3 * r];
    for estimand in Estimand::ALL {
        for (k, (g, w)) in gammas.iter().zip(weights).enumerate() {
            let m = estimand.block() * r + k;
            values[m] = w.ratio(dataset, estimand)?;
            labels[m] = mu_label(estimand, alpha, g);
        }
    }
    Ok(MuSet {
        alpha,
        gammas: gammas.to_vec(),
        values,
        labels,
        n_clusters: dataset.n_clusters(),
        n_units: dataset.n_units(),
    })
}

/// Estimates the stacked `MuSet` over a grid of distinct `gamma` vectors.
pub fn estimate_mu_set(
    dataset: &Dataset,
    design: &DesignPropensity,
    alpha: f64,
    gammas: &[Vec<f64>],
) -> Result<MuSet> {
    let weights = grid_weights(dataset, design, alpha, gammas)?;
    mu_set_from_weights(dataset, alpha, gammas, &weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectKind {
    DE,
    IE0,
    IE1,
    OE,
}

impl EffectKind {
    pub const ALL: [EffectKind; 4] = [EffectKind::DE, EffectKind::IE0, EffectKind::IE1, EffectKind::OE];

    /// Whether the effect contrasts two policies (and so needs a reference).
    pub fn needs_reference(self) -> bool {
        !matches!(self, EffectKind::DE)
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EffectKind::DE => "DE",
            EffectKind::IE0 => "IE0",
            EffectKind::IE1 => "IE1",
            EffectKind::OE => "OE",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for EffectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DE" => Ok(EffectKind::DE),
            "IE0" => Ok(EffectKind::IE0),
            "IE1" => Ok(EffectKind::IE1),
            "OE" => Ok(EffectKind::OE),
            other => Err(Error::invalid(format!("unknown effect `{other}`"))),
        }
    }
}

/// A linear contrast `c' mu` of a `MuSet`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectContrast {
    pub kind: EffectKind,
    pub gamma: Vec<f64>,
    /// `None` for the direct effect.
    pub gamma_ref: Option<Vec<f64>>,
    pub estimate: f64,
    pub coefficients: Vec<f64>,
}

/// A contrast with its variance and Wald interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub kind: EffectKind,
    pub gamma: Vec<f64>,
    pub gamma_ref: Option<Vec<f64>>,
    pub estimate: f64,
    pub variance: f64,
    pub ci: (f64, f64),
    pub level: f64,
}

/// Coefficient vector of `kind` at `gamma` against `gamma_ref`.
pub fn contrast_vector(mu: &MuSet, kind: EffectKind, gamma: &[f64], gamma_ref: &[f64]) -> Result<Vec<f64>> {
    let r = mu.gamma_index(gamma)?;
    let mut c = vec![0.0; mu.len()];
    let mut put = |estimand, k, v| c[mu.index(estimand, k)] += v;
    match kind {
        EffectKind::DE => {
            put(Estimand::Treated, r, 1.0);
            put(Estimand::Untreated, r, -1.0);
        }
        _ => {
            let r0 = mu.gamma_index(gamma_ref)?;
            let estimand = match kind {
                EffectKind::IE0 => Estimand::Untreated,
                EffectKind::IE1 => Estimand::Treated,
                _ => Estimand::Overall,
            };
            put(estimand, r, 1.0);
            put(estimand, r0, -1.0);
        }
    }
    Ok(c)
}

/// `DE(gamma)`, `IE0/IE1(gamma, gamma_ref)` and `OE(gamma, gamma_ref)`.
pub fn contrast_effects(mu: &MuSet, gamma: &[f64], gamma_ref: &[f64]) -> Result<Vec<EffectContrast>> {
    EffectKind::ALL
        .iter()
        .map(|&kind| contrast(mu, kind, gamma, gamma_ref))
        .collect()
}

pub fn contrast(mu: &MuSet, kind: EffectKind, gamma: &[f64], gamma_ref: &[f64]) -> Result<EffectContrast> {
    let coefficients = contrast_vector(mu, kind, gamma, gamma_ref)?;
    let estimate = match kind {
        EffectKind::DE => mu.value(Estimand::Treated, gamma)? - mu.value(Estimand::Untreated, gamma)?,
        EffectKind::IE0 => mu.value(Estimand::Untreated, gamma)? - mu.value(Estimand::Untreated, gamma_ref)?,
        EffectKind::IE1 => mu.value(Estimand::Treated, gamma)? - mu.value(Estimand::Treated, gamma_ref)?,
        EffectKind::OE => mu.value(Estimand::Overall, gamma)? - mu.value(Estimand::Overall, gamma_ref)?,
    };
    Ok(EffectContrast {
        kind,
        gamma: gamma.to_vec(),
        gamma_ref: kind.needs_reference().then(|| gamma_ref.to_vec()),
        estimate,
        coefficients,
    })
}
