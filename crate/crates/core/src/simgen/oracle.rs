//! True effects by exact enumeration of treatment vectors and by Monte Carlo.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{star_center_indicator, star_neighbors, Beta, Scenario, Scenario2Params, STAR_SIZE};
use crate::allocation::{solve_intercept, AllocationPolicy, SolvedCluster, DEFAULT_TOLERANCE};
use crate::data::{ClusterData, Dataset};
use crate::error::{Error, Result};
use crate::estimators::EffectKind;
use crate::numeric::{expit, mean_and_se, substream};

/// Largest cluster that exact enumeration accepts.
pub const MAX_ENUMERATION: usize = 15;

/// Expected potential outcomes of a cluster as a function of its treatment vector.
pub trait OutcomeLaw: Sync {
    /// Writes `E[Y_ij(s)]` for every unit `j` into `out`.
    fn expected(&self, cluster: &ClusterData, s: &[u8], out: &mut [f64]);
}

/// `Y_ij(s) = s_j`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityLaw;

impl OutcomeLaw for IdentityLaw {
    fn expected(&self, _: &ClusterData, s: &[u8], out: &mut [f64]) {
        for (o, &a) in out.iter_mut().zip(s) {
            *o = a as f64;
        }
    }
}

fn binary_column(cluster: &ClusterData, k: usize) -> Vec<u8> {
    (0..cluster.len())
        .map(|j| if k < cluster.n_covariates() { cluster.covariate(j, k) as u8 } else { 0 })
        .collect()
}

/// Scenario-1 outcome model without noise; covariates 0 and 1 are `x1`, `x2`.
#[derive(Debug, Clone, Copy)]
pub struct LinearLaw(pub Beta);

impl OutcomeLaw for LinearLaw {
    fn expected(&self, cluster: &ClusterData, s: &[u8], out: &mut [f64]) {
        linear_means(&self.0, &binary_column(cluster, 0), &binary_column(cluster, 1), s, out);
    }
}

/// All units of [`super::linear_mean`] in one pass.
pub(crate) fn linear_means(beta: &Beta, x1: &[u8], x2: &[u8], a: &[u8], out: &mut [f64]) {
    let n = a.len();
    let (mut t, mut t1, mut t2) = (0.0, 0.0, 0.0);
    for h in (0..n).filter(|&h| a[h] == 1) {
        t += 1.0;
        t1 += x1[h] as f64;
        t2 += x2[h] as f64;
    }
    for j in 0..n {
        let own = a[j] as f64;
        let (tj, t1j, t2j) = (t - own, t1 - own * x1[j] as f64, t2 - own * x2[j] as f64);
        let (f1, f2) = if tj > 0.0 { (t1j / tj, t2j / tj) } else { (0.0, 0.0) };
        out[j] = beta.b0
            + beta.b1 * own
            + beta.b2[0] * x1[j] as f64
            + beta.b2[1] * x2[j] as f64
            + beta.b3 * tj / (n - 1) as f64
            + beta.b4 * f1
            + beta.b5 * f2;
    }
}

/// One-step cascade on the star implied by covariate 0:
/// `E[Y_ij(s)] = 1` if treated, else `1 - (1 - p_d)^m` with `m` treated neighbors.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionLaw {
    pub p_d: f64,
}

impl OutcomeLaw for DiffusionLaw {
    fn expected(&self, cluster: &ClusterData, s: &[u8], out: &mut [f64]) {
        let x1 = binary_column(cluster, 0);
        for j in 0..s.len() {
            out[j] = if s[j] == 1 {
                1.0
            } else {
                let m = star_neighbors(&x1, j).filter(|&h| s[h] == 1).count();
                1.0 - (1.0 - self.p_d).powi(m as i32)
            };
        }
    }
}

/// Per-unit averages of potential outcomes over the policy distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMeans {
    /// `Ybar_ij(alpha, gamma)`.
    pub overall: Vec<f64>,
    /// `Ybar_ij(0, alpha, gamma)`.
    pub untreated: Vec<f64>,
    /// `Ybar_ij(1, alpha, gamma)`.
    pub treated: Vec<f64>,
}

impl ExactMeans {
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Cluster averages `(Ybar_i(0), Ybar_i(1), Ybar_i)`.
    pub fn cluster_means(&self) -> (f64, f64, f64) {
        (Self::mean(&self.untreated), Self::mean(&self.treated), Self::mean(&self.overall))
    }
}

/// Enumerates all `2^n` treatment vectors of the cluster.
///
/// For the fixed-arm means, `P(A_-j = s_-j) = P(s) / P(s_j)` under
/// independent Bernoulli assignment, so one pass covers every unit.
pub fn exact_potential_means(cluster: &ClusterData, law: &dyn OutcomeLaw, solved: &SolvedCluster) -> Result<ExactMeans> {
    let n = cluster.len();
    if n > MAX_ENUMERATION {
        return Err(Error::EnumerationCap { n, cap: MAX_ENUMERATION });
    }
    if solved.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: solved.len() });
    }
    let mut overall = vec![0.0; n];
    let mut fixed = [vec![0.0; n], vec![0.0; n]];
    let mut mass = 0.0;
    let mut fixed_mass = [vec![0.0; n], vec![0.0; n]];
    let mut s = vec![0u8; n];
    let mut y = vec![0.0; n];
    for code in 0u32..(1 << n) {
        for (j, v) in s.iter_mut().enumerate() {
            *v = ((code >> j) & 1) as u8;
        }
        let log_p = solved.log_prob(&s)?;
        let p = log_p.exp();
        law.expected(cluster, &s, &mut y);
        mass += p;
        for j in 0..n {
            overall[j] += p * y[j];
            let a = s[j] as usize;
            let w = (log_p - solved.log_unit_prob(j, s[j])).exp();
            fixed[a][j] += w * y[j];
            fixed_mass[a][j] += w;
        }
    }
    // self-normalized, so constant outcomes come out exact
    overall.iter_mut().for_each(|v| *v /= mass);
    for (f, m) in fixed.iter_mut().zip(&fixed_mass) {
        f.iter_mut().zip(m).for_each(|(v, m)| *v /= m);
    }
    let [untreated, treated] = fixed;
    Ok(ExactMeans { overall, untreated, treated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    Mc,
    Exact,
}

/// True average potential outcomes and effects at one `gamma`; IE and OE are
/// against the all-zero `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEffect {
    pub gamma: Vec<f64>,
    pub mu0: f64,
    pub mu1: f64,
    pub mu: f64,
    pub de: f64,
    pub ie0: f64,
    pub ie1: f64,
    pub oe: f64,
    pub se_de: f64,
    pub se_ie0: f64,
    pub se_ie1: f64,
    pub se_oe: f64,
}

impl TrueEffect {
    /// `(value, Monte-Carlo SE)`.
    pub fn effect(&self, kind: EffectKind) -> (f64, f64) {
        match kind {
            EffectKind::DE => (self.de, self.se_de),
            EffectKind::IE0 => (self.ie0, self.se_ie0),
            EffectKind::IE1 => (self.ie1, self.se_ie1),
            EffectKind::OE => (self.oe, self.se_oe),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEffects {
    pub method: OracleMethod,
    pub alpha: f64,
    /// Monte-Carlo replicates; 0 for exact computation.
    pub reps: usize,
    pub entries: Vec<TrueEffect>,
}

impl TrueEffects {
    pub fn get(&self, gamma: &[f64]) -> Option<&TrueEffect> {
        self.entries.iter().find(|e| e.gamma == gamma)
    }
}

fn reference_index(gammas: &[Vec<f64>]) -> Result<usize> {
    let k = gammas.first().map_or(0, Vec::len);
    let zero = vec![0.0; k];
    gammas.iter().position(|g| *g == zero).ok_or(Error::GammaNotFound(zero))
}

fn check_grid(gammas: &[Vec<f64>], k: usize) -> Result<()> {
    if gammas.is_empty() {
        return Err(Error::invalid("the gamma grid is empty"));
    }
    if let Some(g) = gammas.iter().find(|g| g.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, found: g.len() });
    }
    Ok(())
}

/// Builds exact entries from `(mu0, mu1, mu)` per gamma.
fn exact_entries(alpha: f64, gammas: &[Vec<f64>], mus: &[[f64; 3]]) -> Result<TrueEffects> {
    let r0 = reference_index(gammas)?;
    let reference = mus[r0];
    let entries = gammas
        .iter()
        .zip(mus)
        .map(|(g, m)| TrueEffect {
            gamma: g.clone(),
            mu0: m[0],
            mu1: m[1],
            mu: m[2],
            de: m[1] - m[0],
            ie0: m[0] - reference[0],
            ie1: m[1] - reference[1],
            oe: m[2] - reference[2],
            se_de: 0.0,
            se_ie0: 0.0,
            se_ie1: 0.0,
            se_oe: 0.0,
        })
        .collect();
    Ok(TrueEffects { method: OracleMethod::Exact, alpha, reps: 0, entries })
}

/// Exact effects conditional on the covariates of `dataset`, averaging over
/// all units.
pub fn exact_true_effects(
    dataset: &Dataset,
    law: &dyn OutcomeLaw,
    alpha: f64,
    gammas: &[Vec<f64>],
) -> Result<TrueEffects> {
    check_grid(gammas, dataset.n_covariates())?;
    let n = dataset.n_units() as f64;
    let mus = gammas
        .iter()
        .map(|g| {
            let policy = AllocationPolicy::new(alpha, g.clone())?;
            let per_cluster = dataset
                .clusters()
                .par_iter()
                .map(|c| {
                    let solved = SolvedCluster::solve(c, &policy, DEFAULT_TOLERANCE)?;
                    let m = exact_potential_means(c, law, &solved)?;
                    Ok([m.untreated.iter().sum(), m.treated.iter().sum(), m.overall.iter().sum()])
                })
                .collect::<Result<Vec<[f64; 3]>>>()?;
            let mut acc = [0.0; 3];
            for t in per_cluster {
                for k in 0..3 {
                    acc[k] += t[k];
                }
            }
            Ok(acc.map(|v| v / n))
        })
        .collect::<Result<Vec<_>>>()?;
    exact_entries(alpha, gammas, &mus)
}

/// Exact Scenario-2 population effects: enumerates the `x2` patterns of a
/// star together with their probabilities and, for each, all treatment
/// vectors.
pub fn scenario2_exact_effects(params: &Scenario2Params, alpha: f64, gammas: &[Vec<f64>]) -> Result<TrueEffects> {
    params.validate()?;
    check_grid(gammas, 2)?;
    let x1 = star_center_indicator();
    let law = DiffusionLaw { p_d: params.p_d };
    let patterns: Vec<(f64, ClusterData)> = (0u32..(1 << STAR_SIZE))
        .filter_map(|code| {
            let x2: Vec<u8> = (0..STAR_SIZE).map(|j| ((code >> j) & 1) as u8).collect();
            let prob: f64 = x1
                .iter()
                .zip(&x2)
                .map(|(a, b)| if a == b { params.rho } else { 1.0 - params.rho })
                .product();
            (prob > 0.0).then(|| {
                let cov = x1.iter().zip(&x2).flat_map(|(&a, &b)| [a as f64, b as f64]).collect();
                let c = ClusterData::new(format!("x2={code}"), cov, 2, vec![0; STAR_SIZE], vec![0.0; STAR_SIZE]);
                (prob, c.expect("valid star cluster"))
            })
        })
        .collect();
    let mus = gammas
        .iter()
        .map(|g| {
            let policy = AllocationPolicy::new(alpha, g.clone())?;
            let mut acc = [0.0; 3];
            for (prob, c) in &patterns {
                let solved = SolvedCluster::solve(c, &policy, DEFAULT_TOLERANCE)?;
                let (m0, m1, m) = exact_potential_means(c, &law, &solved)?.cluster_means();
                acc[0] += prob * m0;
                acc[1] += prob * m1;
                acc[2] += prob * m;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    exact_entries(alpha, gammas, &mus)
}

/// Monte-Carlo true effects.
///
/// Each replicate draws fresh covariates for every cluster of the scenario,
/// then draws treatments from each policy and evaluates the potential
/// outcomes. Draws are coupled across policies: unit `j` is treated when a
/// shared uniform falls below its propensity, and diffusion reuses one
/// uniform per directed edge. The linear scenario uses its noise-free mean.
/// In both scenarios a unit's outcome depends on its own treatment only
/// through a separable term, which is averaged over the unit's own
/// propensity analytically rather than sampled.
/// Replicate `r` draws from substream `(seed, r)`.
pub fn oracle_true_effects(
    scenario: &Scenario,
    alpha: f64,
    gammas: &[Vec<f64>],
    reps: usize,
    seed: u64,
) -> Result<TrueEffects> {
    scenario.validate()?;
    check_grid(gammas, 2)?;
    if reps == 0 {
        return Err(Error::invalid("at least one replicate required"));
    }
    for g in gammas {
        AllocationPolicy::new(alpha, g.clone())?;
    }
    let r0 = reference_index(gammas)?;
    let n_pol = gammas.len();

    // per replicate: [mu0, mu1, mu] per policy
    let draws: Vec<Vec<[f64; 3]>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, r);
            let mut acc = vec![[0.0; 3]; n_pol];
            let mut units = 0usize;
            for _ in 0..scenario.clusters() {
                let (x1, x2) = scenario.draw_covariates(&mut rng);
                let n = x1.len();
                units += n;
                let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let edge: Vec<f64> = match scenario {
                    Scenario::Diffusion(_) => (0..n * n).map(|_| rng.random::<f64>()).collect(),
                    Scenario::Linear(_) => Vec::new(),
                };
                let mut y = vec![0.0; n];
                for (g, out) in gammas.iter().zip(acc.iter_mut()) {
                    let offsets: Vec<f64> =
                        (0..n).map(|j| g[0] * x1[j] as f64 + g[1] * x2[j] as f64).collect();
                    let xi = solve_intercept(&offsets, alpha, DEFAULT_TOLERANCE);
                    let p: Vec<f64> = offsets.iter().map(|o| expit(xi + o)).collect();
                    let a: Vec<u8> = (0..n).map(|j| (u[j] < p[j]) as u8).collect();
                    match scenario {
                        Scenario::Linear(params) => {
                            let b1 = params.beta.b1;
                            linear_means(&params.beta, &x1, &x2, &a, &mut y);
                            for j in 0..n {
                                let base = y[j] - b1 * a[j] as f64;
                                out[0] += base;
                                out[1] += base + b1;
                                out[2] += base + b1 * p[j];
                            }
                        }
                        Scenario::Diffusion(params) => {
                            for j in 0..n {
                                let reached = star_neighbors(&x1, j)
                                    .any(|h| a[h] == 1 && edge[h * n + j] < params.p_d)
                                    as u8 as f64;
                                out[0] += reached;
                                out[1] += 1.0;
                                out[2] += p[j] + (1.0 - p[j]) * reached;
                            }
                        }
                    }
                }
            }
            acc.iter().map(|m| m.map(|v| v / units as f64)).collect()
        })
        .collect();

    let series = |f: &dyn Fn(&[[f64; 3]]) -> f64| mean_and_se(&draws.iter().map(|d| f(d)).collect::<Vec<_>>());
    let entries = gammas
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let (mu0, _) = series(&|d| d[k][0]);
            let (mu1, _) = series(&|d| d[k][1]);
            let (mu, _) = series(&|d| d[k][2]);
            let (de, se_de) = series(&|d| d[k][1] - d[k][0]);
            let (ie0, se_ie0) = series(&|d| d[k][0] - d[r0][0]);
            let (ie1, se_ie1) = series(&|d| d[k][1] - d[r0][1]);
            let (oe, se_oe) = series(&|d| d[k][2] - d[r0][2]);
            TrueEffect { gamma: g.clone(), mu0, mu1, mu, de, ie0, ie1, oe, se_de, se_ie0, se_ie1, se_oe }
        })
        .collect();
    Ok(TrueEffects { method: OracleMethod::Mc, alpha, reps, entries })
}
