//! Uncertainty for the stacked estimates: M-estimation sandwich covariance,
//! covariance of linear effect contrasts, Wald intervals and the cluster
//! bootstrap.
//!
//! Each component of the estimating function vector is
//!
//! ```text
//! psi_m(cluster i) = (1 / n̄) * sum_j w_ijm * (Y_ij - mu_m)
//! ```
//!
//! with `w_ijm` the weight used by estimand `m`'s point estimator and `n̄`
//! the mean cluster size. The column sums vanish exactly at the Hájek
//! estimates, and since `psi_m` depends on `mu_m` alone the bread
//! `-d psi / d mu` is diagonal with entries `(1/I) sum_i (1/n̄) sum_j w_ijm`.
//! The covariance of the estimates is `D^-1 B D^-1 / I` with
//! `B = (1/I) sum_i psi_i psi_i'`.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, DesignPropensity};
use crate::error::{Error, Result};
use crate::estimators::{
    contrast, estimate_mu_set, grid_weights, mu_set_from_weights, EffectContrast, EffectKind,
    EffectReport, Estimand, MuSet, PolicyWeights,
};
use crate::numeric::{percentile_sorted, substream, CompensatedSum};

/// Per-cluster estimating-function values, one row per cluster, columns in
/// `MuSet` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrix {
    pub rows: DMatrix<f64>,
    /// Per-cluster contributions to the diagonal bread, same layout as `rows`.
    pub bread_terms: DMatrix<f64>,
}

impl PsiMatrix {
    pub fn n_clusters(&self) -> usize {
        self.rows.nrows()
    }

    pub fn column_means(&self) -> Vec<f64> {
        let i = self.rows.nrows() as f64;
        self.rows.column_iter().map(|c| c.iter().copied().collect::<CompensatedSum>().value() / i).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichCovariance {
    /// Estimated `Cov(mu_hat)`.
    pub matrix: DMatrix<f64>,
    /// Diagonal of the bread: mean (scaled) weight per estimand.
    pub bread: Vec<f64>,
}

impl SandwichCovariance {
    pub fn variance(&self, m: usize) -> f64 {
        self.matrix[(m, m)]
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

fn psi_from_weights(dataset: &Dataset, mu: &MuSet, weights: &[PolicyWeights]) -> PsiMatrix {
    let n_clusters = dataset.n_clusters();
    let scale = n_clusters as f64 / dataset.n_units() as f64;
    let mut rows = DMatrix::zeros(n_clusters, mu.len());
    let mut bread = DMatrix::zeros(n_clusters, mu.len());
    for m in 0..mu.len() {
        let (estimand, r) = mu.position(m);
        let w = &weights[r];
        let mu_m = mu.values[m];
        for (i, c) in dataset.clusters().iter().enumerate() {
            let mut num = CompensatedSum::new();
            let mut den = CompensatedSum::new();
            for (j, &y) in c.outcome.iter().enumerate() {
                let wij = w.weight(dataset, estimand, i, j);
                num.add(wij * (y - mu_m));
                den.add(wij);
            }
            rows[(i, m)] = scale * num.value();
            bread[(i, m)] = scale * den.value();
        }
    }
    PsiMatrix { rows, bread_terms: bread }
}

/// Evaluates the estimating functions of every cluster at `mu`.
pub fn psi_contributions(dataset: &Dataset, design: &DesignPropensity, mu: &MuSet) -> Result<PsiMatrix> {
    if mu.n_clusters != dataset.n_clusters() || mu.n_units != dataset.n_units() {
        return Err(Error::Mismatch(format!(
            "estimates were fitted on {} clusters / {} units, dataset has {} / {}",
            mu.n_clusters,
            mu.n_units,
            dataset.n_clusters(),
            dataset.n_units()
        )));
    }
    if mu.len() != 3 * mu.gammas.len() {
        return Err(Error::DimensionMismatch { expected: 3 * mu.gammas.len(), found: mu.len() });
    }
    let weights = grid_weights(dataset, design, mu.alpha, &mu.gammas)?;
    Ok(psi_from_weights(dataset, mu, &weights))
}

/// `D^-1 B D^-1 / I` from the per-cluster estimating functions.
pub fn sandwich_covariance(psi: &PsiMatrix) -> Result<SandwichCovariance> {
    let n = psi.n_clusters();
    if n < 2 {
        return Err(Error::TooFewClusters { needed: 2, found: n });
    }
    let i = n as f64;
    let meat = psi.rows.transpose() * &psi.rows / i;
    let bread: Vec<f64> = psi
        .bread_terms
        .column_iter()
        .map(|c| c.iter().copied().collect::<CompensatedSum>().value() / i)
        .collect();
    if let Some(b) = bread.iter().find(|b| !(**b > 0.0)) {
        return Err(Error::invalid(format!("non-positive bread entry {b}")));
    }
    let mut matrix = meat;
    for r in 0..matrix.nrows() {
        for c in 0..matrix.ncols() {
            matrix[(r, c)] /= bread[r] * bread[c] * i;
        }
    }
    // exact symmetry
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    Ok(SandwichCovariance { matrix, bread })
}

/// Covariance of the contrasts `C mu_hat`: `C Sigma C'`.
pub fn effect_covariance(cov: &DMatrix<f64>, contrasts: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if contrasts.ncols() != cov.nrows() || cov.nrows() != cov.ncols() {
        return Err(Error::DimensionMismatch { expected: cov.nrows(), found: contrasts.ncols() });
    }
    let out = contrasts * cov * contrasts.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Stacks contrast coefficient vectors as the rows of a matrix.
pub fn contrast_matrix(contrasts: &[EffectContrast]) -> DMatrix<f64> {
    let cols = contrasts.first().map_or(0, |c| c.coefficients.len());
    DMatrix::from_fn(contrasts.len(), cols, |r, c| contrasts[r].coefficients[c])
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `estimate ± z_{(1+level)/2} sqrt(variance)`.
pub fn wald_ci(estimate: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    if variance < 0.0 || variance.is_nan() {
        return Err(Error::invalid(format!("negative variance {variance}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level must lie in (0, 1), got {level}")));
    }
    let half = normal_quantile(0.5 * (1.0 + level)) * variance.sqrt();
    Ok((estimate - half, estimate + half))
}

/// Attaches a variance and Wald interval to a contrast.
pub fn report_effect(contrast: &EffectContrast, cov: &DMatrix<f64>, level: f64) -> Result<EffectReport> {
    let c = nalgebra::DVector::from_column_slice(&contrast.coefficients);
    if c.len() != cov.nrows() {
        return Err(Error::DimensionMismatch { expected: cov.nrows(), found: c.len() });
    }
    // tiny negative values are round-off from cancelling contrasts
    let variance = (c.transpose() * cov * &c)[(0, 0)].max(0.0);
    Ok(EffectReport {
        kind: contrast.kind,
        gamma: contrast.gamma.clone(),
        gamma_ref: contrast.gamma_ref.clone(),
        estimate: contrast.estimate,
        variance,
        ci: wald_ci(contrast.estimate, variance, level)?,
        level,
    })
}

/// Point estimates, sandwich covariance and estimating functions in one pass.
#[derive(Debug, Clone)]
pub struct Fit {
    pub mu: MuSet,
    pub psi: PsiMatrix,
    pub covariance: SandwichCovariance,
}

impl Fit {
    pub fn new(dataset: &Dataset, design: &DesignPropensity, alpha: f64, gammas: &[Vec<f64>]) -> Result<Self> {
        let weights = grid_weights(dataset, design, alpha, gammas)?;
        let mu = mu_set_from_weights(dataset, alpha, gammas, &weights)?;
        let psi = psi_from_weights(dataset, &mu, &weights);
        let covariance = sandwich_covariance(&psi)?;
        Ok(Self { mu, psi, covariance })
    }

    /// All effects of every policy against `gamma_ref`: DE for each policy,
    /// and IE0/IE1/OE for each policy other than the reference.
    pub fn contrasts(&self, gamma_ref: &[f64]) -> Result<Vec<EffectContrast>> {
        self.mu.gamma_index(gamma_ref)?;
        all_contrasts(&self.mu, Some(gamma_ref))
    }

    pub fn report(&self, gamma_ref: &[f64], level: f64) -> Result<Vec<EffectReport>> {
        self.contrasts(gamma_ref)?
            .iter()
            .map(|c| report_effect(c, &self.covariance.matrix, level))
            .collect()
    }
}

fn all_contrasts(mu: &MuSet, gamma_ref: Option<&[f64]>) -> Result<Vec<EffectContrast>> {
    let mut out = Vec::new();
    for kind in EffectKind::ALL {
        for g in &mu.gammas {
            match (kind.needs_reference(), gamma_ref) {
                (false, _) => out.push(contrast(mu, kind, g, g)?),
                (true, Some(r)) if g.as_slice() != r => out.push(contrast(mu, kind, g, r)?),
                _ => {}
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BootstrapInterval {
    #[default]
    Percentile,
    /// `estimate ± z * bootstrap SE`.
    Normal,
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapOptions {
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    pub interval: BootstrapInterval,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapEffect {
    pub kind: EffectKind,
    pub gamma: Vec<f64>,
    pub gamma_ref: Option<Vec<f64>>,
    pub estimate: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub mu: MuSet,
    /// Empirical covariance of the replicate `MuSet`s.
    pub covariance: DMatrix<f64>,
    pub mu_intervals: Vec<(f64, f64)>,
    pub effects: Vec<BootstrapEffect>,
    pub reps_used: usize,
    pub discarded: usize,
    pub level: f64,
    pub interval: BootstrapInterval,
}

impl BootstrapResult {
    pub fn std_errors(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

fn interval(values: &mut [f64], estimate: f64, level: f64, kind: BootstrapInterval) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    match kind {
        BootstrapInterval::Percentile => {
            values.sort_by(f64::total_cmp);
            let lo = percentile_sorted(values, 0.5 * (1.0 - level));
            let hi = percentile_sorted(values, 0.5 * (1.0 + level));
            (se, lo, hi)
        }
        BootstrapInterval::Normal => {
            let half = normal_quantile(0.5 * (1.0 + level)) * se;
            (se, estimate - half, estimate + half)
        }
    }
}

/// Resamples clusters with replacement and re-estimates the whole grid.
///
/// Replicate `b` draws from the RNG substream `(seed, b)`, so the output is
/// independent of thread count. Replicates in which some arm has no units are
/// discarded; more than 10% discarded is an error. Effects are reported
/// against the all-zero `gamma` when it is part of the grid (otherwise only
/// direct effects).
pub fn cluster_bootstrap(
    dataset: &Dataset,
    design: &DesignPropensity,
    alpha: f64,
    gammas: &[Vec<f64>],
    options: &BootstrapOptions,
) -> Result<BootstrapResult> {
    if options.reps == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    if !(options.level > 0.0 && options.level < 1.0) {
        return Err(Error::invalid("level must lie in (0, 1)"));
    }
    let mu = estimate_mu_set(dataset, design, alpha, gammas)?;
    let n = dataset.n_clusters();
    let replicates: Vec<Option<Vec<f64>>> = (0..options.reps as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(options.seed, b);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match estimate_mu_set(&dataset.resample(&idx), design, alpha, gammas) {
                Ok(m) => Ok(Some(m.values)),
                Err(Error::DegenerateArm { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let kept: Vec<Vec<f64>> = replicates.into_iter().flatten().collect();
    let discarded = options.reps - kept.len();
    if discarded * 10 > options.reps {
        return Err(Error::TooManyDiscarded { discarded, reps: options.reps });
    }

    let dim = mu.len();
    let used = kept.len();
    let means: Vec<f64> = (0..dim).map(|m| kept.iter().map(|r| r[m]).sum::<f64>() / used as f64).collect();
    let mut covariance = DMatrix::zeros(dim, dim);
    if used > 1 {
        for r in &kept {
            for a in 0..dim {
                for b in a..dim {
                    covariance[(a, b)] += (r[a] - means[a]) * (r[b] - means[b]);
                }
            }
        }
        for a in 0..dim {
            for b in a..dim {
                let v = covariance[(a, b)] / (used - 1) as f64;
                covariance[(a, b)] = v;
                covariance[(b, a)] = v;
            }
        }
    }

    let mu_intervals = (0..dim)
        .map(|m| {
            let mut v: Vec<f64> = kept.iter().map(|r| r[m]).collect();
            let (_, lo, hi) = interval(&mut v, mu.values[m], options.level, options.interval);
            (lo, hi)
        })
        .collect();

    let zero = vec![0.0; dataset.n_covariates()];
    let reference = mu.gamma_index(&zero).ok().map(|_| zero.as_slice());
    let effects = all_contrasts(&mu, reference)?
        .into_iter()
        .map(|c| {
            let mut v: Vec<f64> = kept
                .iter()
                .map(|r| c.coefficients.iter().zip(r).map(|(a, b)| a * b).sum())
                .collect();
            let (se, lo, hi) = interval(&mut v, c.estimate, options.level, options.interval);
            BootstrapEffect {
                kind: c.kind,
                gamma: c.gamma,
                gamma_ref: c.gamma_ref,
                estimate: c.estimate,
                se,
                ci: (lo, hi),
            }
        })
        .collect();

    Ok(BootstrapResult {
        mu,
        covariance,
        mu_intervals,
        effects,
        reps_used: used,
        discarded,
        level: options.level,
        interval: options.interval,
    })
}

/// Index of each estimand's column in a `MuSet`, for callers assembling
/// contrast matrices by hand.
pub fn column(mu: &MuSet, estimand: Estimand, gamma: &[f64]) -> Result<usize> {
    Ok(mu.index(estimand, mu.gamma_index(gamma)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClusterData;

    fn design() -> DesignPropensity {
        DesignPropensity::ConstantBernoulli { p: 0.5 }
    }

    fn toy() -> Dataset {
        let clusters = vec![
            ClusterData::new("a", vec![0.0, 1.0], 1, vec![1, 0], vec![1.0, 3.0]).unwrap(),
            ClusterData::new("b", vec![1.0, 1.0], 1, vec![0, 1], vec![2.0, 5.0]).unwrap(),
        ];
        Dataset::new(clusters, vec!["x".into()]).unwrap()
    }

    #[test]
    fn single_cluster_psi_is_zero() {
        let c = ClusterData::new("a", vec![0.0, 1.0, 0.5], 1, vec![1, 0, 1], vec![1.0, 3.0, -2.0]).unwrap();
        let ds = Dataset::new(vec![c], vec!["x".into()]).unwrap();
        let mu = estimate_mu_set(&ds, &design(), 0.3, &[vec![0.0], vec![1.0]]).unwrap();
        let psi = psi_contributions(&ds, &design(), &mu).unwrap();
        assert!(psi.rows.iter().all(|v| v.abs() < 1e-12));
        assert!(sandwich_covariance(&psi).is_err());
    }

    #[test]
    fn constant_outcomes_give_zero_rows() {
        let ds = toy().map_outcomes(|_| 7.0);
        let mu = estimate_mu_set(&ds, &design(), 0.5, &[vec![0.0], vec![0.4]]).unwrap();
        let psi = psi_contributions(&ds, &design(), &mu).unwrap();
        assert!(psi.rows.iter().all(|v| v.abs() < 1e-12));
        let cov = sandwich_covariance(&psi).unwrap();
        assert!(cov.matrix.iter().all(|v| v.abs() < 1e-20));
    }

    // Two 2-unit clusters, gamma = 0 at alpha = design p: every cluster
    // weight is 1 and every fixed-arm weight is P(other)/f = 0.5/0.25 = 2.
    #[test]
    fn hand_computed_rows() {
        let ds = toy();
        let mu = estimate_mu_set(&ds, &design(), 0.5, &[vec![0.0]]).unwrap();
        // treated: units (a,0)=1 and (b,1)=5 -> mean 3; untreated: 3 and 2 -> 2.5; overall: 11/4
        assert!((mu.values[0] - 2.5).abs() < 1e-12);
        assert!((mu.values[1] - 3.0).abs() < 1e-12);
        assert!((mu.values[2] - 2.75).abs() < 1e-12);
        let psi = psi_contributions(&ds, &design(), &mu).unwrap();
        // n̄ = 2: psi = (1/2) * sum_j w (y - mu)
        let want = [
            [0.5 * 2.0 * (3.0 - 2.5), 0.5 * 2.0 * (1.0 - 3.0), 0.5 * ((1.0 - 2.75) + (3.0 - 2.75))],
            [0.5 * 2.0 * (2.0 - 2.5), 0.5 * 2.0 * (5.0 - 3.0), 0.5 * ((2.0 - 2.75) + (5.0 - 2.75))],
        ];
        for i in 0..2 {
            for m in 0..3 {
                assert!((psi.rows[(i, m)] - want[i][m]).abs() < 1e-12);
            }
        }
        let cov = sandwich_covariance(&psi).unwrap();
        assert_eq!(cov.bread, vec![1.0, 1.0, 1.0]);
        // Var(mu_overall) = mean(psi^2) / I with unit bread
        let v = (want[0][2].powi(2) + want[1][2].powi(2)) / 2.0 / 2.0;
        assert!((cov.matrix[(2, 2)] - v).abs() < 1e-12);
    }

    #[test]
    fn duplicated_clusters_scale_as_one_over_i() {
        let base = toy();
        let gammas = [vec![0.0], vec![0.6]];
        let cov_of = |copies: usize| {
            let idx: Vec<usize> = (0..copies).flat_map(|_| 0..base.n_clusters()).collect();
            let ds = base.resample(&idx);
            Fit::new(&ds, &design(), 0.5, &gammas).unwrap().covariance.matrix
        };
        let c1 = cov_of(1);
        let c5 = cov_of(5);
        for (a, b) in c1.iter().zip(c5.iter()) {
            assert!((a / 5.0 - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn effect_covariance_identity_and_zero_rows() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(effect_covariance(&cov, &DMatrix::identity(2, 2)).unwrap(), cov);
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]);
        let out = effect_covariance(&cov, &c).unwrap();
        assert_eq!(out[(0, 0)], 0.0);
        assert_eq!(out[(0, 1)], 0.0);
        assert!((out[(1, 1)] - 2.0).abs() < 1e-12);
        assert!(effect_covariance(&cov, &DMatrix::identity(2, 3)).is_err());
    }

    #[test]
    fn wald_examples() {
        assert_eq!(wald_ci(1.5, 0.0, 0.95).unwrap(), (1.5, 1.5));
        let (lo, hi) = wald_ci(0.0, 1.0, 0.95).unwrap();
        assert!((hi - 1.959964).abs() < 1e-6 && (lo + 1.959964).abs() < 1e-6);
        let (lo9, hi9) = wald_ci(0.0, 1.0, 0.9).unwrap();
        assert!(lo9 > lo && hi9 < hi);
        assert!(wald_ci(0.0, -1.0, 0.95).is_err());
    }

    #[test]
    fn bootstrap_single_replicate_and_determinism() {
        let clusters = (0..12)
            .map(|i| {
                let a = vec![(i % 2) as u8, ((i / 2) % 2) as u8, 1, 0];
                let y = vec![i as f64, 1.0, 2.0 + i as f64 * 0.1, 0.5];
                ClusterData::new(format!("c{i}"), vec![0.0, 1.0, 0.0, 1.0], 1, a, y).unwrap()
            })
            .collect();
        let ds = Dataset::new(clusters, vec!["x".into()]).unwrap();
        let gammas = [vec![0.0], vec![0.5]];
        let opts = BootstrapOptions { reps: 1, seed: 3, level: 0.95, interval: BootstrapInterval::Percentile };
        let one = cluster_bootstrap(&ds, &design(), 0.5, &gammas, &opts).unwrap();
        assert_eq!(one.reps_used, 1);
        assert!(one.covariance.iter().all(|v| *v == 0.0));
        assert!(one.mu_intervals.iter().all(|(lo, hi)| lo == hi));

        let opts = BootstrapOptions { reps: 40, ..opts };
        let a = cluster_bootstrap(&ds, &design(), 0.5, &gammas, &opts).unwrap();
        let b = cluster_bootstrap(&ds, &design(), 0.5, &gammas, &opts).unwrap();
        assert_eq!(a.covariance, b.covariance);
        assert_eq!(a.mu_intervals, b.mu_intervals);
        // DE for both gammas, IE0/IE1/OE for the non-reference one
        assert_eq!(a.effects.len(), 5);
    }

    #[test]
    fn bootstrap_discard_limit() {
        // one treated unit in the whole dataset: most resamples lose the arm
        let mut clusters: Vec<ClusterData> = (0..9)
            .map(|i| ClusterData::new(format!("c{i}"), vec![0.0, 1.0], 1, vec![0, 0], vec![1.0, 2.0]).unwrap())
            .collect();
        clusters.push(ClusterData::new("t", vec![0.0, 1.0], 1, vec![1, 0], vec![1.0, 2.0]).unwrap());
        let ds = Dataset::new(clusters, vec!["x".into()]).unwrap();
        let opts = BootstrapOptions { reps: 50, seed: 1, level: 0.95, interval: BootstrapInterval::Normal };
        assert!(matches!(
            cluster_bootstrap(&ds, &design(), 0.5, &[vec![0.0]], &opts),
            Err(Error::TooManyDiscarded { .. })
        ));
    }
}
