//! Zero-mean multivariate normal draws from a possibly singular covariance.
//!
//! Effect covariances are often rank-deficient (the reference policy's own
//! contrast has variance exactly zero), so the factor comes from a symmetric
//! eigendecomposition rather than a Cholesky factorization. Eigenvalues down
//! to `-1e-10 * trace` are treated as round-off and clipped to zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative tolerance for negative eigenvalues.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct MvnSampler {
    /// `V diag(sqrt(lambda))`, so `factor * z` has covariance `V Λ V'`.
    factor: DMatrix<f64>,
}

impl MvnSampler {
    pub fn new(covariance: &DMatrix<f64>) -> Result<Self> {
        let n = covariance.nrows();
        if covariance.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: covariance.ncols() });
        }
        let sym = (covariance + covariance.transpose()) * 0.5;
        let trace = sym.trace().abs();
        let eig = SymmetricEigen::new(sym);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if n > 0 && min < -PSD_TOLERANCE * trace {
            return Err(Error::NotPositiveSemiDefinite { min_eigenvalue: min });
        }
        let scale = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = eig.eigenvectors * DMatrix::from_diagonal(&scale);
        Ok(Self { factor })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample(StandardNormal)));
        &self.factor * z
    }
}
