//! Gaussian linear-model conditional draws shared by the α, β, γ, b and η
//! blocks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Posterior `N(P⁻¹ Dᵀr, P⁻¹)` with `P = DᵀD + prior precision`, held as a
/// Cholesky factor of `P`.
pub struct ConjugatePosterior {
    chol: Cholesky<f64, Dyn>,
    mean: DVector<f64>,
}

impl ConjugatePosterior {
    /// From precomputed normal equations: `gram = DᵀD`, `rhs = Dᵀr`.
    pub fn from_normal_equations(
        mut gram: DMatrix<f64>,
        rhs: DVector<f64>,
        prior_precision: &DMatrix<f64>,
        block: &'static str,
    ) -> Result<Self> {
        gram += prior_precision;
        let chol = Cholesky::new(gram).ok_or(Error::RankDeficient { block })?;
        let mean = chol.solve(&rhs);
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient { block });
        }
        Ok(Self { chol, mean })
    }

    pub fn new(
        design: &DMatrix<f64>,
        residuals: &[f64],
        prior_precision: &DMatrix<f64>,
        block: &'static str,
    ) -> Result<Self> {
        if design.nrows() != residuals.len() {
            return Err(Error::Config(format!(
                "{block}: {} design rows for {} residuals",
                design.nrows(),
                residuals.len()
            )));
        }
        let r = DVector::from_column_slice(residuals);
        Self::from_normal_equations(design.tr_mul(design), design.tr_mul(&r), prior_precision, block)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `mean + L⁻ᵀz` has covariance `(LLᵀ)⁻¹`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
        let lt = self.chol.l().transpose();
        let offset = lt.solve_upper_triangular(&z).expect("Cholesky factor has a positive diagonal");
        &self.mean + offset
    }
}

/// One draw of the coefficient block given its residuals.
pub fn gaussian_conjugate_update<R: Rng + ?Sized>(
    residuals: &[f64],
    design: &DMatrix<f64>,
    prior_precision: &DMatrix<f64>,
    block: &'static str,
    rng: &mut R,
) -> Result<DVector<f64>> {
    Ok(ConjugatePosterior::new(design, residuals, prior_precision, block)?.draw(rng))
}

/// Scalar special case (item effects): returns (mean, variance).
#[inline]
pub fn scalar_posterior(residual_sum: f64, count: usize, prior_precision: f64) -> (f64, f64) {
    let var = 1.0 / (prior_precision + count as f64);
    (var * residual_sum, var)
}
