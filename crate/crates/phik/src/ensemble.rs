//! Ensemble statistics: Monte-Carlo mean and covariance estimated from model
//! realizations, and GP prediction that uses those empirical moments as the
//! prior (in place of a parametric kernel fitted to data).
//!
//! For realizations `Y^1..Y^M` stored column-wise,
//!
//! ```text
//! mu(x_i)       = (1/M) sum_m Y^m(x_i)
//! k(x_i, x_j)   = (1/(M-1)) sum_m (Y^m(x_i) - mu(x_i)) (Y^m(x_j) - mu(x_j))
//! ```
//!
//! The empirical covariance has rank at most `M - 1`, so downstream solves may
//! need diagonal regularization (`AlphaPolicy::Auto`).

use nalgebra::{DMatrix, DVector};

use crate::domain::{Locations, Observations};
use crate::error::{PhikError, Result};
use crate::gp::{gp_predict, AlphaPolicy, GpModel, Prediction};

/// A set of model realizations sampled at shared locations.
///
/// `realizations` is `n_loc x M`: column `m` is one realization over all
/// locations. `M >= 1` is accepted at construction (a single realization is a
/// valid field sample); covariance estimation requires `M >= 2` and is
/// enforced where moments are computed.
#[derive(Clone, Debug)]
pub struct Ensemble {
    locations: Locations,
    realizations: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(locations: Locations, realizations: DMatrix<f64>) -> Result<Self> {
        if realizations.nrows() != locations.len() {
            return Err(PhikError::DimensionMismatch {
                context: "ensemble rows vs locations",
                expected: locations.len(),
                got: realizations.nrows(),
            });
        }
        if realizations.ncols() == 0 {
            return Err(PhikError::InvalidArgument(
                "ensemble must contain at least one realization".into(),
            ));
        }
        if let Some(v) = realizations.iter().find(|v| !v.is_finite()) {
            return Err(PhikError::NonFinite(format!("ensemble value {v}")));
        }
        Ok(Self { locations, realizations })
    }

    pub fn locations(&self) -> &Locations {
        &self.locations
    }

    pub fn n_locations(&self) -> usize {
        self.realizations.nrows()
    }

    /// Number of realizations `M`.
    pub fn n_realizations(&self) -> usize {
        self.realizations.ncols()
    }

    pub fn realizations(&self) -> &DMatrix<f64> {
        &self.realizations
    }

    /// One realization as a location-indexed vector.
    pub fn realization(&self, m: usize) -> DVector<f64> {
        self.realizations.column(m).into_owned()
    }
}

/// Pointwise ensemble mean over all locations.
pub fn mc_mean(ensemble: &Ensemble) -> DVector<f64> {
    let m = ensemble.n_realizations() as f64;
    let mut out = DVector::zeros(ensemble.n_locations());
    for col in ensemble.realizations.column_iter() {
        out += col;
    }
    out / m
}

/// Unbiased sample covariance between two subsets of locations
/// (`rows[i], cols[j]` entry is `cov(Y(x_rows[i]), Y(x_cols[j]))`).
pub fn mc_cov(ensemble: &Ensemble, rows: &[usize], cols: &[usize]) -> Result<DMatrix<f64>> {
    let moments = EmpiricalMoments::from_ensemble(ensemble)?;
    moments.cov_block(rows, cols)
}

/// Pointwise ensemble standard deviation (square root of the unbiased sample
/// variance) over all locations.
pub fn ensemble_std(ensemble: &Ensemble) -> Result<DVector<f64>> {
    let moments = EmpiricalMoments::from_ensemble(ensemble)?;
    Ok(DVector::from_fn(ensemble.n_locations(), |i, _| moments.std(i)))
}

/// Precomputed empirical moments of an ensemble: the pointwise mean and the
/// centered realization matrix, from which any covariance entry follows as a
/// scaled inner product of rows.
#[derive(Clone, Debug)]
pub struct EmpiricalMoments {
    locations: Locations,
    mean: DVector<f64>,
    /// `n_loc x M` matrix of `Y^m(x_i) - mu(x_i)`.
    centered: DMatrix<f64>,
    m: usize,
}

impl EmpiricalMoments {
    pub fn from_ensemble(ensemble: &Ensemble) -> Result<Self> {
        let m = ensemble.n_realizations();
        if m < 2 {
            return Err(PhikError::InvalidArgument(format!(
                "covariance estimation needs at least 2 realizations, got {m}"
            )));
        }
        let mean = mc_mean(ensemble);
        let mut centered = ensemble.realizations.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        Ok(Self { locations: ensemble.locations.clone(), mean, centered, m })
    }

    pub fn locations(&self) -> &Locations {
        &self.locations
    }

    pub fn n_realizations(&self) -> usize {
        self.m
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn centered(&self) -> &DMatrix<f64> {
        &self.centered
    }

    /// Covariance between locations by flat index.
    pub fn cov_between(&self, i: usize, j: usize) -> f64 {
        self.centered.row(i).dot(&self.centered.row(j)) / (self.m as f64 - 1.0)
    }

    /// Sample standard deviation at a location.
    pub fn std(&self, i: usize) -> f64 {
        self.cov_between(i, i).max(0.0).sqrt()
    }

    /// Dense covariance block for arbitrary row/column index sets.
    pub fn cov_block(&self, rows: &[usize], cols: &[usize]) -> Result<DMatrix<f64>> {
        let n = self.centered.nrows();
        if let Some(&bad) = rows.iter().chain(cols).find(|&&i| i >= n) {
            return Err(PhikError::InvalidArgument(format!(
                "location index {bad} out of range for {n} locations"
            )));
        }
        Ok(DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
            self.cov_between(rows[a], cols[b])
        }))
    }

    fn locate(&self, p: &[f64]) -> Result<usize> {
        self.locations.locate(p).ok_or_else(|| PhikError::LocationNotInSet {
            x: p.first().copied().unwrap_or(f64::NAN),
            y: p.get(1).copied().unwrap_or(f64::NAN),
        })
    }
}

impl GpModel for EmpiricalMoments {
    fn dim(&self) -> usize {
        self.locations.dim()
    }

    fn mean_at(&self, p: &[f64]) -> Result<f64> {
        Ok(self.mean[self.locate(p)?])
    }

    fn cov_at(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        Ok(self.cov_between(self.locate(p)?, self.locate(q)?))
    }
}

/// GP prediction with the ensemble's empirical mean and covariance as the
/// prior: `y_hat(x*) = mu(x*) + c^T C^-1 (y - mu)` with all moments estimated
/// from the realizations. Queries must be ensemble locations (the empirical
/// model is only defined there).
pub fn phik_predict(
    ensemble: &Ensemble,
    obs: &Observations,
    queries: &Locations,
    alpha: AlphaPolicy,
) -> Result<Prediction> {
    let moments = EmpiricalMoments::from_ensemble(ensemble)?;
    gp_predict(&moments, obs, queries, alpha)
}
