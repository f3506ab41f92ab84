//! Shared Gaussian-process machinery: covariance assembly, diagonal
//! regularization, and the generic Kriging predictor and MSE.
//!
//! Every concrete model (parametric kernel or ensemble moments) implements
//! [`GpModel`]; prediction then follows the standard conditioning formulas
//!
//! ```text
//! y_hat(x*) = mu(x*) + c(x*)^T C^-1 (y - mu_obs)
//! s2(x*)    = k(x*, x*) - c(x*)^T C^-1 c(x*)
//! ```
//!
//! with all solves done through a cached Cholesky factorization, never an
//! explicit inverse. The MSE formula disregards the small term accounting for
//! uncertainty in the estimated mean.

use nalgebra::{DMatrix, DVector, Dyn};

use crate::domain::{Locations, Observations, PointSet};
use crate::error::{PhikError, Result};

/// A Gaussian-process prior: a mean function and a covariance function.
///
/// Ensemble-based models are only defined on their own location sets and
/// return [`PhikError::LocationNotInSet`] elsewhere.
pub trait GpModel {
    /// Spatial dimension of the model's inputs.
    fn dim(&self) -> usize;

    /// Prior mean at a point.
    fn mean_at(&self, p: &[f64]) -> Result<f64>;

    /// Prior covariance between two points.
    fn cov_at(&self, p: &[f64], q: &[f64]) -> Result<f64>;
}

/// Regularization policy for covariance matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaPolicy {
    /// Add exactly this value to the diagonal (0 allowed).
    Fixed(f64),
    /// Try the ladder `{0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4} * mean(diag)` and
    /// keep the smallest entry for which the Cholesky factorization succeeds.
    Auto,
}

/// A symmetric covariance matrix together with the regularization actually
/// applied to its diagonal and (after [`CovarianceMatrix::regularize`]) a
/// cached Cholesky factorization.
#[derive(Clone, Debug)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    alpha: f64,
    chol: Option<nalgebra::Cholesky<f64, Dyn>>,
}

impl CovarianceMatrix {
    /// Wraps a square matrix, checking finiteness and symmetry (to 1e-12
    /// relative to the largest entry).
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(PhikError::DimensionMismatch {
                context: "CovarianceMatrix (square)",
                expected: entries.nrows(),
                got: entries.ncols(),
            });
        }
        let mut scale: f64 = 0.0;
        for v in entries.iter() {
            if !v.is_finite() {
                return Err(PhikError::NonFinite(format!("covariance entry {v}")));
            }
            scale = scale.max(v.abs());
        }
        let tol = 1e-12 * scale.max(1.0);
        for i in 0..entries.nrows() {
            for j in (i + 1)..entries.ncols() {
                if (entries[(i, j)] - entries[(j, i)]).abs() > tol {
                    return Err(PhikError::InvalidArgument(format!(
                        "covariance matrix is not symmetric at ({i}, {j}): \
                         {} vs {}",
                        entries[(i, j)],
                        entries[(j, i)]
                    )));
                }
            }
        }
        Ok(Self { entries, alpha: 0.0, chol: None })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Matrix entries including any regularization already applied.
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// The diagonal increment actually applied.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_factorized(&self) -> bool {
        self.chol.is_some()
    }

    /// Applies the regularization policy and caches the Cholesky factor.
    ///
    /// With `Fixed(a)` the diagonal is incremented by exactly `a` and the
    /// factorization must succeed. With `Auto`, increasing multiples of the
    /// mean diagonal are tried and the first factorizable one wins; the value
    /// used is recorded in the result.
    pub fn regularize(mut self, policy: AlphaPolicy) -> Result<Self> {
        let n = self.n();
        let mean_diag = self.entries.diagonal().sum() / n.max(1) as f64;
        let candidates: Vec<f64> = match policy {
            AlphaPolicy::Fixed(a) => {
                if !a.is_finite() || a < 0.0 {
                    return Err(PhikError::InvalidArgument(format!(
                        "regularization alpha must be finite and nonnegative, got {a}"
                    )));
                }
                vec![a]
            }
            AlphaPolicy::Auto => [0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4]
                .iter()
                .map(|f| f * mean_diag)
                .collect(),
        };

        let mut last_alpha = 0.0;
        for &alpha in &candidates {
            last_alpha = alpha;
            let mut m = self.entries.clone();
            for i in 0..n {
                m[(i, i)] += alpha;
            }
            if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
                self.entries = m;
                self.alpha += alpha;
                self.chol = Some(chol);
                return Ok(self);
            }
        }
        Err(PhikError::SingularCovariance { alpha: last_alpha })
    }

    fn chol(&self) -> Result<&nalgebra::Cholesky<f64, Dyn>> {
        self.chol.as_ref().ok_or_else(|| {
            PhikError::InvalidArgument(
                "covariance matrix is not factorized; call regularize() first".into(),
            )
        })
    }

    /// Solves `C z = rhs` through the cached Cholesky factor.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.n() {
            return Err(PhikError::DimensionMismatch {
                context: "CovarianceMatrix::solve",
                expected: self.n(),
                got: rhs.len(),
            });
        }
        Ok(self.chol()?.solve(rhs))
    }

    /// Solves `C Z = RHS` column-wise.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.n() {
            return Err(PhikError::DimensionMismatch {
                context: "CovarianceMatrix::solve_matrix",
                expected: self.n(),
                got: rhs.nrows(),
            });
        }
        Ok(self.chol()?.solve(rhs))
    }

    /// `ln det C` from the Cholesky factor (`2 * sum ln L_ii`).
    pub fn log_det(&self) -> Result<f64> {
        let chol = self.chol()?;
        Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// Smallest eigenvalue of the (regularized) matrix, via a symmetric
    /// eigendecomposition. Used for the spectral form of constraint bounds.
    pub fn smallest_eigenvalue(&self) -> f64 {
        let eig = nalgebra::SymmetricEigen::new(self.entries.clone());
        eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates the model covariance on all pairs of `x`; each unordered pair is
/// computed once, so the result is exactly symmetric. No regularization is
/// applied here.
pub fn assemble_covariance(model: &dyn GpModel, x: &PointSet) -> Result<CovarianceMatrix> {
    if x.is_empty() {
        return Err(PhikError::InvalidArgument(
            "assemble_covariance requires a nonempty point set".into(),
        ));
    }
    let n = x.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let k = model.cov_at(x.point(i), x.point(j))?;
            if !k.is_finite() {
                return Err(PhikError::NonFinite(format!(
                    "covariance between points {i} and {j} evaluated to {k}"
                )));
            }
            m[(i, j)] = k;
            m[(j, i)] = k;
        }
    }
    CovarianceMatrix::new(m)
}

/// Free-function form of [`CovarianceMatrix::regularize`].
pub fn regularize(c: CovarianceMatrix, policy: AlphaPolicy) -> Result<CovarianceMatrix> {
    c.regularize(policy)
}

/// Posterior mean at `Q` query points:
/// `y_hat_q = mu_query_q + cross_cov[:,q]^T C^-1 (y - mu_obs)`.
pub fn krige_predict(
    mu_obs: &DVector<f64>,
    mu_query: &DVector<f64>,
    c: &CovarianceMatrix,
    cross_cov: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = c.n();
    if mu_obs.len() != n || y.len() != n {
        return Err(PhikError::DimensionMismatch {
            context: "krige_predict observation vectors",
            expected: n,
            got: if mu_obs.len() != n { mu_obs.len() } else { y.len() },
        });
    }
    if cross_cov.nrows() != n || cross_cov.ncols() != mu_query.len() {
        return Err(PhikError::DimensionMismatch {
            context: "krige_predict cross covariance",
            expected: n * mu_query.len(),
            got: cross_cov.nrows() * cross_cov.ncols(),
        });
    }
    let z = c.solve(&(y - mu_obs))?;
    Ok(mu_query + cross_cov.transpose() * z)
}

/// Posterior MSE at `Q` query points:
/// `s2_q = sigma2_query_q - cross_cov[:,q]^T C^-1 cross_cov[:,q]`.
///
/// The formula can dip slightly negative in floating point; negative results
/// are clamped to 0 (genuine violations beyond `-1e-10 * max sigma2` would
/// indicate an inconsistent model and are asserted against in the test suite).
pub fn krige_mse(
    sigma2_query: &DVector<f64>,
    c: &CovarianceMatrix,
    cross_cov: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if cross_cov.nrows() != c.n() || cross_cov.ncols() != sigma2_query.len() {
        return Err(PhikError::DimensionMismatch {
            context: "krige_mse cross covariance",
            expected: c.n() * sigma2_query.len(),
            got: cross_cov.nrows() * cross_cov.ncols(),
        });
    }
    let w = c.solve_matrix(cross_cov)?;
    let mut out = DVector::zeros(sigma2_query.len());
    for q in 0..sigma2_query.len() {
        let reduction = cross_cov.column(q).dot(&w.column(q));
        out[q] = (sigma2_query[q] - reduction).max(0.0);
    }
    Ok(out)
}

/// Posterior mean and MSE at a set of locations.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub locations: Locations,
    pub mean: Vec<f64>,
    pub mse: Vec<f64>,
    /// Diagonal regularization actually applied to the observation covariance.
    pub alpha: f64,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// The posterior mean as a [`crate::domain::Field`] when the prediction
    /// locations are a full grid.
    pub fn mean_field(&self) -> Result<crate::domain::Field> {
        match &self.locations {
            Locations::Grid(g) => crate::domain::Field::new(g.clone(), self.mean.clone()),
            Locations::Points(_) => Err(PhikError::InvalidArgument(
                "prediction locations are not a grid".into(),
            )),
        }
    }
}

/// Full conditioning pipeline for any [`GpModel`]: assembles and regularizes
/// the observation covariance, then evaluates the posterior mean and MSE at
/// the query locations.
pub fn gp_predict(
    model: &dyn GpModel,
    obs: &Observations,
    queries: &Locations,
    alpha: AlphaPolicy,
) -> Result<Prediction> {
    if obs.is_empty() {
        return Err(PhikError::InvalidArgument(
            "gp_predict requires at least one observation".into(),
        ));
    }
    let x = obs.locations();
    if x.dim() != model.dim() {
        return Err(PhikError::DimensionMismatch {
            context: "gp_predict observation dimension",
            expected: model.dim(),
            got: x.dim(),
        });
    }
    let n = x.len();
    let c = assemble_covariance(model, x)?.regularize(alpha)?;

    let mut mu_obs = DVector::zeros(n);
    for i in 0..n {
        mu_obs[i] = model.mean_at(x.point(i))?;
    }
    let y = DVector::from_column_slice(obs.values());

    let query_points = queries.to_point_set();
    let nq = query_points.len();
    let mut mu_query = DVector::zeros(nq);
    let mut sigma2_query = DVector::zeros(nq);
    let mut cross = DMatrix::zeros(n, nq);
    for q in 0..nq {
        let xq = query_points.point(q);
        mu_query[q] = model.mean_at(xq)?;
        sigma2_query[q] = model.cov_at(xq, xq)?;
        for i in 0..n {
            cross[(i, q)] = model.cov_at(x.point(i), xq)?;
        }
    }

    let mean = krige_predict(&mu_obs, &mu_query, &c, &cross, &y)?;
    let mse = krige_mse(&sigma2_query, &c, &cross)?;
    Ok(Prediction {
        locations: queries.clone(),
        mean: mean.iter().copied().collect(),
        mse: mse.iter().copied().collect(),
        alpha: c.alpha(),
    })
}
