//! Data-driven ordinary Kriging: stationary Gaussian kernel, maximum-likelihood
//! estimation of the constant mean and process variance, and concentrated
//! log-likelihood maximization over per-dimension length scales.
//!
//! With correlation matrix `Psi` (unit-variance Gaussian kernel) the MLE
//! estimators are
//!
//! ```text
//! mu_hat     = (1^T Psi^-1 y) / (1^T Psi^-1 1)
//! sigma2_hat = (y - 1 mu_hat)^T Psi^-1 (y - 1 mu_hat) / N
//! L_c(l)     = -(N/2) ln sigma2_hat - (1/2) ln det Psi
//! ```
//!
//! and length scales are found by a deterministic multi-start Nelder-Mead
//! search in log-lengthscale space.

use nalgebra::DVector;

use crate::domain::{Locations, Observations, PointSet};
use crate::error::{PhikError, Result};
use crate::gp::{assemble_covariance, gp_predict, AlphaPolicy, CovarianceMatrix, GpModel, Prediction};
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Stationary Gaussian (squared-exponential) kernel with per-dimension
/// length scales: `k(x, x') = sigma2 * exp(-1/2 sum_i ((x_i - x'_i)/l_i)^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryKernel {
    sigma2: f64,
    lengthscales: Vec<f64>,
}

impl StationaryKernel {
    pub fn new(sigma2: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !sigma2.is_finite() || sigma2 <= 0.0 {
            return Err(PhikError::InvalidArgument(format!(
                "process variance must be positive, got {sigma2}"
            )));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(PhikError::InvalidArgument(format!(
                "length scales must be positive, got {lengthscales:?}"
            )));
        }
        Ok(Self { sigma2, lengthscales })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }
}

/// Evaluates the Gaussian kernel between two points.
pub fn gaussian_kernel(x: &[f64], x2: &[f64], kernel: &StationaryKernel) -> Result<f64> {
    let d = kernel.lengthscales.len();
    if x.len() != d || x2.len() != d {
        return Err(PhikError::DimensionMismatch {
            context: "gaussian_kernel point dimension",
            expected: d,
            got: if x.len() != d { x.len() } else { x2.len() },
        });
    }
    let q: f64 = x
        .iter()
        .zip(x2)
        .zip(&kernel.lengthscales)
        .map(|((a, b), l)| {
            let t = (a - b) / l;
            t * t
        })
        .sum();
    Ok(kernel.sigma2 * (-0.5 * q).exp())
}

/// Constant-mean GP with a stationary kernel; the model form used by ordinary
/// Kriging prediction.
#[derive(Clone, Debug)]
pub struct ConstantMeanGp {
    pub mean: f64,
    pub kernel: StationaryKernel,
}

impl GpModel for ConstantMeanGp {
    fn dim(&self) -> usize {
        self.kernel.lengthscales.len()
    }

    fn mean_at(&self, _p: &[f64]) -> Result<f64> {
        Ok(self.mean)
    }

    fn cov_at(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        gaussian_kernel(p, q, &self.kernel)
    }
}

/// Unit-variance Gaussian correlation matrix of a point set (not yet
/// factorized).
pub fn correlation_matrix(x: &PointSet, lengthscales: &[f64]) -> Result<CovarianceMatrix> {
    let kernel = StationaryKernel::new(1.0, lengthscales.to_vec())?;
    let model = ConstantMeanGp { mean: 0.0, kernel };
    assemble_covariance(&model, x)
}

/// MLE of the constant mean and process variance given a factorized
/// correlation matrix.
pub fn mle_mu_sigma(y: &DVector<f64>, psi: &CovarianceMatrix) -> Result<(f64, f64)> {
    let n = psi.n();
    if y.len() != n {
        return Err(PhikError::DimensionMismatch {
            context: "mle_mu_sigma observations",
            expected: n,
            got: y.len(),
        });
    }
    let ones = DVector::repeat(n, 1.0);
    let psi_inv_y = psi.solve(y)?;
    let psi_inv_1 = psi.solve(&ones)?;
    let mu_hat = ones.dot(&psi_inv_y) / ones.dot(&psi_inv_1);
    // Psi^-1 (y - mu 1) reuses the two solves by linearity
    let psi_inv_r = &psi_inv_y - &psi_inv_1 * mu_hat;
    let r = y - &ones * mu_hat;
    let sigma2_hat = r.dot(&psi_inv_r) / n as f64;
    Ok((mu_hat, sigma2_hat))
}

/// Concentrated log-likelihood of the length scales.
///
/// Returns `-inf` when the correlation matrix is not positive definite at
/// these length scales (infeasible point for the optimizer) and `+inf` when
/// the plug-in variance collapses to zero (degenerate, e.g. constant data).
pub fn concentrated_loglik(lengthscales: &[f64], x: &PointSet, y: &DVector<f64>) -> f64 {
    let n = x.len();
    debug_assert_eq!(n, y.len());
    let psi = match correlation_matrix(x, lengthscales)
        .and_then(|c| c.regularize(AlphaPolicy::Fixed(0.0)))
    {
        Ok(psi) => psi,
        Err(_) => return f64::NEG_INFINITY,
    };
    let (_, sigma2_hat) = match mle_mu_sigma(y, &psi) {
        Ok(v) => v,
        Err(_) => return f64::NEG_INFINITY,
    };
    // sigma2_hat is a difference of terms of size ~ y' Psi^-1 y / n, so once
    // it falls 12 decades below that scale it is pure cancellation noise
    // (exactly-constant data lands here at ~1e-31 instead of 0). The ratio is
    // scale-free, so rescaling y cannot move a fit across the threshold.
    let quad_scale = match psi.solve(y) {
        Ok(psi_inv_y) => y.dot(&psi_inv_y).abs() / n as f64,
        Err(_) => return f64::NEG_INFINITY,
    };
    if sigma2_hat <= 1e-12 * quad_scale {
        return f64::INFINITY;
    }
    let log_det = match psi.log_det() {
        Ok(v) => v,
        Err(_) => return f64::NEG_INFINITY,
    };
    -(n as f64 / 2.0) * sigma2_hat.ln() - 0.5 * log_det
}

/// Result of a maximum-likelihood hyperparameter fit.
#[derive(Clone, Debug)]
pub struct MleFit {
    /// Fitted kernel: `sigma2 = sigma2_hat`, length scales at the optimum.
    pub kernel: StationaryKernel,
    pub mu_hat: f64,
    pub sigma2_hat: f64,
    /// Concentrated log-likelihood at the reported optimum.
    pub log_likelihood: f64,
    /// Every (lengthscales, L_c) evaluation made during the search.
    pub optimizer_trace: Vec<(Vec<f64>, f64)>,
}

/// Default per-dimension length-scale search interval:
/// `[1e-2, 1e+1]` times the diagonal of the data's bounding box.
pub fn default_lengthscale_bounds(x: &PointSet) -> Vec<(f64, f64)> {
    let (lo, hi) = x.bounding_box();
    let diag = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    vec![(1e-2 * diag, 1e1 * diag); x.dim()]
}

/// Fits length scales by multi-start Nelder-Mead on the concentrated
/// log-likelihood in log-lengthscale space.
///
/// Starts are a 3-per-dimension lattice over the (log) bounds, capped at 27
/// lattice points, plus the bound midpoint. The search space is constrained by
/// clamping candidate points into the bounds before evaluation. Ties between
/// starts are broken by the lexicographically smallest log-lengthscale vector,
/// so the result does not depend on evaluation order.
pub fn fit_kriging(x: &PointSet, y: &[f64], bounds: &[(f64, f64)]) -> Result<MleFit> {
    let n = x.len();
    let d = x.dim();
    if n < 2 {
        return Err(PhikError::InvalidArgument(format!(
            "fit_kriging needs at least 2 observations, got {n}"
        )));
    }
    if y.len() != n {
        return Err(PhikError::DimensionMismatch {
            context: "fit_kriging observations",
            expected: n,
            got: y.len(),
        });
    }
    if bounds.len() != d {
        return Err(PhikError::DimensionMismatch {
            context: "fit_kriging bounds",
            expected: d,
            got: bounds.len(),
        });
    }
    for &(lo, hi) in bounds {
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(PhikError::InvalidArgument(format!(
                "invalid length-scale bounds ({lo}, {hi})"
            )));
        }
    }
    let yv = DVector::from_column_slice(y);
    let log_lo: Vec<f64> = bounds.iter().map(|b| b.0.ln()).collect();
    let log_hi: Vec<f64> = bounds.iter().map(|b| b.1.ln()).collect();

    let clamp = |logl: &[f64]| -> Vec<f64> {
        logl.iter()
            .enumerate()
            .map(|(k, v)| v.clamp(log_lo[k], log_hi[k]))
            .collect()
    };

    let mut trace: Vec<(Vec<f64>, f64)> = Vec::new();
    let objective = |logl: &[f64], trace: &mut Vec<(Vec<f64>, f64)>| -> f64 {
        let clamped = clamp(logl);
        let lengthscales: Vec<f64> = clamped.iter().map(|v| v.exp()).collect();
        let lc = concentrated_loglik(&lengthscales, x, &yv);
        trace.push((lengthscales, lc));
        // degenerate (+inf) and infeasible (-inf) are both unusable optima
        if lc.is_finite() {
            -lc
        } else {
            f64::INFINITY
        }
    };

    // 3^d log-uniform lattice (capped at 27 points) plus the bound midpoint
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let levels = [0.0, 0.5, 1.0];
    let lattice_size = 3usize.saturating_pow(d.min(5) as u32).min(27);
    let mut counter = vec![0usize; d];
    for _ in 0..lattice_size {
        let start: Vec<f64> = (0..d)
            .map(|k| log_lo[k] + levels[counter[k]] * (log_hi[k] - log_lo[k]))
            .collect();
        starts.push(start);
        for digit in counter.iter_mut() {
            *digit += 1;
            if *digit < 3 {
                break;
            }
            *digit = 0;
        }
    }
    let midpoint: Vec<f64> = (0..d).map(|k| 0.5 * (log_lo[k] + log_hi[k])).collect();
    if !starts.contains(&midpoint) {
        starts.push(midpoint);
    }

    let collapsed = bounds.iter().all(|&(lo, hi)| lo == hi);
    let step = 0.25
        * (0..d)
            .map(|k| log_hi[k] - log_lo[k])
            .fold(0.0f64, f64::max)
            .max(1e-3);
    let opts = NelderMeadOptions {
        initial_step: step,
        max_iters: 200,
        ..Default::default()
    };

    let mut best: Option<(f64, Vec<f64>)> = None; // (objective, clamped log-lengthscales)
    if collapsed {
        let obj = objective(&log_lo, &mut trace);
        best = Some((obj, log_lo.clone()));
    } else {
        for start in &starts {
            let outcome = nelder_mead(|l| objective(l, &mut trace), start, &opts);
            let cand = (outcome.f, clamp(&outcome.x));
            best = Some(match best.take() {
                None => cand,
                Some(cur) => {
                    if cand.0 < cur.0 || (cand.0 == cur.0 && lex_less(&cand.1, &cur.1)) {
                        cand
                    } else {
                        cur
                    }
                }
            });
        }
    }

    let (best_obj, best_logl) = best.expect("at least one start");
    if !best_obj.is_finite() {
        return Err(PhikError::FitFailure(
            "no feasible length scales in the given bounds (correlation matrix \
             singular or data variance degenerate everywhere)"
            .into(),
        ));
    }

    let lengthscales: Vec<f64> = best_logl.iter().map(|v| v.exp()).collect();
    let psi = correlation_matrix(x, &lengthscales)?.regularize(AlphaPolicy::Fixed(0.0))?;
    let (mu_hat, sigma2_hat) = mle_mu_sigma(&yv, &psi)?;
    if sigma2_hat <= 0.0 {
        return Err(PhikError::FitFailure(format!(
            "degenerate fit: plug-in variance {sigma2_hat} at the optimum \
             (constant observations?)"
        )));
    }
    let kernel = StationaryKernel::new(sigma2_hat, lengthscales)?;
    Ok(MleFit {
        kernel,
        mu_hat,
        sigma2_hat,
        log_likelihood: -best_obj,
        optimizer_trace: trace,
    })
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Ordinary-Kriging prediction: delegates to the shared GP pipeline with a
/// constant mean `mu_hat` and the fitted kernel, so
/// `y_hat = mu_hat + psi^T Psi^-1 (y - 1 mu_hat)` and
/// `s2 = sigma2_hat (1 - psi^T Psi^-1 psi)`.
pub fn kriging_predict(
    fit: &MleFit,
    x: &PointSet,
    y: &[f64],
    queries: &Locations,
) -> Result<Prediction> {
    let obs = Observations::new(x.clone(), y.to_vec())?;
    let model = ConstantMeanGp { mean: fit.mu_hat, kernel: fit.kernel.clone() };
    gp_predict(&model, &obs, queries, AlphaPolicy::Auto)
}
