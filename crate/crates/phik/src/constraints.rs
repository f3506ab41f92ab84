//! Preservation of linear constraints by ensemble-based GP prediction.
//!
//! When every ensemble realization satisfies a discrete linear constraint
//! `A u = g` exactly, the GP posterior mean built from the ensemble moments
//! satisfies it exactly too (at zero regularization). When realizations only
//! satisfy it approximately — to tolerance `eps` per realization — the
//! posterior-mean violation is still controlled a priori:
//!
//! ```text
//! ||A y_hat - g_bar|| <= eps + (2 eps sqrt(M/(M-1)) + sigma_g)
//!                              * ||a~||_inf * sum_i sigma(Y(x_i))
//! ```
//!
//! where `a~ = C^-1 (y - mu)` are the predictor coefficients, `g_bar` and
//! `sigma_g` are the mean and spread of the per-realization targets, and the
//! sum runs over ensemble standard deviations at the observation locations.
//! A multilevel analogue combines per-level tolerances `eps_l` with level
//! coefficients `C_l`. Both bounds hold for whatever coefficients the
//! (possibly regularized) solve actually produced, because the proof only
//! uses the representation of the posterior mean as
//! `mean + sum_i a~_i cov(., x_i)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::domain::{Grid2D, Locations, Observations};
use crate::ensemble::{EmpiricalMoments, Ensemble};
use crate::error::{PhikError, Result};
use crate::gp::{assemble_covariance, gp_predict, AlphaPolicy, GpModel, Prediction};
use crate::mlmc::MlmcMoments;

/// Norm used to measure constraint residuals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Weighted discrete L2: `sqrt(sum_r v_r^2 * weight)`.
    L2,
    /// Maximum absolute component.
    LInf,
}

/// Right-hand side of a discrete linear constraint `A u = g`.
#[derive(Clone, Debug)]
pub enum ConstraintTarget {
    /// One fixed target shared by every realization.
    Deterministic(DVector<f64>),
    /// One target column per realization (stochastic constraint data).
    PerRealization(DMatrix<f64>),
}

/// A discrete linear operator `A` (rows = constraints, columns = locations)
/// bundled with its target `g` and the norm its residuals are measured in.
#[derive(Clone, Debug)]
pub struct DiscreteLinearOperator {
    matrix: DMatrix<f64>,
    target: ConstraintTarget,
    norm: NormKind,
    weight: f64,
}

impl DiscreteLinearOperator {
    pub fn new(
        matrix: DMatrix<f64>,
        target: ConstraintTarget,
        norm: NormKind,
        weight: f64,
    ) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(PhikError::InvalidArgument(
                "constraint operator must have at least one row and column".into(),
            ));
        }
        if let Some(v) = matrix.iter().find(|v| !v.is_finite()) {
            return Err(PhikError::NonFinite(format!("operator entry {v}")));
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(PhikError::InvalidArgument(format!(
                "norm weight must be positive, got {weight}"
            )));
        }
        let k = matrix.nrows();
        let (rows, finite) = match &target {
            ConstraintTarget::Deterministic(g) => (g.len(), g.iter().all(|v| v.is_finite())),
            ConstraintTarget::PerRealization(g) => {
                (g.nrows(), g.iter().all(|v| v.is_finite()))
            }
        };
        if rows != k {
            return Err(PhikError::DimensionMismatch {
                context: "constraint target rows",
                expected: k,
                got: rows,
            });
        }
        if !finite {
            return Err(PhikError::NonFinite("constraint target".into()));
        }
        Ok(Self { matrix, target, norm, weight })
    }

    /// Replaces the target (shape-checked against the operator rows).
    pub fn with_target(self, target: ConstraintTarget) -> Result<Self> {
        Self::new(self.matrix, target, self.norm, self.weight)
    }

    /// Replaces the residual norm and its quadrature weight.
    pub fn with_norm(mut self, norm: NormKind, weight: f64) -> Result<Self> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(PhikError::InvalidArgument(format!(
                "norm weight must be positive, got {weight}"
            )));
        }
        self.norm = norm;
        self.weight = weight;
        Ok(self)
    }

    pub fn n_constraints(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_locations(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn target(&self) -> &ConstraintTarget {
        &self.target
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm
    }

    /// Applies the operator to a field given as flat values.
    pub fn apply(&self, values: &[f64]) -> Result<DVector<f64>> {
        if values.len() != self.n_locations() {
            return Err(PhikError::DimensionMismatch {
                context: "operator apply",
                expected: self.n_locations(),
                got: values.len(),
            });
        }
        Ok(&self.matrix * DVector::from_column_slice(values))
    }

    /// Applies the operator to every column of a matrix of fields.
    pub fn apply_to_columns(&self, fields: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if fields.nrows() != self.n_locations() {
            return Err(PhikError::DimensionMismatch {
                context: "operator apply (columns)",
                expected: self.n_locations(),
                got: fields.nrows(),
            });
        }
        Ok(&self.matrix * fields)
    }

    /// Residual norm in this operator's metric.
    pub fn residual_norm(&self, v: &DVector<f64>) -> f64 {
        match self.norm {
            NormKind::L2 => (v.iter().map(|x| x * x).sum::<f64>() * self.weight).sqrt(),
            NormKind::LInf => v.iter().fold(0.0f64, |acc, x| acc.max(x.abs())),
        }
    }

    /// Mean target `g_bar` (the target itself when deterministic).
    pub fn target_mean(&self) -> DVector<f64> {
        match &self.target {
            ConstraintTarget::Deterministic(g) => g.clone(),
            ConstraintTarget::PerRealization(g) => {
                let m = g.ncols() as f64;
                let mut out = DVector::zeros(g.nrows());
                for col in g.column_iter() {
                    out += col;
                }
                out / m
            }
        }
    }

    /// Target spread `sigma_g = sqrt( (1/(M-1)) sum_m ||g^m - g_bar||^2 )` in
    /// this operator's norm; zero for a deterministic target.
    pub fn sigma_g(&self) -> Result<f64> {
        match &self.target {
            ConstraintTarget::Deterministic(_) => Ok(0.0),
            ConstraintTarget::PerRealization(g) => {
                let m = g.ncols();
                if m < 2 {
                    return Err(PhikError::InvalidArgument(format!(
                        "target spread needs at least 2 realizations, got {m}"
                    )));
                }
                let g_bar = self.target_mean();
                let mut acc = 0.0;
                for col in g.column_iter() {
                    let d = col - &g_bar;
                    let n = self.residual_norm(&d);
                    acc += n * n;
                }
                Ok((acc / (m as f64 - 1.0)).sqrt())
            }
        }
    }

    /// Target column for realization `m` (the shared target when deterministic).
    fn target_column(&self, m: usize) -> DVector<f64> {
        match &self.target {
            ConstraintTarget::Deterministic(g) => g.clone(),
            ConstraintTarget::PerRealization(g) => g.column(m).into_owned(),
        }
    }

    fn per_realization_count(&self) -> Option<usize> {
        match &self.target {
            ConstraintTarget::Deterministic(_) => None,
            ConstraintTarget::PerRealization(g) => Some(g.ncols()),
        }
    }
}

/// One side of a rectangular grid boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryEdge {
    Left,
    Right,
    Bottom,
    Top,
}

fn edge_nodes(grid: &Grid2D, edge: BoundaryEdge) -> Vec<usize> {
    let (nx, ny) = (grid.nx(), grid.ny());
    match edge {
        BoundaryEdge::Left => (0..ny).map(|j| grid.flat_index(0, j)).collect(),
        BoundaryEdge::Right => (0..ny).map(|j| grid.flat_index(nx - 1, j)).collect(),
        BoundaryEdge::Bottom => (0..nx).map(|i| grid.flat_index(i, 0)).collect(),
        BoundaryEdge::Top => (0..nx).map(|i| grid.flat_index(i, ny - 1)).collect(),
    }
}

/// Restriction to the requested boundary edges: one row per boundary node (in
/// increasing flat order, corners deduplicated) selecting that node's value.
/// The target defaults to zero (homogeneous Dirichlet); attach profile data
/// with [`DiscreteLinearOperator::with_target`]. Residuals are measured in the
/// max norm by default.
pub fn boundary_restriction_operator(
    grid: &Grid2D,
    edges: &[BoundaryEdge],
) -> Result<DiscreteLinearOperator> {
    if edges.is_empty() {
        return Err(PhikError::InvalidArgument(
            "boundary restriction needs at least one edge".into(),
        ));
    }
    let mut nodes: Vec<usize> = edges.iter().flat_map(|&e| edge_nodes(grid, e)).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let mut matrix = DMatrix::zeros(nodes.len(), grid.n_nodes());
    for (row, &node) in nodes.iter().enumerate() {
        matrix[(row, node)] = 1.0;
    }
    let target = ConstraintTarget::Deterministic(DVector::zeros(nodes.len()));
    DiscreteLinearOperator::new(matrix, target, NormKind::LInf, 1.0)
}

/// Flat indices selected by a boundary restriction over these edges, in the
/// same order as the operator rows.
pub fn boundary_node_indices(grid: &Grid2D, edges: &[BoundaryEdge]) -> Vec<usize> {
    let mut nodes: Vec<usize> = edges.iter().flat_map(|&e| edge_nodes(grid, e)).collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Outward normal derivative along one edge, one row per edge node, using the
/// second-order one-sided stencil `(3u_0 - 4u_1 + u_2) / (2h)` oriented
/// outward (exact on quadratics). The target defaults to zero (homogeneous
/// Neumann).
pub fn normal_derivative_operator(
    grid: &Grid2D,
    edge: BoundaryEdge,
) -> Result<DiscreteLinearOperator> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let needs = match edge {
        BoundaryEdge::Left | BoundaryEdge::Right => nx,
        BoundaryEdge::Bottom | BoundaryEdge::Top => ny,
    };
    if needs < 3 {
        return Err(PhikError::InvalidArgument(
            "normal derivative stencil needs at least 3 nodes across the edge".into(),
        ));
    }
    let nodes = edge_nodes(grid, edge);
    let mut matrix = DMatrix::zeros(nodes.len(), grid.n_nodes());
    let (h, inward): (f64, Box<dyn Fn(usize, usize) -> usize>) = match edge {
        BoundaryEdge::Left => (grid.dx(), Box::new(move |k, s| k + s)),
        BoundaryEdge::Right => (grid.dx(), Box::new(move |k, s| k - s)),
        BoundaryEdge::Bottom => (grid.dy(), Box::new(move |k, s| k + s * nx)),
        BoundaryEdge::Top => (grid.dy(), Box::new(move |k, s| k - s * nx)),
    };
    for (row, &k) in nodes.iter().enumerate() {
        // u_0 on the boundary, u_1 and u_2 inward; the outward direction is
        // minus the inward one, flipping the stencil sign
        matrix[(row, k)] = 3.0 / (2.0 * h);
        matrix[(row, inward(k, 1))] = -4.0 / (2.0 * h);
        matrix[(row, inward(k, 2))] = 1.0 / (2.0 * h);
    }
    let target = ConstraintTarget::Deterministic(DVector::zeros(nodes.len()));
    DiscreteLinearOperator::new(matrix, target, NormKind::LInf, 1.0)
}

/// A-priori violation bound for the posterior mean, with everything needed to
/// audit it.
#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    /// Norm the residuals are measured in.
    pub norm: NormKind,
    /// Diagonal regularization used by the prediction under audit.
    pub alpha: f64,
    /// Number of levels (1 for a plain ensemble).
    pub levels: usize,
    /// Per-level constraint tolerance of the realizations (measured for a
    /// plain ensemble, caller-supplied for multilevel).
    pub epsilon: Vec<f64>,
    /// Spread of the per-realization targets around their mean.
    pub sigma_g: f64,
    /// Max-norm of the predictor coefficients `a~ = C^-1 (y - mu)`.
    pub coeff_inf: f64,
    /// Sum over levels and observation locations of the ensemble standard
    /// deviation.
    pub std_sum: f64,
    /// Multilevel level coefficients `C_l` (empty for a plain ensemble, whose
    /// bound is the single displayed formula).
    pub level_coefficients: Vec<f64>,
    /// The a-priori bound on `||A y_hat - g_bar||`.
    pub bound: f64,
    /// Looser variant replacing every coefficient by the spectral estimate
    /// `||y - mu||_2 / lambda_min(C)`; absent if the smallest eigenvalue is
    /// not positive.
    pub spectral_bound: Option<f64>,
    /// Actually measured `||A y_hat - g_bar||`.
    pub measured: f64,
    /// Whether `measured <= bound` up to 1e-8 relative slack.
    pub satisfied: bool,
}

fn locate_all(locations: &Locations, obs: &Observations) -> Result<Vec<usize>> {
    obs.locations()
        .iter()
        .map(|p| {
            locations.locate(p).ok_or_else(|| PhikError::LocationNotInSet {
                x: p.first().copied().unwrap_or(f64::NAN),
                y: p.get(1).copied().unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// Recomputes the predictor coefficients `a~ = (C + alpha I)^-1 (y - mu)`
/// exactly as the audited prediction produced them, and the residual 2-norm
/// and smallest covariance eigenvalue for the spectral variant.
fn predictor_coefficients(
    model: &dyn GpModel,
    obs: &Observations,
    alpha: f64,
) -> Result<(DVector<f64>, f64, f64)> {
    let c = assemble_covariance(model, obs.locations())?
        .regularize(AlphaPolicy::Fixed(alpha))?;
    let mut resid = DVector::zeros(obs.len());
    for (i, p) in obs.locations().iter().enumerate() {
        resid[i] = obs.values()[i] - model.mean_at(p)?;
    }
    let coeff = c.solve(&resid)?;
    Ok((coeff, resid.norm(), c.smallest_eigenvalue()))
}

fn check_prediction_shape(
    locations: &Locations,
    a: &DiscreteLinearOperator,
    prediction: &Prediction,
) -> Result<()> {
    if a.n_locations() != locations.len() {
        return Err(PhikError::DimensionMismatch {
            context: "operator columns vs model locations",
            expected: locations.len(),
            got: a.n_locations(),
        });
    }
    if prediction.locations != *locations || prediction.mean.len() != locations.len() {
        return Err(PhikError::GridMismatch(
            "prediction must cover exactly the model's location set".into(),
        ));
    }
    Ok(())
}

/// Audits a plain-ensemble prediction against the preservation bound.
///
/// The per-realization tolerance `eps` is measured from the ensemble itself
/// (`max_m ||A Y^m - g^m||`), so the report is fully determined by its inputs:
///
/// ```text
/// bound = eps + (2 eps sqrt(M/(M-1)) + sigma_g) * ||a~||_inf * sum_i sigma(Y(x_i))
/// ```
pub fn preservation_bound(
    moments: &EmpiricalMoments,
    obs: &Observations,
    a: &DiscreteLinearOperator,
    prediction: &Prediction,
) -> Result<BoundReport> {
    check_prediction_shape(moments.locations(), a, prediction)?;
    let m = moments.n_realizations();
    if let Some(cols) = a.per_realization_count() {
        if cols != m {
            return Err(PhikError::DimensionMismatch {
                context: "per-realization targets vs ensemble size",
                expected: m,
                got: cols,
            });
        }
    }
    let obs_idx = locate_all(moments.locations(), obs)?;

    // eps = max_m || A Y^m - g^m ||, computed as A mean + A centered columns
    let a_mean = a.apply(moments.mean().as_slice())?;
    let a_centered = a.apply_to_columns(moments.centered())?;
    let mut eps = 0.0f64;
    for mm in 0..m {
        let resid = &a_mean + a_centered.column(mm) - a.target_column(mm);
        eps = eps.max(a.residual_norm(&resid));
    }

    let sigma_g = a.sigma_g()?;
    let (coeff, resid_norm, lambda_min) =
        predictor_coefficients(moments, obs, prediction.alpha)?;
    let coeff_inf = coeff.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let std_sum: f64 = obs_idx.iter().map(|&i| moments.std(i)).sum();

    let m_factor = (m as f64 / (m as f64 - 1.0)).sqrt();
    let bound = eps + (2.0 * eps * m_factor + sigma_g) * coeff_inf * std_sum;
    let spectral_bound = (lambda_min > 0.0).then(|| {
        eps + (2.0 * eps * m_factor + sigma_g) * (resid_norm / lambda_min) * std_sum
    });

    let measured_vec = a.apply(&prediction.mean)? - a.target_mean();
    let measured = a.residual_norm(&measured_vec);
    Ok(BoundReport {
        norm: a.norm_kind(),
        alpha: prediction.alpha,
        levels: 1,
        epsilon: vec![eps],
        sigma_g,
        coeff_inf,
        std_sum,
        level_coefficients: Vec::new(),
        bound,
        spectral_bound,
        measured,
        satisfied: measured <= bound + 1e-8 * (1.0 + bound.abs()),
    })
}

/// Audits a multilevel prediction against the level-wise preservation bound
///
/// ```text
/// bound = sum_l C_l eps_l + sigma_g * sum_i |a~_i| sigma_1(x_i)
/// ```
///
/// with `C_L = 1 + 2 sum_i |a~_i| f_L sigma_L(x_i)`,
/// `C_l = 2 + 2 sum_i |a~_i| (f_l sigma_l(x_i) + f_{l+1} sigma_{l+1}(x_i))`
/// for `l < L`, and `f_l = sqrt(M_l/(M_l-1))`.
///
/// `eps_levels[l]` is the caller's tolerance for level-`l` model realizations
/// (`||A Y_l^m - g^m|| <= eps_l`). Only differences are stored for `l >= 2`,
/// so the hypothesis is verified through its checkable consequences:
/// level 1 residuals within `eps_1`, level-`l` difference residuals within
/// `eps_l + eps_{l-1}` (the shared target cancels inside a coupled pair).
/// Per-realization targets refer to the level-1 ensemble.
pub fn preservation_bound_multilevel(
    moments: &MlmcMoments,
    obs: &Observations,
    a: &DiscreteLinearOperator,
    prediction: &Prediction,
    eps_levels: &[f64],
) -> Result<BoundReport> {
    check_prediction_shape(moments.locations(), a, prediction)?;
    let n_levels = moments.n_levels();
    if eps_levels.len() != n_levels {
        return Err(PhikError::DimensionMismatch {
            context: "per-level tolerances",
            expected: n_levels,
            got: eps_levels.len(),
        });
    }
    if let Some(&bad) = eps_levels.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(PhikError::InvalidArgument(format!(
            "level tolerances must be finite and nonnegative, got {bad}"
        )));
    }
    let m1 = moments.realizations_per_level()[0];
    if let Some(cols) = a.per_realization_count() {
        if cols != m1 {
            return Err(PhikError::DimensionMismatch {
                context: "per-realization targets vs coarsest level size",
                expected: m1,
                got: cols,
            });
        }
    }
    let obs_idx = locate_all(moments.locations(), obs)?;

    // verify the checkable consequences of the level-wise hypothesis
    for (l, level) in moments.level_moments().iter().enumerate() {
        let allowed = if l == 0 {
            eps_levels[0]
        } else {
            eps_levels[l] + eps_levels[l - 1]
        };
        let slack = 1e-9 * (1.0 + allowed);
        let a_mean = a.apply(level.mean().as_slice())?;
        let a_centered = a.apply_to_columns(level.centered())?;
        for mm in 0..level.n_realizations() {
            let resid = if l == 0 {
                &a_mean + a_centered.column(mm) - a.target_column(mm)
            } else {
                &a_mean + a_centered.column(mm)
            };
            let r = a.residual_norm(&resid);
            if r > allowed + slack {
                return Err(PhikError::ConstraintPrecondition {
                    realization: mm,
                    residual: r,
                    tolerance: allowed,
                });
            }
        }
    }

    let sigma_g = a.sigma_g()?;
    let (coeff, resid_norm, lambda_min) =
        predictor_coefficients(moments, obs, prediction.alpha)?;
    let coeff_inf = coeff.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));

    // s_l = sum_i |a~_i| sigma_l(x_i), weighted by the per-level inflation
    let f: Vec<f64> = moments
        .realizations_per_level()
        .iter()
        .map(|&ml| (ml as f64 / (ml as f64 - 1.0)).sqrt())
        .collect();
    let s: Vec<f64> = moments
        .level_moments()
        .iter()
        .map(|lm| {
            obs_idx
                .iter()
                .enumerate()
                .map(|(k, &i)| coeff[k].abs() * lm.std(i))
                .sum()
        })
        .collect();
    let sigma_total: Vec<f64> = moments
        .level_moments()
        .iter()
        .map(|lm| obs_idx.iter().map(|&i| lm.std(i)).sum())
        .collect();

    let mut level_coefficients = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let c_l = if l == n_levels - 1 {
            1.0 + 2.0 * f[l] * s[l]
        } else {
            2.0 + 2.0 * (f[l] * s[l] + f[l + 1] * s[l + 1])
        };
        level_coefficients.push(c_l);
    }
    let bound: f64 = level_coefficients
        .iter()
        .zip(eps_levels)
        .map(|(c, e)| c * e)
        .sum::<f64>()
        + sigma_g * s[0];

    // spectral variant: every |a~_i| replaced by ||y - mu||_2 / lambda_min
    let spectral_bound = (lambda_min > 0.0).then(|| {
        let rho = resid_norm / lambda_min;
        let s_spec: Vec<f64> = sigma_total.iter().map(|t| rho * t).collect();
        let mut total = sigma_g * s_spec[0];
        for l in 0..n_levels {
            let c_l = if l == n_levels - 1 {
                1.0 + 2.0 * f[l] * s_spec[l]
            } else {
                2.0 + 2.0 * (f[l] * s_spec[l] + f[l + 1] * s_spec[l + 1])
            };
            total += c_l * eps_levels[l];
        }
        total
    });

    let measured_vec = a.apply(&prediction.mean)? - a.target_mean();
    let measured = a.residual_norm(&measured_vec);
    Ok(BoundReport {
        norm: a.norm_kind(),
        alpha: prediction.alpha,
        levels: n_levels,
        epsilon: eps_levels.to_vec(),
        sigma_g,
        coeff_inf,
        std_sum: sigma_total.iter().sum(),
        level_coefficients,
        bound,
        spectral_bound,
        measured,
        satisfied: measured <= bound + 1e-8 * (1.0 + bound.abs()),
    })
}

/// Result of the exact-preservation check.
#[derive(Clone, Debug, Serialize)]
pub struct ExactPreservation {
    /// `||A y_hat - g_bar||_inf`-style residual in the operator's norm.
    pub max_violation: f64,
    /// Pass threshold, `1e-9 * (1 + ||g_bar||_inf)`.
    pub tolerance: f64,
    pub passed: bool,
}

/// Verifies that constraints satisfied exactly by every realization are
/// inherited exactly (to rounding) by the unregularized posterior mean.
///
/// First checks the hypothesis — every realization's residual within
/// `1e-12 * (1 + max |g|)` — then predicts over the full location set with
/// `alpha = 0` and measures the posterior-mean residual.
pub fn exact_preservation_check(
    ensemble: &Ensemble,
    obs: &Observations,
    a: &DiscreteLinearOperator,
) -> Result<ExactPreservation> {
    let moments = EmpiricalMoments::from_ensemble(ensemble)?;
    if a.n_locations() != ensemble.n_locations() {
        return Err(PhikError::DimensionMismatch {
            context: "operator columns vs ensemble locations",
            expected: ensemble.n_locations(),
            got: a.n_locations(),
        });
    }
    let g_bar = a.target_mean();
    let g_scale = g_bar.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let pre_tol = 1e-12 * (1.0 + g_scale);

    let a_mean = a.apply(moments.mean().as_slice())?;
    let a_centered = a.apply_to_columns(moments.centered())?;
    for mm in 0..ensemble.n_realizations() {
        let resid = &a_mean + a_centered.column(mm) - a.target_column(mm);
        let r = a.residual_norm(&resid);
        if r > pre_tol {
            return Err(PhikError::ConstraintPrecondition {
                realization: mm,
                residual: r,
                tolerance: pre_tol,
            });
        }
    }

    let prediction = gp_predict(
        &moments,
        obs,
        ensemble.locations(),
        AlphaPolicy::Fixed(0.0),
    )?;
    let resid = a.apply(&prediction.mean)? - &g_bar;
    let max_violation = a.residual_norm(&resid);
    let tolerance = 1e-9 * (1.0 + g_scale);
    Ok(ExactPreservation {
        max_violation,
        tolerance,
        passed: max_violation <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PointSet;
    use crate::ensemble::phik_predict;
    use crate::mlmc::{mlmc_phik_predict, LevelEnsemble};
    use crate::rng::SplitMix64;

    #[test]
    fn boundary_restriction_selects_sorted_boundary_nodes() {
        let g = Grid2D::unit(3, 3).unwrap();
        let op = boundary_restriction_operator(
            &g,
            &[
                BoundaryEdge::Left,
                BoundaryEdge::Right,
                BoundaryEdge::Bottom,
                BoundaryEdge::Top,
            ],
        )
        .unwrap();
        assert_eq!(op.n_constraints(), 8); // all but the center node
        assert_eq!(
            boundary_node_indices(&g, &[
                BoundaryEdge::Left,
                BoundaryEdge::Right,
                BoundaryEdge::Bottom,
                BoundaryEdge::Top,
            ]),
            vec![0, 1, 2, 3, 5, 6, 7, 8]
        );
        let values: Vec<f64> = (0..9).map(|k| k as f64 * 10.0).collect();
        let picked = op.apply(&values).unwrap();
        assert_eq!(
            picked.as_slice(),
            &[0.0, 10.0, 20.0, 30.0, 50.0, 60.0, 70.0, 80.0]
        );
    }

    #[test]
    fn single_edge_restriction_on_rectangular_grid() {
        let g = Grid2D::new(3, 4, 0.0, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(
            boundary_node_indices(&g, &[BoundaryEdge::Left]),
            vec![0, 3, 6, 9]
        );
        // overlapping edges share the corner node exactly once
        assert_eq!(
            boundary_node_indices(&g, &[BoundaryEdge::Left, BoundaryEdge::Bottom]),
            vec![0, 1, 2, 3, 6, 9]
        );
    }

    #[test]
    fn normal_derivative_is_exact_on_quadratics() {
        let g = Grid2D::new(5, 4, 0.0, 1.0, 0.0, 1.0).unwrap();
        let u: Vec<f64> = (0..g.n_nodes())
            .map(|k| {
                let [x, _] = g.point_at(k);
                (x - 0.3) * (x - 0.3)
            })
            .collect();
        // outward normal on the left edge is -x: d/dn = -2(x - 0.3) = 0.6 at x=0
        let left = normal_derivative_operator(&g, BoundaryEdge::Left).unwrap();
        for v in left.apply(&u).unwrap().iter() {
            assert!((v - 0.6).abs() < 1e-12, "{v}");
        }
        // outward normal on the right edge is +x: 2(1 - 0.3) = 1.4
        let right = normal_derivative_operator(&g, BoundaryEdge::Right).unwrap();
        for v in right.apply(&u).unwrap().iter() {
            assert!((v - 1.4).abs() < 1e-12, "{v}");
        }
        // u is constant in y, so both horizontal-edge derivatives vanish
        let v: Vec<f64> = (0..g.n_nodes())
            .map(|k| {
                let [_, y] = g.point_at(k);
                1.0 + y * y
            })
            .collect();
        let bottom = normal_derivative_operator(&g, BoundaryEdge::Bottom).unwrap();
        for w in bottom.apply(&v).unwrap().iter() {
            assert!(w.abs() < 1e-12, "{w}");
        }
        let top = normal_derivative_operator(&g, BoundaryEdge::Top).unwrap();
        for w in top.apply(&v).unwrap().iter() {
            assert!((w - 2.0).abs() < 1e-12, "{w}");
        }
    }

    #[test]
    fn target_statistics_match_hand_values() {
        let matrix = DMatrix::<f64>::identity(2, 3);
        let g = DMatrix::from_column_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let op = DiscreteLinearOperator::new(
            matrix.clone(),
            ConstraintTarget::PerRealization(g.clone()),
            NormKind::L2,
            1.0,
        )
        .unwrap();
        assert_eq!(op.target_mean().as_slice(), &[2.0, 3.0]);
        // deviations (-1,-1) and (1,1): squared L2 norms 2 and 2, sigma_g = 2
        assert!((op.sigma_g().unwrap() - 2.0).abs() < 1e-15);

        let op_inf = DiscreteLinearOperator::new(
            matrix,
            ConstraintTarget::PerRealization(g),
            NormKind::LInf,
            1.0,
        )
        .unwrap();
        assert!((op_inf.sigma_g().unwrap() - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn residual_norms() {
        let op = DiscreteLinearOperator::new(
            DMatrix::identity(3, 3),
            ConstraintTarget::Deterministic(DVector::zeros(3)),
            NormKind::L2,
            0.25,
        )
        .unwrap();
        let v = DVector::from_column_slice(&[3.0, -4.0, 0.0]);
        assert!((op.residual_norm(&v) - 2.5).abs() < 1e-15); // sqrt(25 * 0.25)
        let op = op.with_norm(NormKind::LInf, 1.0).unwrap();
        assert_eq!(op.residual_norm(&v), 4.0);
    }

    /// Ensemble on a small grid whose realizations all equal a fixed boundary
    /// profile on the boundary and vary only in the interior.
    fn boundary_respecting_ensemble(
        grid: &Grid2D,
        m: usize,
        seed: u64,
    ) -> (Ensemble, DVector<f64>) {
        let n = grid.n_nodes();
        let mut rng = SplitMix64::new(seed);
        let profile: Vec<f64> = (0..n)
            .map(|k| {
                let [x, y] = grid.point_at(k);
                1.0 + 0.5 * x - 0.25 * y
            })
            .collect();
        let mut r = DMatrix::zeros(n, m);
        for mm in 0..m {
            for k in 0..n {
                let (i, j) = grid.from_flat(k);
                let bump = if grid.is_boundary(i, j) {
                    0.0
                } else {
                    rng.next_standard_normal()
                };
                r[(k, mm)] = profile[k] + bump;
            }
        }
        let edges = [
            BoundaryEdge::Left,
            BoundaryEdge::Right,
            BoundaryEdge::Bottom,
            BoundaryEdge::Top,
        ];
        let nodes = boundary_node_indices(grid, &edges);
        let g = DVector::from_iterator(nodes.len(), nodes.iter().map(|&k| profile[k]));
        (
            Ensemble::new(Locations::Grid(grid.clone()), r).unwrap(),
            g,
        )
    }

    #[test]
    fn exact_preservation_holds_for_conforming_ensemble() {
        let grid = Grid2D::unit(5, 5).unwrap();
        let (ensemble, g) = boundary_respecting_ensemble(&grid, 40, 17);
        let edges = [
            BoundaryEdge::Left,
            BoundaryEdge::Right,
            BoundaryEdge::Bottom,
            BoundaryEdge::Top,
        ];
        let op = boundary_restriction_operator(&grid, &edges)
            .unwrap()
            .with_target(ConstraintTarget::Deterministic(g))
            .unwrap();
        let obs = Observations::new(
            PointSet::from_2d(&[[0.25, 0.25], [0.75, 0.5], [0.5, 0.75]]).unwrap(),
            vec![1.3, 0.9, 1.1],
        )
        .unwrap();
        let check = exact_preservation_check(&ensemble, &obs, &op).unwrap();
        assert!(check.passed, "violation {} > {}", check.max_violation, check.tolerance);
    }

    #[test]
    fn exact_preservation_rejects_nonconforming_realization() {
        let grid = Grid2D::unit(5, 5).unwrap();
        let (ensemble, g) = boundary_respecting_ensemble(&grid, 10, 23);
        // tamper with one boundary value of realization 4
        let mut r = ensemble.realizations().clone();
        r[(0, 4)] += 1e-6;
        let bad = Ensemble::new(Locations::Grid(grid.clone()), r).unwrap();
        let edges = [
            BoundaryEdge::Left,
            BoundaryEdge::Right,
            BoundaryEdge::Bottom,
            BoundaryEdge::Top,
        ];
        let op = boundary_restriction_operator(&grid, &edges)
            .unwrap()
            .with_target(ConstraintTarget::Deterministic(g))
            .unwrap();
        let obs = Observations::new(
            PointSet::from_2d(&[[0.25, 0.25], [0.5, 0.5]]).unwrap(),
            vec![1.0, 1.2],
        )
        .unwrap();
        match exact_preservation_check(&bad, &obs, &op) {
            Err(PhikError::ConstraintPrecondition { realization, .. }) => {
                assert_eq!(realization, 4);
            }
            other => panic!("expected ConstraintPrecondition, got {other:?}"),
        }
    }

    fn random_ensemble(grid: &Grid2D, m: usize, seed: u64) -> Ensemble {
        // smooth correlated fields so the observation covariance is
        // well-conditioned without regularization
        let mut rng = SplitMix64::new(seed);
        let n = grid.n_nodes();
        let r = DMatrix::from_fn(n, m, |_, _| rng.next_standard_normal());
        // add smooth structure: each realization is a random affine field plus noise
        let mut rng2 = SplitMix64::new(seed ^ 0xabcdef);
        let mut out = DMatrix::zeros(n, m);
        for mm in 0..m {
            let (a, b, c) = (
                rng2.next_standard_normal(),
                rng2.next_standard_normal(),
                rng2.next_standard_normal(),
            );
            for k in 0..n {
                let [x, y] = grid.point_at(k);
                out[(k, mm)] = a + b * x + c * y + 0.05 * r[(k, mm)];
            }
        }
        Ensemble::new(Locations::Grid(grid.clone()), out).unwrap()
    }

    #[test]
    fn single_level_bound_dominates_measured_violation() {
        let grid = Grid2D::unit(4, 4).unwrap();
        let ensemble = random_ensemble(&grid, 25, 3);
        let moments = EmpiricalMoments::from_ensemble(&ensemble).unwrap();

        // stochastic constraint: per-realization targets equal to A Y^m, so
        // eps = 0 but sigma_g > 0
        let matrix = DMatrix::from_fn(2, 16, |r, c| ((r + 2 * c) % 5) as f64 / 5.0);
        let g = matrix.clone() * ensemble.realizations();
        let op = DiscreteLinearOperator::new(
            matrix,
            ConstraintTarget::PerRealization(g),
            NormKind::L2,
            1.0,
        )
        .unwrap();

        let obs = Observations::new(
            PointSet::from_2d(&[[0.0, 0.0], [1.0 / 3.0, 2.0 / 3.0], [1.0, 1.0]]).unwrap(),
            vec![0.4, 1.0, -0.3],
        )
        .unwrap();
        let prediction =
            phik_predict(&ensemble, &obs, ensemble.locations(), AlphaPolicy::Auto).unwrap();
        let report = preservation_bound(&moments, &obs, &op, &prediction).unwrap();

        assert!(report.epsilon[0] < 1e-12, "exact targets give eps ~ 0");
        assert!(report.sigma_g > 0.0);
        assert!(report.satisfied, "measured {} vs bound {}", report.measured, report.bound);
        if let Some(sb) = report.spectral_bound {
            assert!(sb >= report.bound - 1e-12 * report.bound.abs());
        }
    }

    #[test]
    fn single_level_eps_matches_injected_residuals() {
        let grid = Grid2D::unit(3, 3).unwrap();
        let ensemble = random_ensemble(&grid, 10, 8);
        let moments = EmpiricalMoments::from_ensemble(&ensemble).unwrap();
        let matrix = DMatrix::from_row_slice(1, 9, &[1.0; 9]);
        // deterministic target g = A mean shifted by known per-realization gaps
        let a_cols = matrix.clone() * ensemble.realizations();
        let worst = a_cols.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let g = DVector::from_column_slice(&[worst + 0.5]);
        let op = DiscreteLinearOperator::new(
            matrix,
            ConstraintTarget::Deterministic(g.clone()),
            NormKind::LInf,
            1.0,
        )
        .unwrap();
        let obs = Observations::new(
            PointSet::from_2d(&[[0.0, 0.0], [1.0, 1.0]]).unwrap(),
            vec![0.2, 0.4],
        )
        .unwrap();
        let prediction =
            phik_predict(&ensemble, &obs, ensemble.locations(), AlphaPolicy::Auto).unwrap();
        let report = preservation_bound(&moments, &obs, &op, &prediction).unwrap();
        // eps is the largest |A Y^m - g| over realizations
        let expect = a_cols
            .iter()
            .map(|v| (v - g[0]).abs())
            .fold(0.0f64, f64::max);
        assert!((report.epsilon[0] - expect).abs() < 1e-12);
        assert!(report.satisfied);
    }

    #[test]
    fn multilevel_bound_dominates_and_checks_preconditions() {
        let grid = Grid2D::unit(4, 4).unwrap();
        let coarse = Grid2D::unit(2, 2).unwrap();
        let n = grid.n_nodes();
        let m1 = 30;
        let m2 = 8;
        let mut rng = SplitMix64::new(91);

        // level 1: random affine fields; constraint row sums them exactly
        let mut r1 = DMatrix::zeros(n, m1);
        for mm in 0..m1 {
            let (a, b) = (rng.next_standard_normal(), rng.next_standard_normal());
            for k in 0..n {
                let [x, y] = grid.point_at(k);
                r1[(k, mm)] = a + b * (x - y);
            }
        }
        // level 2: small corrections with known constraint residuals
        let mut r2 = DMatrix::zeros(n, m2);
        for mm in 0..m2 {
            let c = 0.01 * rng.next_standard_normal();
            for k in 0..n {
                let [x, y] = grid.point_at(k);
                r2[(k, mm)] = c * x * y;
            }
        }
        let e1 = Ensemble::new(Locations::Grid(grid.clone()), r1.clone()).unwrap();
        let e2 = Ensemble::new(Locations::Grid(grid.clone()), r2.clone()).unwrap();
        let levels = [
            LevelEnsemble::new(1, coarse, e1, None).unwrap(),
            LevelEnsemble::new(2, grid.clone(), e2, None).unwrap(),
        ];
        let moments = MlmcMoments::new(&levels).unwrap();

        let matrix = DMatrix::from_row_slice(1, n, &vec![1.0 / n as f64; n]);
        let g1 = matrix.clone() * &r1;
        let op = DiscreteLinearOperator::new(
            matrix.clone(),
            ConstraintTarget::PerRealization(g1),
            NormKind::LInf,
            1.0,
        )
        .unwrap();

        let obs = Observations::new(
            PointSet::from_2d(&[[0.0, 0.0], [2.0 / 3.0, 1.0 / 3.0], [1.0, 1.0]]).unwrap(),
            vec![0.6, -0.2, 0.1],
        )
        .unwrap();
        let prediction =
            mlmc_phik_predict(&levels, &obs, &Locations::Grid(grid.clone()), AlphaPolicy::Auto)
                .unwrap();

        // honest per-level tolerances measured from the generating recipe
        let eps2 = (matrix * &r2)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        let report =
            preservation_bound_multilevel(&moments, &obs, &op, &prediction, &[0.0, eps2])
                .unwrap();
        assert_eq!(report.levels, 2);
        assert_eq!(report.level_coefficients.len(), 2);
        assert!(report.satisfied, "measured {} vs bound {}", report.measured, report.bound);
        if let Some(sb) = report.spectral_bound {
            assert!(sb >= report.bound - 1e-12 * report.bound.abs());
        }

        // understating the level-2 tolerance must trip the precondition check
        match preservation_bound_multilevel(&moments, &obs, &op, &prediction, &[0.0, eps2 / 4.0])
        {
            Err(PhikError::ConstraintPrecondition { .. }) => {}
            other => panic!("expected ConstraintPrecondition, got {other:?}"),
        }
    }

    #[test]
    fn bound_report_serializes() {
        let report = BoundReport {
            norm: NormKind::LInf,
            alpha: 0.0,
            levels: 1,
            epsilon: vec![0.5],
            sigma_g: 0.0,
            coeff_inf: 1.0,
            std_sum: 2.0,
            level_coefficients: vec![],
            bound: 3.0,
            spectral_bound: None,
            measured: 0.1,
            satisfied: true,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"norm\":\"linf\""));
        assert!(json.contains("\"satisfied\":true"));
    }
}
