//! Greedy variance-targeted observation placement.
//!
//! At each round the surrogate is conditioned on the current observations,
//! the candidate with the largest posterior MSE is observed next (ties broken
//! by the smallest candidate index), and the loop repeats until the
//! observation budget is reached. Two audit tools accompany the loop: an
//! eigenvalue lower bound on the total posterior MSE achievable by *any*
//! placement of `N` observations, and an identity check between the two
//! standard ways of computing posterior variance from a discrete prior
//! covariance.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::domain::{Locations, Observations};
use crate::ensemble::EmpiricalMoments;
use crate::error::{PhikError, Result};
use crate::gp::{gp_predict, AlphaPolicy, CovarianceMatrix, Prediction};
use crate::kriging::{default_lengthscale_bounds, fit_kriging, kriging_predict};
use crate::mlmc::MlmcMoments;

/// A model that can be (re)conditioned on observations and queried for
/// posterior mean and MSE.
pub trait Surrogate {
    /// Short label for reports ("kriging", "phik", ...).
    fn name(&self) -> &'static str;

    fn predict(&self, obs: &Observations, queries: &Locations) -> Result<Prediction>;
}

/// Ordinary Kriging refitted from scratch on every call (hyperparameters
/// follow the growing data set).
#[derive(Clone, Debug, Default)]
pub struct KrigingSurrogate {
    /// Per-dimension length-scale search bounds; data-driven default if `None`.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl Surrogate for KrigingSurrogate {
    fn name(&self) -> &'static str {
        "kriging"
    }

    fn predict(&self, obs: &Observations, queries: &Locations) -> Result<Prediction> {
        let bounds = match &self.bounds {
            Some(b) => b.clone(),
            None => default_lengthscale_bounds(obs.locations()),
        };
        let fit = fit_kriging(obs.locations(), obs.values(), &bounds)?;
        kriging_predict(&fit, obs.locations(), obs.values(), queries)
    }
}

/// Ensemble-moment GP with moments fixed once (new observations only change
/// the conditioning, not the prior).
#[derive(Clone, Debug)]
pub struct PhikSurrogate {
    pub moments: EmpiricalMoments,
    pub alpha: AlphaPolicy,
}

impl Surrogate for PhikSurrogate {
    fn name(&self) -> &'static str {
        "phik"
    }

    fn predict(&self, obs: &Observations, queries: &Locations) -> Result<Prediction> {
        gp_predict(&self.moments, obs, queries, self.alpha)
    }
}

/// Multilevel-moment GP with fixed moments.
#[derive(Clone, Debug)]
pub struct MlmcPhikSurrogate {
    pub moments: MlmcMoments,
    pub alpha: AlphaPolicy,
}

impl Surrogate for MlmcPhikSurrogate {
    fn name(&self) -> &'static str {
        "mlmc-phik"
    }

    fn predict(&self, obs: &Observations, queries: &Locations) -> Result<Prediction> {
        gp_predict(&self.moments, obs, queries, self.alpha)
    }
}

/// Index of the available candidate with the largest posterior MSE; ties go
/// to the smallest index. `None` when nothing is available.
pub fn select_next(mse: &[f64], available: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (q, (&s2, &open)) in mse.iter().zip(available).enumerate() {
        if !open {
            continue;
        }
        match best {
            // strictly-greater keeps the earliest index on ties
            Some((_, cur)) if s2 <= cur => {}
            _ => best = Some((q, s2)),
        }
    }
    best.map(|(q, _)| q)
}

/// One row of the acquisition history, recorded before the chosen point is
/// observed (the terminal row has `chosen = None`).
#[derive(Clone, Debug, Serialize)]
pub struct AcquisitionStep {
    /// Observations conditioned on at this step.
    pub n_obs: usize,
    /// Candidate index observed next, if any.
    pub chosen: Option<usize>,
    pub chosen_point: Option<Vec<f64>>,
    /// Largest posterior MSE (over still-available candidates while
    /// selecting; over all candidates in the terminal row).
    pub s2_max: f64,
    /// Total posterior MSE over all candidates.
    pub s2_sum: f64,
    /// Relative l2 error of the posterior mean against the reference field,
    /// when one was supplied.
    pub rel_error: Option<f64>,
}

/// Observations, candidate pool, and acquisition history of one run.
#[derive(Clone, Debug)]
pub struct AcquisitionState {
    pub observations: Observations,
    pub candidates: Locations,
    /// Which candidates may still be chosen (initial observations that
    /// coincide with candidates start out unavailable).
    pub available: Vec<bool>,
    pub history: Vec<AcquisitionStep>,
    pub final_prediction: Option<Prediction>,
}

impl AcquisitionState {
    pub fn new(observations: Observations, candidates: Locations) -> Result<Self> {
        if candidates.is_empty() {
            return Err(PhikError::InvalidArgument(
                "active learning needs a nonempty candidate set".into(),
            ));
        }
        let mut available = vec![true; candidates.len()];
        for p in observations.locations().iter() {
            if let Some(q) = candidates.locate(p) {
                available[q] = false;
            }
        }
        Ok(Self {
            observations,
            candidates,
            available,
            history: Vec::new(),
            final_prediction: None,
        })
    }
}

/// Runs greedy acquisition until `n_max` total observations are reached (or
/// no candidate is left), appending one history row per round plus a terminal
/// row for the final model.
///
/// `oracle` supplies the observed value at a chosen candidate's coordinates;
/// `truth`, when given, must hold reference values at all candidates and
/// enables the per-round `rel_error` column.
pub fn run_active_learning(
    surrogate: &dyn Surrogate,
    oracle: &dyn Fn(&[f64]) -> f64,
    mut state: AcquisitionState,
    n_max: usize,
    truth: Option<&[f64]>,
) -> Result<AcquisitionState> {
    if let Some(t) = truth {
        if t.len() != state.candidates.len() {
            return Err(PhikError::DimensionMismatch {
                context: "active-learning reference field",
                expected: state.candidates.len(),
                got: t.len(),
            });
        }
    }
    let candidate_points = state.candidates.to_point_set();
    loop {
        let prediction = surrogate.predict(&state.observations, &state.candidates)?;
        let s2_sum: f64 = prediction.mse.iter().sum();
        let rel_error =
            truth.map(|t| crate::domain::relative_l2_error(&prediction.mean, t));

        let done = state.observations.len() >= n_max;
        let next = if done {
            None
        } else {
            select_next(&prediction.mse, &state.available)
        };
        match next {
            Some(q) => {
                let point = candidate_points.point(q).to_vec();
                state.history.push(AcquisitionStep {
                    n_obs: state.observations.len(),
                    chosen: Some(q),
                    chosen_point: Some(point.clone()),
                    s2_max: prediction.mse[q],
                    s2_sum,
                    rel_error,
                });
                let value = oracle(&point);
                state.observations = state.observations.with_observation(&point, value)?;
                state.available[q] = false;
            }
            None => {
                let s2_max = prediction.mse.iter().fold(0.0f64, |a, &b| a.max(b));
                state.history.push(AcquisitionStep {
                    n_obs: state.observations.len(),
                    chosen: None,
                    chosen_point: None,
                    s2_max,
                    s2_sum,
                    rel_error,
                });
                state.final_prediction = Some(prediction);
                return Ok(state);
            }
        }
    }
}

/// Eigenvalue lower bound on the total posterior MSE over a candidate set.
///
/// For a prior covariance `K` over `Q` candidates, conditioning on any `N` of
/// them reduces `trace(K)` by at most the sum of the `N` largest eigenvalues,
/// so the remaining total MSE satisfies
///
/// ```text
/// sum_q s2(q) >= lambda_1 + ... + lambda_{Q-N}   (ascending eigenvalues)
/// ```
///
/// regardless of which candidates are observed.
pub fn mse_sum_lower_bound(k: &DMatrix<f64>, n: usize) -> Result<f64> {
    let c = CovarianceMatrix::new(k.clone())?; // symmetry + finiteness checks
    let q = c.n();
    if n > q {
        return Err(PhikError::InvalidArgument(format!(
            "cannot observe {n} of {q} candidates"
        )));
    }
    let eig = nalgebra::SymmetricEigen::new(c.entries().clone());
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).expect("symmetric eigenvalues are finite"));
    if ev.first().is_some_and(|&l| l < -1e-10 * scale.max(1.0)) {
        return Err(PhikError::InvalidArgument(format!(
            "prior covariance is not positive semidefinite (lambda_min = {:e})",
            ev[0]
        )));
    }
    Ok(ev.iter().take(q - n).map(|l| l.max(0.0)).sum())
}

/// Posterior variances over all candidates computed two ways.
#[derive(Clone, Debug)]
pub struct ProjectionCheck {
    /// `K_jj - c_j^T C^-1 c_j` through the Cholesky factorization of the
    /// observed block `C`.
    pub via_factorization: Vec<f64>,
    /// The same quantity through the dense inverse `K^-1` and the projected
    /// system `(B^T K^-1 B) a = B^T K^-1 K e_j`.
    pub via_inverse: Vec<f64>,
    /// Largest absolute discrepancy between the two routes.
    pub max_abs_diff: f64,
    /// Largest prior variance, for relative comparisons.
    pub diag_scale: f64,
}

/// Checks the algebraic identity between the two standard posterior-variance
/// computations for a discrete prior covariance `K` and observed index set.
pub fn projection_identity_check(
    k: &DMatrix<f64>,
    observed: &[usize],
) -> Result<ProjectionCheck> {
    let c = CovarianceMatrix::new(k.clone())?;
    let q = c.n();
    let mut seen = vec![false; q];
    for &i in observed {
        if i >= q {
            return Err(PhikError::InvalidArgument(format!(
                "observed index {i} out of range for {q} candidates"
            )));
        }
        if seen[i] {
            return Err(PhikError::InvalidArgument(format!(
                "observed index {i} repeated"
            )));
        }
        seen[i] = true;
    }
    let n = observed.len();
    let diag_scale = (0..q).fold(0.0f64, |a, j| a.max(k[(j, j)].abs()));

    if n == 0 {
        let diag: Vec<f64> = (0..q).map(|j| k[(j, j)]).collect();
        return Ok(ProjectionCheck {
            via_factorization: diag.clone(),
            via_inverse: diag,
            max_abs_diff: 0.0,
            diag_scale,
        });
    }

    // route 1: Cholesky of the observed block
    let c_obs = DMatrix::from_fn(n, n, |a, b| k[(observed[a], observed[b])]);
    let chol = nalgebra::Cholesky::new(c_obs.clone()).ok_or(
        PhikError::SingularCovariance { alpha: 0.0 },
    )?;
    let mut via_factorization = Vec::with_capacity(q);
    for j in 0..q {
        let c_j = DVector::from_fn(n, |a, _| k[(observed[a], j)]);
        let w = chol.solve(&c_j);
        via_factorization.push(k[(j, j)] - c_j.dot(&w));
    }

    // route 2: the least-squares projection in the K-weighted inner product
    // <u, v> = u' K^-1 v, built literally from the observed columns K_N of K
    // with an explicit dense inverse. In exact arithmetic the normal-equation
    // matrix K_N' K^-1 K_N collapses to the observed block and the right-hand
    // side K_N' K^-1 K_j collapses to c_j, which is what route 1 uses; here
    // nothing is simplified, so agreement is a real consistency check.
    let k_inv = k
        .clone()
        .try_inverse()
        .ok_or(PhikError::SingularCovariance { alpha: 0.0 })?;
    let k_n = DMatrix::from_fn(q, n, |r, a| k[(r, observed[a])]);
    let gram = k_n.transpose() * &k_inv * &k_n;
    let lu = gram.lu();
    let kin_k = &k_inv * k;
    let rhs_all = k_n.transpose() * kin_k;
    let mut via_inverse = Vec::with_capacity(q);
    for j in 0..q {
        let rhs = DVector::from_column_slice(rhs_all.column(j).as_slice());
        let a = lu.solve(&rhs).ok_or(PhikError::SingularCovariance { alpha: 0.0 })?;
        let c_j = DVector::from_fn(n, |r, _| k[(observed[r], j)]);
        via_inverse.push(k[(j, j)] - c_j.dot(&a));
    }

    let max_abs_diff = via_factorization
        .iter()
        .zip(&via_inverse)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(ProjectionCheck { via_factorization, via_inverse, max_abs_diff, diag_scale })
}

/// Total posterior MSE over all candidates after observing the given subset
/// (via the factorization route); used to verify the eigenvalue bound.
pub fn posterior_mse_sum(k: &DMatrix<f64>, observed: &[usize]) -> Result<f64> {
    let check = projection_identity_check(k, observed)?;
    Ok(check.via_factorization.iter().map(|v| v.max(0.0)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Grid2D, PointSet};
    use crate::ensemble::Ensemble;
    use crate::rng::SplitMix64;

    #[test]
    fn select_next_prefers_largest_then_earliest() {
        let mse = [1.0, 3.0, 3.0, 2.0];
        assert_eq!(select_next(&mse, &[true; 4]), Some(1));
        assert_eq!(select_next(&mse, &[true, false, true, true]), Some(2));
        assert_eq!(select_next(&mse, &[true, false, false, true]), Some(3));
        assert_eq!(select_next(&mse, &[false; 4]), None);
        assert_eq!(select_next(&[], &[]), None);
    }

    fn smooth_ensemble(grid: &Grid2D, m: usize, seed: u64) -> Ensemble {
        let mut rng = SplitMix64::new(seed);
        let n = grid.n_nodes();
        let mut r = DMatrix::zeros(n, m);
        for mm in 0..m {
            let (a, b, c, d) = (
                rng.next_standard_normal(),
                rng.next_standard_normal(),
                rng.next_standard_normal(),
                rng.next_standard_normal(),
            );
            for kk in 0..n {
                let [x, y] = grid.point_at(kk);
                let pi = std::f64::consts::PI;
                r[(kk, mm)] = a + b * (pi * x).sin() + c * (pi * y).cos() + d * x * y;
            }
        }
        Ensemble::new(Locations::Grid(grid.clone()), r).unwrap()
    }

    #[test]
    fn greedy_loop_grows_observations_and_reduces_uncertainty() {
        let grid = Grid2D::unit(6, 6).unwrap();
        let ensemble = smooth_ensemble(&grid, 50, 1);
        let moments = EmpiricalMoments::from_ensemble(&ensemble).unwrap();
        let surrogate = PhikSurrogate { moments, alpha: AlphaPolicy::Auto };

        // truth: one held-out smooth field
        let truth_field = smooth_ensemble(&grid, 1, 99).realization(0);
        let truth: Vec<f64> = truth_field.iter().copied().collect();
        let oracle = |p: &[f64]| {
            let k = grid.locate(p[0], p[1]).unwrap();
            truth[k]
        };

        let init = Observations::new(
            PointSet::from_2d(&[[0.0, 0.0], [1.0, 1.0]]).unwrap(),
            vec![oracle(&[0.0, 0.0]), oracle(&[1.0, 1.0])],
        )
        .unwrap();
        let state = AcquisitionState::new(init, Locations::Grid(grid.clone())).unwrap();
        let state =
            run_active_learning(&surrogate, &oracle, state, 8, Some(&truth)).unwrap();

        assert_eq!(state.observations.len(), 8);
        assert_eq!(state.history.len(), 7); // 6 selection rows + terminal row
        assert!(state.history.last().unwrap().chosen.is_none());
        let first = state.history.first().unwrap();
        let last = state.history.last().unwrap();
        assert!(last.s2_sum < first.s2_sum, "{} vs {}", last.s2_sum, first.s2_sum);
        assert!(
            last.rel_error.unwrap() <= first.rel_error.unwrap() + 1e-12,
            "{:?} vs {:?}",
            last.rel_error,
            first.rel_error
        );
        // chosen candidates are unique and were available
        let chosen: Vec<usize> = state.history.iter().filter_map(|s| s.chosen).collect();
        let mut dedup = chosen.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), chosen.len());
        assert!(state.final_prediction.is_some());
    }

    #[test]
    fn initial_observations_are_masked_out() {
        let grid = Grid2D::unit(3, 3).unwrap();
        let init = Observations::new(
            PointSet::from_2d(&[[0.0, 0.0], [0.5, 0.5]]).unwrap(),
            vec![1.0, 2.0],
        )
        .unwrap();
        let state = AcquisitionState::new(init, Locations::Grid(grid.clone())).unwrap();
        assert!(!state.available[0]); // node (0, 0)
        assert!(!state.available[4]); // node (1, 1) = (0.5, 0.5)
        assert_eq!(state.available.iter().filter(|a| **a).count(), 7);
    }

    #[test]
    fn run_is_deterministic() {
        let grid = Grid2D::unit(5, 5).unwrap();
        let ensemble = smooth_ensemble(&grid, 30, 7);
        let moments = EmpiricalMoments::from_ensemble(&ensemble).unwrap();
        let surrogate = PhikSurrogate { moments, alpha: AlphaPolicy::Auto };
        let oracle = |p: &[f64]| p[0] - p[1] * p[1];
        let init = Observations::new(
            PointSet::from_2d(&[[0.25, 0.25]]).unwrap(),
            vec![oracle(&[0.25, 0.25])],
        )
        .unwrap();
        let mk = || {
            let state =
                AcquisitionState::new(init.clone(), Locations::Grid(grid.clone())).unwrap();
            run_active_learning(&surrogate, &oracle, state, 6, None).unwrap()
        };
        let a = mk();
        let b = mk();
        let ca: Vec<Option<usize>> = a.history.iter().map(|s| s.chosen).collect();
        let cb: Vec<Option<usize>> = b.history.iter().map(|s| s.chosen).collect();
        assert_eq!(ca, cb);
        assert_eq!(
            a.final_prediction.unwrap().mean,
            b.final_prediction.unwrap().mean
        );
    }

    #[test]
    fn eigenvalue_bound_on_diagonal_prior_is_tight() {
        // diagonal prior: observing a candidate zeroes exactly its own
        // variance, so observing the top-N leaves the Q-N smallest
        let k = DMatrix::from_diagonal(&DVector::from_column_slice(&[
            5.0, 4.0, 3.0, 2.0, 1.0,
        ]));
        let bound = mse_sum_lower_bound(&k, 2).unwrap();
        assert!((bound - 6.0).abs() < 1e-12);
        // observing indices 0 and 1 (variances 5 and 4) attains it exactly
        let total = posterior_mse_sum(&k, &[0, 1]).unwrap();
        assert!((total - bound).abs() < 1e-10);
        // any other choice does worse
        let worse = posterior_mse_sum(&k, &[3, 4]).unwrap();
        assert!(worse > bound + 1.0);
    }

    #[test]
    fn eigenvalue_bound_holds_for_random_priors_and_subsets() {
        let mut rng = SplitMix64::new(2024);
        for trial in 0..10 {
            let q = 8;
            let b = DMatrix::from_fn(q, q, |_, _| rng.next_standard_normal());
            let k = &b * b.transpose() + DMatrix::identity(q, q) * 0.5;
            for n in [0usize, 1, 3, 5] {
                // stride 3 is coprime to q = 8, so the indices are distinct
                let observed: Vec<usize> = (0..n).map(|i| (i * 3 + trial) % q).collect();
                let bound = mse_sum_lower_bound(&k, n).unwrap();
                let actual = posterior_mse_sum(&k, &observed).unwrap();
                assert!(
                    actual >= bound - 1e-9,
                    "trial {trial}, n={n}: {actual} < {bound}"
                );
            }
        }
    }

    #[test]
    fn bound_rejects_indefinite_prior() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(mse_sum_lower_bound(&k, 1).is_err());
    }

    #[test]
    fn projection_routes_agree_on_random_priors() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..5 {
            let q = 10;
            let b = DMatrix::from_fn(q, q, |_, _| rng.next_standard_normal());
            let k = &b * b.transpose() + DMatrix::identity(q, q) * 1.0;
            let check = projection_identity_check(&k, &[0, 3, 7]).unwrap();
            assert!(
                check.max_abs_diff < 1e-9 * check.diag_scale.max(1.0),
                "diff {}",
                check.max_abs_diff
            );
            // observed candidates have (numerically) zero posterior variance
            for &i in &[0usize, 3, 7] {
                assert!(check.via_factorization[i].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn projection_check_with_no_observations_returns_prior_diagonal() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let check = projection_identity_check(&k, &[]).unwrap();
        assert_eq!(check.via_factorization, vec![2.0, 1.0]);
        assert_eq!(check.max_abs_diff, 0.0);
    }

    #[test]
    fn projection_check_validates_indices() {
        let k = DMatrix::<f64>::identity(3, 3);
        assert!(projection_identity_check(&k, &[3]).is_err());
        assert!(projection_identity_check(&k, &[1, 1]).is_err());
    }
}
