//! Multilevel Monte-Carlo moment estimation.
//!
//! Level 1 holds plain samples of the coarsest model; each higher level `l`
//! holds coupled difference samples `Y_l - Y_{l-1}` (same random input within
//! a pair, independent streams across levels), pre-interpolated onto the
//! finest storage grid. By telescoping,
//!
//! ```text
//! mu_MLMC(x)    = sum_l  mean_l(x)
//! k_MLMC(x, x') = sum_l  cov_l(x, x')
//! ```
//!
//! where each `cov_l` is the unbiased sample covariance of level `l` about its
//! own mean. Most of the realizations can then be spent on cheap coarse levels
//! while only a few expensive fine-level differences are needed.

use nalgebra::{DMatrix, DVector};

use crate::domain::{Field, Grid2D, Locations, Observations};
use crate::ensemble::{mc_mean, Ensemble, EmpiricalMoments};
use crate::error::{PhikError, Result};
use crate::gp::{gp_predict, AlphaPolicy, GpModel, Prediction};

/// One level of a multilevel estimator: the level's native grid resolution
/// plus its (difference) samples stored on the shared finest grid.
#[derive(Clone, Debug)]
pub struct LevelEnsemble {
    level: u32,
    native_grid: Grid2D,
    samples: Ensemble,
    base_seed: Option<u64>,
}

impl LevelEnsemble {
    /// `level` counts from 1 (coarsest). `native_grid` is the resolution the
    /// level's model was solved at, used for cost accounting; `samples` holds
    /// the level values (level 1) or coupled differences (level >= 2) on the
    /// common storage locations.
    pub fn new(
        level: u32,
        native_grid: Grid2D,
        samples: Ensemble,
        base_seed: Option<u64>,
    ) -> Result<Self> {
        if level == 0 {
            return Err(PhikError::InvalidArgument(
                "levels are numbered from 1".into(),
            ));
        }
        if let Some(storage) = samples.locations().as_grid() {
            if !native_grid.same_bounds(storage) {
                return Err(PhikError::GridMismatch(format!(
                    "level {level}: native grid bounds {:?} differ from storage grid bounds {:?}",
                    native_grid.bounds(),
                    storage.bounds()
                )));
            }
        }
        Ok(Self { level, native_grid, samples, base_seed })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn native_grid(&self) -> &Grid2D {
        &self.native_grid
    }

    pub fn samples(&self) -> &Ensemble {
        &self.samples
    }

    pub fn n_realizations(&self) -> usize {
        self.samples.n_realizations()
    }

    pub fn base_seed(&self) -> Option<u64> {
        self.base_seed
    }
}

fn validate_levels(levels: &[LevelEnsemble]) -> Result<&Locations> {
    let first = levels.first().ok_or_else(|| {
        PhikError::InvalidArgument("multilevel estimator needs at least one level".into())
    })?;
    let locations = first.samples.locations();
    let mut seed: Option<u64> = None;
    let mut prev_level: Option<u32> = None;
    for le in levels {
        if le.samples.locations() != locations {
            return Err(PhikError::GridMismatch(format!(
                "level {} samples are not stored on the shared location set",
                le.level
            )));
        }
        if let Some(p) = prev_level {
            if le.level <= p {
                return Err(PhikError::InvalidArgument(format!(
                    "levels must be strictly increasing, got {} after {p}",
                    le.level
                )));
            }
        }
        prev_level = Some(le.level);
        if let Some(s) = le.base_seed {
            match seed {
                None => seed = Some(s),
                Some(existing) if existing != s => {
                    return Err(PhikError::InvalidArgument(format!(
                        "levels were generated from different base seeds \
                         ({existing} vs {s}); coupled levels must share one"
                    )));
                }
                _ => {}
            }
        }
    }
    Ok(locations)
}

/// Multilevel mean: the sum of per-level sample means.
pub fn mlmc_mean(levels: &[LevelEnsemble]) -> Result<DVector<f64>> {
    let locations = validate_levels(levels)?;
    let mut out = DVector::zeros(locations.len());
    for le in levels {
        out += mc_mean(&le.samples);
    }
    Ok(out)
}

/// Multilevel covariance block: the sum of per-level unbiased sample
/// covariances (each about its own level mean).
pub fn mlmc_cov(levels: &[LevelEnsemble], rows: &[usize], cols: &[usize]) -> Result<DMatrix<f64>> {
    validate_levels(levels)?;
    let mut out = DMatrix::zeros(rows.len(), cols.len());
    for le in levels {
        let moments = EmpiricalMoments::from_ensemble(&le.samples)?;
        out += moments.cov_block(rows, cols)?;
    }
    Ok(out)
}

/// Pointwise multilevel variance over all storage locations.
pub fn mlmc_variance(levels: &[LevelEnsemble]) -> Result<DVector<f64>> {
    let locations = validate_levels(levels)?;
    let n = locations.len();
    let mut out = DVector::zeros(n);
    for le in levels {
        let moments = EmpiricalMoments::from_ensemble(&le.samples)?;
        for i in 0..n {
            out[i] += moments.cov_between(i, i);
        }
    }
    Ok(out)
}

/// Precomputed multilevel moments: per-level empirical moments plus the
/// telescoped total mean, usable as a [`GpModel`] prior.
#[derive(Clone, Debug)]
pub struct MlmcMoments {
    locations: Locations,
    levels: Vec<u32>,
    realizations_per_level: Vec<usize>,
    level_moments: Vec<EmpiricalMoments>,
    mean_total: DVector<f64>,
}

impl MlmcMoments {
    pub fn new(levels: &[LevelEnsemble]) -> Result<Self> {
        let locations = validate_levels(levels)?.clone();
        let mut level_ids = Vec::with_capacity(levels.len());
        let mut counts = Vec::with_capacity(levels.len());
        let mut level_moments = Vec::with_capacity(levels.len());
        let mut mean_total = DVector::zeros(locations.len());
        for le in levels {
            let moments = EmpiricalMoments::from_ensemble(&le.samples)?;
            mean_total += moments.mean();
            level_ids.push(le.level);
            counts.push(le.n_realizations());
            level_moments.push(moments);
        }
        Ok(Self {
            locations,
            levels: level_ids,
            realizations_per_level: counts,
            level_moments,
            mean_total,
        })
    }

    pub fn locations(&self) -> &Locations {
        &self.locations
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_ids(&self) -> &[u32] {
        &self.levels
    }

    pub fn realizations_per_level(&self) -> &[usize] {
        &self.realizations_per_level
    }

    /// Per-level empirical moments, coarsest first.
    pub fn level_moments(&self) -> &[EmpiricalMoments] {
        &self.level_moments
    }

    pub fn mean_total(&self) -> &DVector<f64> {
        &self.mean_total
    }

    fn locate(&self, p: &[f64]) -> Result<usize> {
        self.locations.locate(p).ok_or_else(|| PhikError::LocationNotInSet {
            x: p.first().copied().unwrap_or(f64::NAN),
            y: p.get(1).copied().unwrap_or(f64::NAN),
        })
    }
}

impl GpModel for MlmcMoments {
    fn dim(&self) -> usize {
        self.locations.dim()
    }

    fn mean_at(&self, p: &[f64]) -> Result<f64> {
        Ok(self.mean_total[self.locate(p)?])
    }

    fn cov_at(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        let i = self.locate(p)?;
        let j = self.locate(q)?;
        Ok(self.level_moments.iter().map(|m| m.cov_between(i, j)).sum())
    }
}

/// GP prediction with multilevel mean and covariance as the prior.
pub fn mlmc_phik_predict(
    levels: &[LevelEnsemble],
    obs: &Observations,
    queries: &Locations,
    alpha: AlphaPolicy,
) -> Result<Prediction> {
    let moments = MlmcMoments::new(levels)?;
    gp_predict(&moments, obs, queries, alpha)
}

/// Bilinear interpolation of a coarse-grid field onto another grid over the
/// same domain. Values at coincident nodes are copied bitwise.
pub fn interpolate_coarse_to_fine(coarse: &Field, fine_grid: &Grid2D) -> Result<Field> {
    let cg = coarse.grid();
    if !cg.same_bounds(fine_grid) {
        return Err(PhikError::GridMismatch(format!(
            "interpolation requires identical domain bounds, got {:?} vs {:?}",
            cg.bounds(),
            fine_grid.bounds()
        )));
    }
    // index-space position of a fine node inside the coarse grid
    let frac = |idx: usize, n_coarse: usize, n_fine: usize| -> (usize, f64) {
        let u = (idx * (n_coarse - 1)) as f64 / (n_fine - 1) as f64;
        let i0 = (u.floor() as usize).min(n_coarse - 2);
        (i0, u - i0 as f64)
    };
    let mut values = Vec::with_capacity(fine_grid.n_nodes());
    for k in 0..fine_grid.n_nodes() {
        let (fi, fj) = fine_grid.from_flat(k);
        let (i0, t) = frac(fi, cg.nx(), fine_grid.nx());
        let (j0, s) = frac(fj, cg.ny(), fine_grid.ny());
        if t == 0.0 && s == 0.0 {
            values.push(coarse.value(i0, j0));
        } else {
            let v00 = coarse.value(i0, j0);
            let v10 = coarse.value(i0 + 1, j0);
            let v01 = coarse.value(i0, j0 + 1);
            let v11 = coarse.value(i0 + 1, j0 + 1);
            values.push(
                (1.0 - t) * (1.0 - s) * v00
                    + t * (1.0 - s) * v10
                    + (1.0 - t) * s * v01
                    + t * s * v11,
            );
        }
    }
    Field::new(fine_grid.clone(), values)
}

/// Total sampling cost of a multilevel estimator in units of one finest-level
/// sample.
///
/// A level solved on an `nx x ny` grid is assigned unit cost
/// `(nx-1)(ny-1) * max(nx-1, ny-1)` (cells times a sweep count that grows
/// with resolution). Level 1 samples cost one coarse solve each; a coupled
/// difference sample at level `l >= 2` costs a solve at level `l` plus one at
/// level `l-1`.
pub fn fine_sample_equivalents(levels: &[LevelEnsemble]) -> Result<f64> {
    validate_levels(levels)?;
    let unit = |g: &Grid2D| -> f64 {
        let cx = (g.nx() - 1) as f64;
        let cy = (g.ny() - 1) as f64;
        cx * cy * cx.max(cy)
    };
    let finest = unit(levels.last().expect("validated nonempty").native_grid());
    let mut total = 0.0;
    for (idx, le) in levels.iter().enumerate() {
        let own = unit(le.native_grid()) / finest;
        let partner = if idx == 0 {
            0.0
        } else {
            unit(levels[idx - 1].native_grid()) / finest
        };
        total += le.n_realizations() as f64 * (own + partner);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PointSet;
    use crate::ensemble::{ensemble_std, phik_predict};
    use crate::rng::SplitMix64;

    fn grid_ensemble(grid: &Grid2D, m: usize, seed: u64) -> Ensemble {
        let mut rng = SplitMix64::new(seed);
        let r = DMatrix::from_fn(grid.n_nodes(), m, |_, _| rng.next_standard_normal());
        Ensemble::new(Locations::Grid(grid.clone()), r).unwrap()
    }

    #[test]
    fn spike_interpolation_matches_hand_stencil() {
        // unit spike at the center of a 3x3 grid, interpolated to 5x5:
        // weights 1 at the center, 1/2 at edge-adjacent fine nodes, 1/4 at
        // diagonal fine nodes, 0 elsewhere
        let coarse_grid = Grid2D::unit(3, 3).unwrap();
        let mut v = vec![0.0; 9];
        v[coarse_grid.flat_index(1, 1)] = 1.0;
        let coarse = Field::new(coarse_grid, v).unwrap();
        let fine = interpolate_coarse_to_fine(&coarse, &Grid2D::unit(5, 5).unwrap()).unwrap();
        let expect = |i: usize, j: usize| -> f64 {
            let wx = [0.0, 0.5, 1.0, 0.5, 0.0][i];
            let wy = [0.0, 0.5, 1.0, 0.5, 0.0][j];
            wx * wy
        };
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(fine.value(i, j), expect(i, j), "node ({i}, {j})");
            }
        }
    }

    #[test]
    fn interpolation_is_bitwise_exact_at_coincident_nodes() {
        let coarse_grid = Grid2D::new(11, 11, -1.0, 2.0, 0.0, 1.5).unwrap();
        let mut rng = SplitMix64::new(42);
        let coarse = Field::new(
            coarse_grid.clone(),
            (0..121).map(|_| rng.next_standard_normal()).collect(),
        )
        .unwrap();
        let fine_grid = Grid2D::new(41, 41, -1.0, 2.0, 0.0, 1.5).unwrap();
        let fine = interpolate_coarse_to_fine(&coarse, &fine_grid).unwrap();
        for ci in 0..11 {
            for cj in 0..11 {
                let (fi, fj) = (4 * ci, 4 * cj);
                assert_eq!(
                    fine.value(fi, fj).to_bits(),
                    coarse.value(ci, cj).to_bits(),
                    "coarse node ({ci}, {cj})"
                );
            }
        }
    }

    #[test]
    fn interpolation_reproduces_bilinear_functions() {
        let coarse_grid = Grid2D::new(4, 6, 0.0, 2.0, -1.0, 1.0).unwrap();
        let coarse = Field::from_fn(coarse_grid, |x, y| 2.0 + 3.0 * x - 5.0 * y + 0.5 * x * y)
            .unwrap();
        let fine_grid = Grid2D::new(13, 21, 0.0, 2.0, -1.0, 1.0).unwrap();
        let fine = interpolate_coarse_to_fine(&coarse, &fine_grid).unwrap();
        for k in 0..fine_grid.n_nodes() {
            let [x, y] = fine_grid.point_at(k);
            let expect = 2.0 + 3.0 * x - 5.0 * y + 0.5 * x * y;
            assert!((fine.values()[k] - expect).abs() < 1e-12, "node {k}");
        }
    }

    #[test]
    fn interpolation_rejects_different_domains() {
        let coarse = Field::from_fn(Grid2D::unit(3, 3).unwrap(), |x, _| x).unwrap();
        let other = Grid2D::new(5, 5, 0.0, 2.0, 0.0, 1.0).unwrap();
        match interpolate_coarse_to_fine(&coarse, &other) {
            Err(PhikError::GridMismatch(_)) => {}
            other => panic!("expected GridMismatch, got {other:?}"),
        }
    }

    #[test]
    fn mean_and_cov_telescope_over_levels() {
        let grid = Grid2D::unit(3, 3).unwrap();
        let coarse = Grid2D::unit(2, 2).unwrap();
        let e1 = grid_ensemble(&grid, 20, 1);
        let e2 = grid_ensemble(&grid, 10, 2);
        let l1 = LevelEnsemble::new(1, coarse, e1.clone(), None).unwrap();
        let l2 = LevelEnsemble::new(2, grid.clone(), e2.clone(), None).unwrap();
        let levels = [l1, l2];

        let mu = mlmc_mean(&levels).unwrap();
        let expect = mc_mean(&e1) + mc_mean(&e2);
        assert!((mu - &expect).norm() < 1e-14);

        let idx: Vec<usize> = (0..9).collect();
        let c = mlmc_cov(&levels, &idx, &idx).unwrap();
        let expect = crate::ensemble::mc_cov(&e1, &idx, &idx).unwrap()
            + crate::ensemble::mc_cov(&e2, &idx, &idx).unwrap();
        assert!((c - &expect).norm() < 1e-14);

        let var = mlmc_variance(&levels).unwrap();
        for i in 0..9 {
            assert!((var[i] - expect[(i, i)]).abs() < 1e-14);
            assert!(var[i] >= 0.0);
        }
    }

    #[test]
    fn level_validation_catches_misuse() {
        let grid = Grid2D::unit(3, 3).unwrap();
        let coarse = Grid2D::unit(2, 2).unwrap();
        let e = grid_ensemble(&grid, 5, 3);

        // level ids must start at 1 and increase
        assert!(LevelEnsemble::new(0, coarse.clone(), e.clone(), None).is_err());
        let l2 = LevelEnsemble::new(2, grid.clone(), e.clone(), None).unwrap();
        let l1 = LevelEnsemble::new(1, coarse.clone(), e.clone(), None).unwrap();
        assert!(mlmc_mean(&[l2.clone(), l1.clone()]).is_err());

        // storage locations must match across levels
        let other = grid_ensemble(&Grid2D::unit(4, 4).unwrap(), 5, 4);
        let l2_other =
            LevelEnsemble::new(2, Grid2D::unit(4, 4).unwrap(), other, None).unwrap();
        assert!(mlmc_mean(&[l1.clone(), l2_other]).is_err());

        // base seeds, when recorded, must agree
        let a = LevelEnsemble::new(1, coarse.clone(), e.clone(), Some(7)).unwrap();
        let b = LevelEnsemble::new(2, grid.clone(), e.clone(), Some(8)).unwrap();
        assert!(mlmc_mean(&[a.clone(), b]).is_err());
        let b_ok = LevelEnsemble::new(2, grid.clone(), e.clone(), Some(7)).unwrap();
        assert!(mlmc_mean(&[a, b_ok]).is_ok());

        // native grid must describe the same domain as the storage grid
        let shifted = Grid2D::new(2, 2, 0.0, 2.0, 0.0, 1.0).unwrap();
        assert!(LevelEnsemble::new(1, shifted, e.clone(), None).is_err());

        // covariance needs at least 2 realizations per level
        let single = Ensemble::new(
            Locations::Grid(grid.clone()),
            DMatrix::zeros(9, 1).add_scalar(1.0),
        )
        .unwrap();
        let l1_single = LevelEnsemble::new(1, coarse, single, None).unwrap();
        assert!(mlmc_cov(&[l1_single], &[0], &[0]).is_err());
    }

    #[test]
    fn degenerate_second_level_reduces_to_single_level_prediction() {
        // a level of all-zero differences changes neither mean nor covariance
        let grid = Grid2D::unit(4, 4).unwrap();
        let e1 = grid_ensemble(&grid, 30, 9);
        let zeros = Ensemble::new(Locations::Grid(grid.clone()), DMatrix::zeros(16, 5)).unwrap();
        let l1 = LevelEnsemble::new(1, Grid2D::unit(2, 2).unwrap(), e1.clone(), None).unwrap();
        let l2 = LevelEnsemble::new(2, grid.clone(), zeros, None).unwrap();

        let obs = Observations::new(
            PointSet::from_2d(&[[0.0, 0.0], [1.0, 1.0 / 3.0], [2.0 / 3.0, 1.0]]).unwrap(),
            vec![0.3, -0.1, 0.8],
        )
        .unwrap();
        let queries = Locations::Grid(grid.clone());
        let multilevel =
            mlmc_phik_predict(&[l1, l2], &obs, &queries, AlphaPolicy::Auto).unwrap();
        let single = phik_predict(&e1, &obs, &queries, AlphaPolicy::Auto).unwrap();
        for (a, b) in multilevel.mean.iter().zip(&single.mean) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in multilevel.mse.iter().zip(&single.mse) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_model_sums_levels_pointwise() {
        let grid = Grid2D::unit(3, 3).unwrap();
        let e1 = grid_ensemble(&grid, 8, 21);
        let e2 = grid_ensemble(&grid, 6, 22);
        let l1 = LevelEnsemble::new(1, Grid2D::unit(2, 2).unwrap(), e1.clone(), None).unwrap();
        let l2 = LevelEnsemble::new(2, grid.clone(), e2.clone(), None).unwrap();
        let m = MlmcMoments::new(&[l1, l2]).unwrap();
        assert_eq!(m.n_levels(), 2);
        assert_eq!(m.realizations_per_level(), &[8, 6]);

        let p = grid.point(1, 2);
        let q = grid.point(0, 0);
        let mu1 = mc_mean(&e1);
        let mu2 = mc_mean(&e2);
        let k = grid.flat_index(1, 2);
        assert!((m.mean_at(&p).unwrap() - (mu1[k] + mu2[k])).abs() < 1e-14);

        let s1 = ensemble_std(&e1).unwrap();
        let s2 = ensemble_std(&e2).unwrap();
        let var = m.cov_at(&q, &q).unwrap();
        assert!((var - (s1[0] * s1[0] + s2[0] * s2[0])).abs() < 1e-12);
    }

    #[test]
    fn cost_accounting_in_fine_sample_units() {
        let fine = Grid2D::unit(41, 41).unwrap();
        let coarse = Grid2D::unit(11, 11).unwrap();
        let e_c = grid_ensemble(&fine, 500, 31); // stored on the fine grid
        let e_f = grid_ensemble(&fine, 10, 32);

        // plain MC on the fine grid: cost = M
        let single = [LevelEnsemble::new(1, fine.clone(), e_f.clone(), None).unwrap()];
        assert_eq!(fine_sample_equivalents(&single).unwrap(), 10.0);

        // two-level: a 10x10-cell coarse solve costs 1/64 of a 40x40-cell one
        // (cells 100 vs 1600, sweeps 10 vs 40); difference samples pay both
        let levels = [
            LevelEnsemble::new(1, coarse, e_c, None).unwrap(),
            LevelEnsemble::new(2, fine, e_f, None).unwrap(),
        ];
        let cost = fine_sample_equivalents(&levels).unwrap();
        let expect = 500.0 / 64.0 + 10.0 * (1.0 + 1.0 / 64.0);
        assert!((cost - expect).abs() < 1e-12);
    }
}
