//! Benchmark field models and deterministic data generators: the modified
//! Branin function, its stochastic variant with random `b` and `q`
//! coefficients, single- and two-level ensemble generators, a
//! boundary-conforming random field model, and quasi-random observation
//! placement.

use nalgebra::DMatrix;

use crate::domain::{Field, Grid2D, Locations};
use crate::ensemble::Ensemble;
use crate::error::{PhikError, Result};
use crate::mlmc::{interpolate_coarse_to_fine, LevelEnsemble};
use crate::rng::{halton_2d, stream_seed, RngSpec, SplitMix64, ENSEMBLE_STREAM, OBSERVATION_STREAM, TRUTH_STREAM};

/// Coefficients of the modified Branin function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BraninParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r: f64,
    pub g: f64,
    pub p: f64,
    pub q: f64,
}

impl Default for BraninParams {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            a: 1.0,
            b: 5.1 / (4.0 * PI * PI),
            c: 5.0 / PI,
            r: 6.0,
            g: 10.0,
            p: 1.0 / (8.0 * PI),
            q: 5.0,
        }
    }
}

/// The modified Branin function on the unit square:
///
/// ```text
/// f(x, y) = a (y~ - b x~^2 + c x~ - r)^2 + g (1 - p) cos(x~) + g + q x
/// x~ = 15x - 5,  y~ = 15y
/// ```
pub fn branin(x: f64, y: f64, params: &BraninParams) -> f64 {
    let xt = 15.0 * x - 5.0;
    let yt = 15.0 * y;
    let inner = yt - params.b * (xt * xt) + params.c * xt - params.r;
    params.a * (inner * inner)
        + params.g * (1.0 - params.p) * xt.cos()
        + params.g
        + params.q * x
}

/// The modified Branin function sampled on every grid node.
pub fn branin_truth_field(grid: &Grid2D) -> Result<Field> {
    let params = BraninParams::default();
    Field::from_fn(grid.clone(), |x, y| branin(x, y, &params))
}

/// Additive constant replacing `g` outside the cosine term in the stochastic
/// variant.
pub const STOCHASTIC_BRANIN_G: f64 = 20.0;

/// One draw of the 12 standard normal coefficients driving the stochastic
/// Branin variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StochasticBraninSample {
    pub xi: [f64; 12],
}

impl StochasticBraninSample {
    /// Draws the coefficients in a fixed order (`xi[0]` first).
    pub fn draw(rng: &mut SplitMix64) -> Self {
        let mut xi = [0.0; 12];
        for v in xi.iter_mut() {
            *v = rng.next_standard_normal();
        }
        Self { xi }
    }

    pub fn zeros() -> Self {
        Self { xi: [0.0; 12] }
    }
}

/// Stochastic modified Branin realization: the `b` and `q` coefficients become
/// trigonometric random fields driven by 12 standard normals, and the
/// standalone additive constant becomes 20:
///
/// ```text
/// f^(x, y) = a (y~ - b^(x,y) x~^2 + c x~ - r)^2 + g (1 - p) cos(x~) + 20 + q^(x,y) x
/// b^(x,y)  = b { 0.9 + (0.2/pi) sum_{i=1..3} [ sin((2i-.5) pi x) xi_{2i-1} / (4i-1)
///                                            + sin((2i+.5) pi y) xi_{2i}   / (4i+1) ] }
/// q^(x,y)  = q { 1.0 + (0.6/pi) sum_{i=1..3} [ cos((2i-1.5) pi x) xi_{2i+5} / (4i-3)
///                                            + cos((2i-.5) pi y)  xi_{2i+6} / (4i-1) ] }
/// ```
///
/// (indices are 1-based: `xi_1` is `sample.xi[0]`).
pub fn stochastic_branin(
    x: f64,
    y: f64,
    sample: &StochasticBraninSample,
    params: &BraninParams,
) -> f64 {
    use std::f64::consts::PI;
    let xi = &sample.xi;

    let mut b_sum = 0.0;
    let mut q_sum = 0.0;
    for i in 1..=3u32 {
        let fi = i as f64;
        b_sum += ((2.0 * fi - 0.5) * PI * x).sin() * xi[(2 * i - 2) as usize]
            / (4.0 * fi - 1.0)
            + ((2.0 * fi + 0.5) * PI * y).sin() * xi[(2 * i - 1) as usize] / (4.0 * fi + 1.0);
        q_sum += ((2.0 * fi - 1.5) * PI * x).cos() * xi[(2 * i + 4) as usize]
            / (4.0 * fi - 3.0)
            + ((2.0 * fi - 0.5) * PI * y).cos() * xi[(2 * i + 5) as usize] / (4.0 * fi - 1.0);
    }
    let b_hat = params.b * (0.9 + 0.2 / PI * b_sum);
    let q_hat = params.q * (1.0 + 0.6 / PI * q_sum);

    let xt = 15.0 * x - 5.0;
    let yt = 15.0 * y;
    let inner = yt - b_hat * (xt * xt) + params.c * xt - params.r;
    params.a * (inner * inner)
        + params.g * (1.0 - params.p) * xt.cos()
        + STOCHASTIC_BRANIN_G
        + q_hat * x
}

/// Generates `m` stochastic-Branin realizations on the grid, one independent
/// coefficient draw per realization (ensemble stream, realization index `mm`).
pub fn generate_ensemble(grid: &Grid2D, m: usize, spec: &RngSpec) -> Result<Ensemble> {
    if m == 0 {
        return Err(PhikError::InvalidArgument(
            "ensemble size must be at least 1".into(),
        ));
    }
    let params = BraninParams::default();
    let n = grid.n_nodes();
    let mut r = DMatrix::zeros(n, m);
    for mm in 0..m {
        let mut rng = spec.stream(ENSEMBLE_STREAM, mm as u64);
        let sample = StochasticBraninSample::draw(&mut rng);
        for k in 0..n {
            let [x, y] = grid.point_at(k);
            r[(k, mm)] = stochastic_branin(x, y, &sample, &params);
        }
    }
    Ensemble::new(Locations::Grid(grid.clone()), r)
}

/// One stochastic-Branin realization from the reserved truth stream (never
/// used by ensemble generation), for experiments that reconstruct a random
/// field drawn from the same family.
pub fn held_out_realization(grid: &Grid2D, spec: &RngSpec) -> Result<Field> {
    let params = BraninParams::default();
    let mut rng = spec.stream(TRUTH_STREAM, 0);
    let sample = StochasticBraninSample::draw(&mut rng);
    Field::from_fn(grid.clone(), |x, y| {
        stochastic_branin(x, y, &sample, &params)
    })
}

/// Generates a coupled two-level ensemble of the stochastic Branin model.
///
/// Level 1 evaluates on the coarse grid (stream 1) and lifts bilinearly to the
/// fine grid. Level 2 evaluates each coefficient draw on both grids with the
/// *same* draw (stream 2) and stores `fine - lift(coarse)`. Streams are
/// independent across levels, so the two level ensembles are independent while
/// each difference pair is tightly coupled.
pub fn generate_two_level(
    coarse: &Grid2D,
    fine: &Grid2D,
    m_coarse: usize,
    m_fine: usize,
    spec: &RngSpec,
) -> Result<Vec<LevelEnsemble>> {
    if !coarse.same_bounds(fine) {
        return Err(PhikError::GridMismatch(
            "coarse and fine grids must cover the same domain".into(),
        ));
    }
    if coarse.nx() > fine.nx() || coarse.ny() > fine.ny() {
        return Err(PhikError::InvalidArgument(
            "fine grid must be at least as fine as the coarse grid".into(),
        ));
    }
    if m_coarse == 0 || m_fine == 0 {
        return Err(PhikError::InvalidArgument(
            "both levels need at least 1 realization".into(),
        ));
    }
    let params = BraninParams::default();
    let n = fine.n_nodes();

    let eval_coarse_lifted = |sample: &StochasticBraninSample| -> Result<Field> {
        let coarse_field = Field::from_fn(coarse.clone(), |x, y| {
            stochastic_branin(x, y, sample, &params)
        })?;
        interpolate_coarse_to_fine(&coarse_field, fine)
    };

    let mut r1 = DMatrix::zeros(n, m_coarse);
    for mm in 0..m_coarse {
        let mut rng = spec.stream(1, mm as u64);
        let sample = StochasticBraninSample::draw(&mut rng);
        let lifted = eval_coarse_lifted(&sample)?;
        for (k, v) in lifted.values().iter().enumerate() {
            r1[(k, mm)] = *v;
        }
    }

    let mut r2 = DMatrix::zeros(n, m_fine);
    for mm in 0..m_fine {
        let mut rng = spec.stream(2, mm as u64);
        let sample = StochasticBraninSample::draw(&mut rng);
        let lifted = eval_coarse_lifted(&sample)?;
        for k in 0..n {
            let [x, y] = fine.point_at(k);
            r2[(k, mm)] = stochastic_branin(x, y, &sample, &params) - lifted.values()[k];
        }
    }

    let locations = Locations::Grid(fine.clone());
    Ok(vec![
        LevelEnsemble::new(
            1,
            coarse.clone(),
            Ensemble::new(locations.clone(), r1)?,
            Some(spec.base_seed),
        )?,
        LevelEnsemble::new(
            2,
            fine.clone(),
            Ensemble::new(locations, r2)?,
            Some(spec.base_seed),
        )?,
    ])
}

/// Random fields that satisfy a Dirichlet boundary profile *exactly* in every
/// realization: `u^m = profile + envelope * fluctuation^m`, where the envelope
/// `sin(pi x^) sin(pi y^)` is hard-zeroed at boundary nodes and the
/// fluctuation is a 5x5 cosine series with independent standard normal
/// coefficients (ensemble stream, one draw block per realization).
pub fn constrained_field_model(
    grid: &Grid2D,
    m: usize,
    spec: &RngSpec,
    profile: &dyn Fn(f64, f64) -> f64,
) -> Result<Ensemble> {
    use std::f64::consts::PI;
    if m == 0 {
        return Err(PhikError::InvalidArgument(
            "ensemble size must be at least 1".into(),
        ));
    }
    let (xmin, xmax, ymin, ymax) = grid.bounds();
    let n = grid.n_nodes();
    let mut r = DMatrix::zeros(n, m);
    for mm in 0..m {
        let mut rng = spec.stream(ENSEMBLE_STREAM, mm as u64);
        let mut xi = [[0.0; 5]; 5];
        for row in xi.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.next_standard_normal();
            }
        }
        for k in 0..n {
            let (i, j) = grid.from_flat(k);
            let [x, y] = grid.point_at(k);
            let xh = (x - xmin) / (xmax - xmin);
            let yh = (y - ymin) / (ymax - ymin);
            let envelope = if grid.is_boundary(i, j) {
                0.0
            } else {
                (PI * xh).sin() * (PI * yh).sin()
            };
            let mut fluct = 0.0;
            for (p, row) in xi.iter().enumerate() {
                for (q, coef) in row.iter().enumerate() {
                    fluct += coef * (p as f64 * PI * xh).cos() * (q as f64 * PI * yh).cos()
                        / (1.0 + (p * p + q * q) as f64);
                }
            }
            r[(k, mm)] = profile(x, y) + envelope * fluct;
        }
    }
    Ensemble::new(Locations::Grid(grid.clone()), r)
}

/// Deterministic quasi-random observation placement: walks the 2-D Halton
/// sequence from a seed-derived start index, maps each point into the central
/// `[0.05, 0.95]^2` patch of the domain, snaps to the nearest grid node, and
/// keeps the first `count` distinct nodes.
pub fn halton_observation_indices(
    grid: &Grid2D,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if count == 0 || count > grid.n_nodes() {
        return Err(PhikError::InvalidArgument(format!(
            "cannot place {count} observations on a grid of {} nodes",
            grid.n_nodes()
        )));
    }
    let (xmin, xmax, ymin, ymax) = grid.bounds();
    let start = 1 + (stream_seed(seed, OBSERVATION_STREAM, 0) % 4096);
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    let mut index = start;
    while chosen.len() < count {
        let [u, v] = halton_2d(index);
        index += 1;
        let x = xmin + (0.05 + 0.9 * u) * (xmax - xmin);
        let y = ymin + (0.05 + 0.9 * v) * (ymax - ymin);
        let (node, _) = grid.nearest_node(x, y);
        if !chosen.contains(&node) {
            chosen.push(node);
        }
    }
    Ok(chosen)
}
