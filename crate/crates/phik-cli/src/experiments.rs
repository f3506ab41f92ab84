//! The four experiment commands: field reconstruction, active learning,
//! single-level vs multilevel comparison, and bound verification.
//!
//! Every command reads one validated [`ExperimentConfig`], writes CSV/JSON
//! artifacts into the configured output directory, and prints a one-line
//! pointer to them. All CSV content is produced from seeded streams with a
//! fixed float format, so identical config and seed give byte-identical
//! files; wall times live only in the JSON summaries.

use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use phik::active::{
    run_active_learning, AcquisitionState, KrigingSurrogate, MlmcPhikSurrogate, PhikSurrogate,
    Surrogate,
};
use phik::constraints::{
    boundary_node_indices, boundary_restriction_operator, exact_preservation_check,
    preservation_bound, preservation_bound_multilevel, BoundReport, BoundaryEdge,
    ConstraintTarget, DiscreteLinearOperator, ExactPreservation, NormKind,
};
use phik::domain::{relative_frobenius_error, relative_l2_error};
use phik::io::write_field;
use phik::kriging::default_lengthscale_bounds;
use phik::mlmc::fine_sample_equivalents;
use phik::models::{
    branin, branin_truth_field, constrained_field_model, generate_ensemble, generate_two_level,
    halton_observation_indices, held_out_realization, BraninParams,
};
use phik::rng::{stream_seed, SplitMix64};
use phik::{
    fit_kriging, gp_predict, kriging_predict, mlmc_phik_predict, phik_predict, EmpiricalMoments,
    Ensemble, Field, Grid2D, LevelEnsemble, Locations, MlmcMoments, Observations, PhikError,
    PointSet, Prediction,
};

use crate::config::{ExperimentConfig, GridSize, MethodName, ObservationSpec};
use crate::CliError;

const ALL_EDGES: [BoundaryEdge; 4] = [
    BoundaryEdge::Left,
    BoundaryEdge::Right,
    BoundaryEdge::Bottom,
    BoundaryEdge::Top,
];

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// One per-method line of a summary file. `m`/`m_levels`/`cost` are filled
/// only where they apply.
#[derive(Serialize)]
struct MethodSummary {
    method: MethodName,
    n_obs: usize,
    m: Option<usize>,
    m_levels: Option<Vec<usize>>,
    alpha: f64,
    rel_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost: Option<f64>,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct RunSummary {
    experiment: &'static str,
    grid: GridSize,
    base_seed: u64,
    n_obs: usize,
    results: Vec<MethodSummary>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(PhikError::from)?;
    text.push('\n');
    fs::write(path, text).map_err(PhikError::from)?;
    Ok(())
}

fn ensure_out_dir(config: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.out_dir).map_err(PhikError::from)?;
    Ok(())
}

/// Observations of a field at given grid nodes.
fn observations_at_nodes(
    grid: &Grid2D,
    values: &[f64],
    indices: &[usize],
) -> Result<Observations, PhikError> {
    let mut coords = Vec::with_capacity(indices.len() * 2);
    let mut obs_values = Vec::with_capacity(indices.len());
    for &k in indices {
        let [x, y] = grid.point_at(k);
        coords.extend_from_slice(&[x, y]);
        obs_values.push(values[k]);
    }
    Observations::new(PointSet::new(2, coords)?, obs_values)
}

/// Turns the configured placement into observations of the truth field.
/// Explicit points snap to the nearest grid node; two points snapping to the
/// same node is a configuration error.
fn resolve_observations(
    spec: &ObservationSpec,
    grid: &Grid2D,
    truth: &Field,
) -> Result<Observations, CliError> {
    let indices = match spec {
        ObservationSpec::Halton { count, seed } => {
            halton_observation_indices(grid, *count, *seed)?
        }
        ObservationSpec::Explicit { points } => {
            let mut idx = Vec::with_capacity(points.len());
            for p in points {
                let (node, snapped) = grid.nearest_node(p[0], p[1]);
                if idx.contains(&node) {
                    return Err(CliError::Config(format!(
                        "observation points snap to the same grid node ({}, {})",
                        snapped[0], snapped[1]
                    )));
                }
                idx.push(node);
            }
            idx
        }
    };
    Ok(observations_at_nodes(grid, truth.values(), &indices)?)
}

fn unit_grid(size: GridSize) -> Result<Grid2D, CliError> {
    Ok(Grid2D::unit(size.nx, size.ny)?)
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

fn predict_with(
    method: MethodName,
    config: &ExperimentConfig,
    grid: &Grid2D,
    obs: &Observations,
    queries: &Locations,
) -> Result<Prediction, CliError> {
    let alpha = config.alpha.policy();
    let pred = match method {
        MethodName::Kriging => {
            let bounds = default_lengthscale_bounds(obs.locations());
            let fit = fit_kriging(obs.locations(), obs.values(), &bounds)?;
            kriging_predict(&fit, obs.locations(), obs.values(), queries)?
        }
        MethodName::Phik => {
            let m = config.m.expect("validated");
            let ensemble = generate_ensemble(grid, m, &phik::RngSpec::new(config.base_seed))?;
            phik_predict(&ensemble, obs, queries, alpha)?
        }
        MethodName::MlmcPhik => {
            let coarse = unit_grid(config.coarse_grid.expect("validated"))?;
            let ml = config.m_levels.as_ref().expect("validated");
            let levels = generate_two_level(
                &coarse,
                grid,
                ml[0],
                ml[1],
                &phik::RngSpec::new(config.base_seed),
            )?;
            mlmc_phik_predict(&levels, obs, queries, alpha)?
        }
    };
    Ok(pred)
}

fn method_sample_counts(
    method: MethodName,
    config: &ExperimentConfig,
) -> (Option<usize>, Option<Vec<usize>>) {
    match method {
        MethodName::Kriging => (None, None),
        MethodName::Phik => (config.m, None),
        MethodName::MlmcPhik => (None, config.m_levels.clone()),
    }
}

pub fn cmd_reconstruct(config: &ExperimentConfig) -> Result<(), CliError> {
    let grid = unit_grid(config.grid)?;
    let truth = branin_truth_field(&grid)?;
    let obs = resolve_observations(
        config.observations.as_ref().expect("validated"),
        &grid,
        &truth,
    )?;
    let queries = Locations::Grid(grid.clone());
    ensure_out_dir(config)?;
    write_field(&config.out_dir.join("truth.csv"), &truth)?;

    let mut results = Vec::new();
    for &method in &config.methods {
        let t0 = Instant::now();
        let pred = predict_with(method, config, &grid, &obs, &queries)?;
        let recon = Field::new(grid.clone(), pred.mean.clone())?;
        let rel_error = relative_frobenius_error(&recon, &truth)?;

        let name = method.name();
        write_field(&config.out_dir.join(format!("recon_{name}.csv")), &recon)?;
        let error_values = pred
            .mean
            .iter()
            .zip(truth.values())
            .map(|(m, t)| m - t)
            .collect();
        let error_field = Field::new(grid.clone(), error_values)?;
        write_field(&config.out_dir.join(format!("error_{name}.csv")), &error_field)?;
        // rounding can leave the posterior MSE a hair below zero; report 0
        let sd_values = pred.mse.iter().map(|&v| v.max(0.0).sqrt()).collect();
        let sd_field = Field::new(grid.clone(), sd_values)?;
        write_field(&config.out_dir.join(format!("sd_{name}.csv")), &sd_field)?;

        let (m, m_levels) = method_sample_counts(method, config);
        results.push(MethodSummary {
            method,
            n_obs: obs.len(),
            m,
            m_levels,
            alpha: pred.alpha,
            rel_error,
            cost: None,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
    }

    let summary = RunSummary {
        experiment: "reconstruct",
        grid: config.grid,
        base_seed: config.base_seed,
        n_obs: obs.len(),
        results,
    };
    write_json(&config.out_dir.join("summary.json"), &summary)?;
    println!(
        "reconstruct: {} method(s), {} observations -> {}",
        summary.results.len(),
        obs.len(),
        config.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// active
// ---------------------------------------------------------------------------

fn build_surrogate(
    method: MethodName,
    config: &ExperimentConfig,
    grid: &Grid2D,
) -> Result<Box<dyn Surrogate>, CliError> {
    let alpha = config.alpha.policy();
    Ok(match method {
        MethodName::Kriging => Box::new(KrigingSurrogate::default()),
        MethodName::Phik => {
            let m = config.m.expect("validated");
            let ensemble = generate_ensemble(grid, m, &phik::RngSpec::new(config.base_seed))?;
            Box::new(PhikSurrogate {
                moments: EmpiricalMoments::from_ensemble(&ensemble)?,
                alpha,
            })
        }
        MethodName::MlmcPhik => {
            let coarse = unit_grid(config.coarse_grid.expect("validated"))?;
            let ml = config.m_levels.as_ref().expect("validated");
            let levels = generate_two_level(
                &coarse,
                grid,
                ml[0],
                ml[1],
                &phik::RngSpec::new(config.base_seed),
            )?;
            Box::new(MlmcPhikSurrogate {
                moments: MlmcMoments::new(&levels)?,
                alpha,
            })
        }
    })
}

pub fn cmd_active(config: &ExperimentConfig) -> Result<(), CliError> {
    let grid = unit_grid(config.grid)?;
    let truth = branin_truth_field(&grid)?;
    let obs0 = resolve_observations(
        config.observations.as_ref().expect("validated"),
        &grid,
        &truth,
    )?;
    let n_max = config.n_max.expect("validated");
    let candidates = Locations::Grid(grid.clone());
    let params = BraninParams::default();
    let oracle = |p: &[f64]| branin(p[0], p[1], &params);

    ensure_out_dir(config)?;
    let curve_path = config.out_dir.join("learning_curve.csv");
    let mut curve = BufWriter::new(File::create(&curve_path).map_err(PhikError::from)?);
    writeln!(curve, "n_obs,method,rel_error,s2_sum,chosen_x,chosen_y")
        .map_err(PhikError::from)?;

    let mut results = Vec::new();
    for &method in &config.methods {
        let t0 = Instant::now();
        let surrogate = build_surrogate(method, config, &grid)?;
        let state = AcquisitionState::new(obs0.clone(), candidates.clone())?;
        let run = run_active_learning(
            surrogate.as_ref(),
            &oracle,
            state,
            n_max,
            Some(truth.values()),
        )?;

        for step in &run.history {
            let rel = step.rel_error.expect("reference field was supplied");
            write!(
                curve,
                "{},{},{:.16e},{:.16e}",
                step.n_obs,
                method.name(),
                rel,
                step.s2_sum
            )
            .map_err(PhikError::from)?;
            match &step.chosen_point {
                Some(p) => writeln!(curve, ",{:.16e},{:.16e}", p[0], p[1]),
                None => writeln!(curve, ",,"),
            }
            .map_err(PhikError::from)?;
        }

        let terminal = run.history.last().expect("loop records at least one row");
        let final_prediction = run
            .final_prediction
            .as_ref()
            .expect("loop terminated with a model");
        let (m, m_levels) = method_sample_counts(method, config);
        results.push(MethodSummary {
            method,
            n_obs: run.observations.len(),
            m,
            m_levels,
            alpha: final_prediction.alpha,
            rel_error: terminal.rel_error.expect("reference field was supplied"),
            cost: None,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
    }
    curve.flush().map_err(PhikError::from)?;

    let summary = RunSummary {
        experiment: "active",
        grid: config.grid,
        base_seed: config.base_seed,
        n_obs: obs0.len(),
        results,
    };
    write_json(&config.out_dir.join("summary.json"), &summary)?;
    println!(
        "active: {} method(s), {} -> {} observations -> {}",
        summary.results.len(),
        obs0.len(),
        n_max,
        config.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// mlmc-compare
// ---------------------------------------------------------------------------

pub fn cmd_mlmc_compare(config: &ExperimentConfig) -> Result<(), CliError> {
    let fine = unit_grid(config.grid)?;
    let coarse = unit_grid(config.coarse_grid.expect("validated"))?;
    let spec = phik::RngSpec::new(config.base_seed);
    // reconstruct a held-out member of the model family (its stream is never
    // used by ensemble generation)
    let truth = held_out_realization(&fine, &spec)?;
    let obs = resolve_observations(
        config.observations.as_ref().expect("validated"),
        &fine,
        &truth,
    )?;
    let queries = Locations::Grid(fine.clone());
    let alpha = config.alpha.policy();
    let m_coarse = config.m_coarse.expect("validated");
    let m_fine_values = config.m_fine_values.as_ref().expect("validated");
    let methods: Vec<MethodName> = if config.methods.is_empty() {
        vec![MethodName::Phik, MethodName::MlmcPhik]
    } else {
        config.methods.clone()
    };

    ensure_out_dir(config)?;
    let csv_path = config.out_dir.join("mlmc_compare.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).map_err(PhikError::from)?);
    writeln!(csv, "m_fine,method,rel_error,cost").map_err(PhikError::from)?;

    let want_phik = methods.contains(&MethodName::Phik);
    let want_mlmc = methods.contains(&MethodName::MlmcPhik);
    let mut results = Vec::new();
    for &m_fine in m_fine_values {
        // single-level estimator: fine-grid samples only
        let single = if want_phik || (want_mlmc && m_coarse == 0) {
            let t0 = Instant::now();
            let ensemble = generate_ensemble(&fine, m_fine, &spec)?;
            let pred = phik_predict(&ensemble, &obs, &queries, alpha)?;
            let rel = relative_l2_error(&pred.mean, truth.values());
            Some((rel, m_fine as f64, pred.alpha, t0.elapsed().as_secs_f64()))
        } else {
            None
        };
        if want_phik {
            let (rel, cost, alpha_used, wall) = single.clone().expect("computed above");
            writeln!(csv, "{m_fine},phik,{rel:.16e},{cost:.16e}").map_err(PhikError::from)?;
            results.push(MethodSummary {
                method: MethodName::Phik,
                n_obs: obs.len(),
                m: Some(m_fine),
                m_levels: None,
                alpha: alpha_used,
                rel_error: rel,
                cost: Some(cost),
                wall_time_s: wall,
            });
        }
        if want_mlmc {
            // with zero coarse samples the multilevel estimator carries no
            // level-1 information and is, by definition, the single-level one
            let (rel, cost, alpha_used, wall) = if m_coarse == 0 {
                single.expect("computed above")
            } else {
                let t0 = Instant::now();
                let levels = generate_two_level(&coarse, &fine, m_coarse, m_fine, &spec)?;
                let pred = mlmc_phik_predict(&levels, &obs, &queries, alpha)?;
                let rel = relative_l2_error(&pred.mean, truth.values());
                let cost = fine_sample_equivalents(&levels)?;
                (rel, cost, pred.alpha, t0.elapsed().as_secs_f64())
            };
            writeln!(csv, "{m_fine},mlmc-phik,{rel:.16e},{cost:.16e}")
                .map_err(PhikError::from)?;
            results.push(MethodSummary {
                method: MethodName::MlmcPhik,
                n_obs: obs.len(),
                m: None,
                m_levels: Some(vec![m_coarse, m_fine]),
                alpha: alpha_used,
                rel_error: rel,
                cost: Some(cost),
                wall_time_s: wall,
            });
        }
    }
    csv.flush().map_err(PhikError::from)?;

    let summary = RunSummary {
        experiment: "mlmc-compare",
        grid: config.grid,
        base_seed: config.base_seed,
        n_obs: obs.len(),
        results,
    };
    write_json(&config.out_dir.join("summary.json"), &summary)?;
    println!(
        "mlmc-compare: {} fine-budget value(s) -> {}",
        m_fine_values.len(),
        config.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify-bounds
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct BoundsReportFile {
    experiment: &'static str,
    grid: GridSize,
    base_seed: u64,
    trials_per_suite: usize,
    /// Outcome of the deterministic exact-preservation check; absent when its
    /// hypothesis was violated (see `precondition_failures`).
    exact_preservation: Option<ExactPreservation>,
    precondition_failures: Vec<String>,
    single_level: Vec<BoundReport>,
    multilevel: Vec<BoundReport>,
    violations: usize,
}

/// Boundary-restriction operator whose target is the profile sampled at the
/// boundary nodes.
fn boundary_profile_operator(
    grid: &Grid2D,
    profile: &dyn Fn(f64, f64) -> f64,
) -> Result<DiscreteLinearOperator, PhikError> {
    let op = boundary_restriction_operator(grid, &ALL_EDGES)?;
    let bnodes = boundary_node_indices(grid, &ALL_EDGES);
    let g = DVector::from_iterator(
        bnodes.len(),
        bnodes.iter().map(|&k| {
            let [x, y] = grid.point_at(k);
            profile(x, y)
        }),
    );
    op.with_target(ConstraintTarget::Deterministic(g))
}

/// Distinct interior nodes drawn uniformly (capped by how many exist).
fn random_interior_nodes(grid: &Grid2D, rng: &mut SplitMix64, want: usize) -> Vec<usize> {
    let n_interior = (grid.nx() - 2) * (grid.ny() - 2);
    let count = want.min(n_interior);
    let mut idx: Vec<usize> = Vec::with_capacity(count);
    while idx.len() < count {
        let k = (rng.next_u64() % grid.n_nodes() as u64) as usize;
        let (i, j) = grid.from_flat(k);
        if grid.is_boundary(i, j) || idx.contains(&k) {
            continue;
        }
        idx.push(k);
    }
    idx
}

/// Largest residual `||A y^m - target||` over an ensemble's realizations,
/// measured in the operator's norm. `against_target = false` measures against
/// zero (difference levels).
fn max_realization_residual(
    ensemble: &Ensemble,
    op: &DiscreteLinearOperator,
    against_target: bool,
) -> Result<f64, PhikError> {
    let g = op.target_mean();
    let mut worst = 0.0f64;
    for m in 0..ensemble.n_realizations() {
        let col = ensemble.realization(m);
        let mut r = op.apply(col.as_slice())?;
        if against_target {
            r -= &g;
        }
        worst = worst.max(op.residual_norm(&r));
    }
    Ok(worst)
}

/// Random affine-plus-bilinear boundary profile.
fn random_profile(rng: &mut SplitMix64) -> impl Fn(f64, f64) -> f64 {
    let p: Vec<f64> = (0..4).map(|_| rng.next_standard_normal()).collect();
    move |x: f64, y: f64| p[0] + p[1] * x + p[2] * y + p[3] * x * y
}

fn corrupt_first_realization(ensemble: Ensemble, node: usize) -> Result<Ensemble, PhikError> {
    let locations = ensemble.locations().clone();
    let mut r = ensemble.realizations().clone();
    r[(node, 0)] += 1.0;
    Ensemble::new(locations, r)
}

pub fn cmd_verify_bounds(config: &ExperimentConfig) -> Result<(), CliError> {
    let grid = unit_grid(config.grid)?;
    let trials = config.trials.unwrap_or(25);
    let queries = Locations::Grid(grid.clone());
    let alpha = config.alpha.policy();
    let base = config.base_seed;
    let mut violations = 0usize;
    let mut precondition_failures = Vec::new();

    // --- deterministic exact-preservation check (alpha = 0) ---
    let profile0 = |x: f64, y: f64| 1.0 + 0.8 * x - 0.5 * y + 0.3 * x * y;
    let spec0 = phik::RngSpec::new(stream_seed(base, 100, 0));
    let mut ensemble = constrained_field_model(&grid, 32, &spec0, &profile0)?;
    if config.inject_violation {
        let bnode = boundary_node_indices(&grid, &ALL_EDGES)[0];
        ensemble = corrupt_first_realization(ensemble, bnode)?;
    }
    let op0 = boundary_profile_operator(&grid, &profile0)?;
    let first_realization = ensemble.realization(0);
    let interior: Vec<usize> = (0..grid.n_nodes())
        .filter(|&k| {
            let (i, j) = grid.from_flat(k);
            !grid.is_boundary(i, j)
        })
        .take(5)
        .collect();
    let obs0 = observations_at_nodes(&grid, first_realization.as_slice(), &interior)?;
    let exact = match exact_preservation_check(&ensemble, &obs0, &op0) {
        Ok(result) => {
            if !result.passed {
                violations += 1;
            }
            Some(result)
        }
        Err(e @ PhikError::ConstraintPrecondition { .. }) => {
            violations += 1;
            precondition_failures.push(e.to_string());
            None
        }
        Err(e) => return Err(e.into()),
    };

    // --- randomized single-level bound audits ---
    let mut single_level = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        let mut rng = SplitMix64::new(stream_seed(base, 200, t));
        let profile = random_profile(&mut rng);
        let m = 6 + (rng.next_u64() % 10) as usize;
        let ensemble =
            constrained_field_model(&grid, m, &phik::RngSpec::new(stream_seed(base, 201, t)), &profile)?;
        let mut op = boundary_profile_operator(&grid, &profile)?;
        if t % 2 == 1 {
            let w = 1.0 / op.n_constraints() as f64;
            op = op.with_norm(NormKind::L2, w)?;
        }
        // observe an independent draw from the same constrained family
        let observed_field =
            constrained_field_model(&grid, 1, &phik::RngSpec::new(stream_seed(base, 202, t)), &profile)?;
        let observed = observed_field.realization(0);
        let n_obs = 3 + (rng.next_u64() % 3) as usize;
        let nodes = random_interior_nodes(&grid, &mut rng, n_obs);
        let obs = observations_at_nodes(&grid, observed.as_slice(), &nodes)?;

        let moments = EmpiricalMoments::from_ensemble(&ensemble)?;
        let pred = gp_predict(&moments, &obs, &queries, alpha)?;
        let report = preservation_bound(&moments, &obs, &op, &pred)?;
        if !report.satisfied {
            violations += 1;
        }
        single_level.push(report);
    }

    // --- randomized two-level bound audits ---
    // Level 1: a constrained ensemble carrying the boundary profile. Level 2:
    // differences of coupled pairs from the same family, so its realizations
    // satisfy the zero-target boundary condition exactly.
    let mut multilevel = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        let mut rng = SplitMix64::new(stream_seed(base, 300, t));
        let profile = random_profile(&mut rng);
        let m1 = 4 + (rng.next_u64() % 6) as usize;
        let m2 = 3 + (rng.next_u64() % 4) as usize;
        let level1 =
            constrained_field_model(&grid, m1, &phik::RngSpec::new(stream_seed(base, 301, t)), &profile)?;
        let pair_a =
            constrained_field_model(&grid, m2, &phik::RngSpec::new(stream_seed(base, 302, t)), &profile)?;
        let pair_b =
            constrained_field_model(&grid, m2, &phik::RngSpec::new(stream_seed(base, 303, t)), &profile)?;
        let differences = Ensemble::new(
            level1.locations().clone(),
            pair_a.realizations() - pair_b.realizations(),
        )?;

        let mut op = boundary_profile_operator(&grid, &profile)?;
        if t % 2 == 1 {
            let w = 1.0 / op.n_constraints() as f64;
            op = op.with_norm(NormKind::L2, w)?;
        }
        // honest per-level tolerances, measured from the generated levels
        let eps = vec![
            max_realization_residual(&level1, &op, true)?,
            max_realization_residual(&differences, &op, false)?,
        ];

        let levels = vec![
            LevelEnsemble::new(1, grid.clone(), level1, None)?,
            LevelEnsemble::new(2, grid.clone(), differences, None)?,
        ];
        let observed_field =
            constrained_field_model(&grid, 1, &phik::RngSpec::new(stream_seed(base, 304, t)), &profile)?;
        let observed = observed_field.realization(0);
        let n_obs = 3 + (rng.next_u64() % 3) as usize;
        let nodes = random_interior_nodes(&grid, &mut rng, n_obs);
        let obs = observations_at_nodes(&grid, observed.as_slice(), &nodes)?;

        let pred = mlmc_phik_predict(&levels, &obs, &queries, alpha)?;
        let moments = MlmcMoments::new(&levels)?;
        let report = preservation_bound_multilevel(&moments, &obs, &op, &pred, &eps)?;
        if !report.satisfied {
            violations += 1;
        }
        multilevel.push(report);
    }

    ensure_out_dir(config)?;
    let single_violations = single_level.iter().filter(|r| !r.satisfied).count();
    let multi_violations = multilevel.iter().filter(|r| !r.satisfied).count();
    let exact_violations = violations - single_violations - multi_violations;
    let report = BoundsReportFile {
        experiment: "verify-bounds",
        grid: config.grid,
        base_seed: base,
        trials_per_suite: trials,
        exact_preservation: exact,
        precondition_failures,
        single_level,
        multilevel,
        violations,
    };
    write_json(&config.out_dir.join("bounds_report.json"), &report)?;

    let status = |v: usize| if v == 0 { "PASS" } else { "FAIL" };
    println!("{:<18} {:>6} {:>10}  status", "suite", "trials", "violations");
    println!(
        "{:<18} {:>6} {:>10}  {}",
        "exact-preservation",
        1,
        exact_violations,
        status(exact_violations)
    );
    println!(
        "{:<18} {:>6} {:>10}  {}",
        "single-level",
        trials,
        single_violations,
        status(single_violations)
    );
    println!(
        "{:<18} {:>6} {:>10}  {}",
        "multilevel",
        trials,
        multi_violations,
        status(multi_violations)
    );
    println!("report: {}", config.out_dir.join("bounds_report.json").display());

    if violations > 0 {
        return Err(CliError::Violation(format!(
            "{violations} bound violation(s); see bounds_report.json"
        )));
    }
    Ok(())
}
