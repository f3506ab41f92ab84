//! Derivative-free simplex minimization (Nelder-Mead).
//!
//! Deterministic given the starting point and options: no randomized restarts,
//! stable ordering of simplex vertices, standard reflection/expansion/
//! contraction/shrink coefficients (1, 2, 1/2, 1/2). Infeasible regions can be
//! signaled by returning `f64::INFINITY` from the objective.

/// Termination and step-size options.
#[derive(Clone, Debug)]
pub struct NelderMeadOptions {
    /// Edge length of the initial axis-aligned simplex.
    pub initial_step: f64,
    /// Stop when the objective spread over the simplex falls below this.
    pub f_tol: f64,
    /// Stop when the vertex spread (max coordinate distance) falls below this.
    pub x_tol: f64,
    /// Hard iteration cap.
    pub max_iters: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { initial_step: 0.5, f_tol: 1e-10, x_tol: 1e-8, max_iters: 250 }
    }
}

/// Result of a simplex search.
#[derive(Clone, Debug)]
pub struct NelderMeadOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Minimizes `f` starting from `x0`. NaN objective values are treated as
/// `+inf` so they can never be selected.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadOutcome {
    let dim = x0.len();
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    // initial simplex: x0 plus one step along each axis
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let f0 = eval(x0, &mut evaluations);
    simplex.push((x0.to_vec(), f0));
    for k in 0..dim {
        let mut xk = x0.to_vec();
        xk[k] += opts.initial_step;
        let fk = eval(&xk, &mut evaluations);
        simplex.push((xk, fk));
    }

    let mut iterations = 0usize;
    while iterations < opts.max_iters {
        iterations += 1;
        // ascending by objective; stable so exact ties keep insertion order
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());

        let f_best = simplex[0].1;
        let f_worst = simplex[dim].1;
        let f_spread = if f_best.is_finite() && f_worst.is_finite() {
            f_worst - f_best
        } else {
            f64::INFINITY
        };
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
            })
            .fold(0.0f64, f64::max);
        if f_spread <= opts.f_tol && x_spread <= opts.x_tol {
            break;
        }

        // centroid of all but the worst vertex
        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / dim as f64;
            }
        }

        let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect()
        };

        // reflect the worst vertex through the centroid
        let x_refl = lerp(&centroid, &simplex[dim].0, -1.0);
        let f_refl = eval(&x_refl, &mut evaluations);

        if f_refl < simplex[0].1 {
            // try expanding further along the same direction
            let x_exp = lerp(&centroid, &simplex[dim].0, -2.0);
            let f_exp = eval(&x_exp, &mut evaluations);
            simplex[dim] = if f_exp < f_refl { (x_exp, f_exp) } else { (x_refl, f_refl) };
        } else if f_refl < simplex[dim - 1].1 {
            simplex[dim] = (x_refl, f_refl);
        } else {
            // contraction: outside if the reflection improved on the worst,
            // inside otherwise
            let (x_con, f_con) = if f_refl < simplex[dim].1 {
                let x = lerp(&centroid, &x_refl, 0.5);
                let fx = eval(&x, &mut evaluations);
                (x, fx)
            } else {
                let x = lerp(&centroid, &simplex[dim].0, 0.5);
                let fx = eval(&x, &mut evaluations);
                (x, fx)
            };
            if f_con < simplex[dim].1.min(f_refl) {
                simplex[dim] = (x_con, f_con);
            } else {
                // shrink every vertex toward the best
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    vertex.0 = lerp(&best, &vertex.0, 0.5);
                    vertex.1 = eval(&vertex.0, &mut evaluations);
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    NelderMeadOutcome {
        x: simplex[0].0.clone(),
        f: simplex[0].1,
        iterations,
        evaluations,
    }
}
