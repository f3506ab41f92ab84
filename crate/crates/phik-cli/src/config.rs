//! Experiment configuration: strict JSON with per-command validation.
//!
//! One [`ExperimentConfig`] type covers all subcommands; unknown keys are
//! rejected at parse time and each command checks that the fields it needs are
//! present and consistent before anything runs. Command-line flags
//! (`--seed`, `--out`, `--method`) override individual keys after parsing.

use std::fmt;
use std::path::PathBuf;

use clap::ValueEnum;
use phik::AlphaPolicy;
use serde::{Deserialize, Serialize};

/// Which experiment a configuration file describes; must match the subcommand
/// it is passed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Reconstruct,
    Active,
    MlmcCompare,
    VerifyBounds,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Reconstruct => "reconstruct",
            ExperimentKind::Active => "active",
            ExperimentKind::MlmcCompare => "mlmc-compare",
            ExperimentKind::VerifyBounds => "verify-bounds",
        }
    }
}

/// Prediction method selectable per experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Kriging,
    Phik,
    MlmcPhik,
}

impl MethodName {
    pub fn name(self) -> &'static str {
        match self {
            MethodName::Kriging => "kriging",
            MethodName::Phik => "phik",
            MethodName::MlmcPhik => "mlmc-phik",
        }
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Node counts of a rectangular grid over the unit square.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSize {
    pub nx: usize,
    pub ny: usize,
}

/// Observation placement: either a seeded quasi-random layout or an explicit
/// list of coordinates (snapped to the nearest grid node).
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservationSpec {
    Halton { count: usize, seed: u64 },
    Explicit { points: Vec<[f64; 2]> },
}

/// Diagonal-regularization policy for conditioning the ensemble covariance.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaConfig {
    /// Smallest ladder entry whose Cholesky factorization succeeds.
    Auto,
    /// Exactly this value (0 allowed).
    Fixed(f64),
}

impl AlphaConfig {
    pub fn policy(self) -> AlphaPolicy {
        match self {
            AlphaConfig::Auto => AlphaPolicy::Auto,
            AlphaConfig::Fixed(a) => AlphaPolicy::Fixed(a),
        }
    }
}

fn default_alpha() -> AlphaConfig {
    AlphaConfig::Auto
}

/// Full experiment description. Fields that only some commands use are
/// optional here and checked by [`ExperimentConfig::validate`].
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Reconstruction grid (the finest grid for multilevel methods).
    pub grid: GridSize,
    /// Coarse grid for multilevel methods.
    #[serde(default)]
    pub coarse_grid: Option<GridSize>,
    #[serde(default)]
    pub observations: Option<ObservationSpec>,
    /// Single-level ensemble size.
    #[serde(default)]
    pub m: Option<usize>,
    /// Multilevel ensemble sizes, coarsest level first.
    #[serde(default)]
    pub m_levels: Option<Vec<usize>>,
    #[serde(default = "default_alpha")]
    pub alpha: AlphaConfig,
    /// Observation budget for the active-learning loop.
    #[serde(default)]
    pub n_max: Option<usize>,
    /// Seed for the ensemble/truth random streams (the observation layout
    /// carries its own seed).
    pub base_seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub methods: Vec<MethodName>,
    /// Fine-level sample counts swept by `mlmc-compare`.
    #[serde(default)]
    pub m_fine_values: Option<Vec<usize>>,
    /// Fixed coarse-level sample count for `mlmc-compare` (0 degenerates the
    /// multilevel estimator to the single-level one).
    #[serde(default)]
    pub m_coarse: Option<usize>,
    /// Randomized trials per suite for `verify-bounds`.
    #[serde(default)]
    pub trials: Option<usize>,
    /// Corrupt one realization of the exact-preservation suite so the
    /// verification must fail (for exercising the failure exit path).
    #[serde(default)]
    pub inject_violation: bool,
}

impl ExperimentConfig {
    /// Parses a configuration file, rejecting unknown keys.
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Checks that every field the given command needs is present and
    /// well-formed. Returns all problems found, not just the first.
    pub fn validate(&self, kind: ExperimentKind) -> Result<(), String> {
        let mut errors = Vec::new();
        if self.experiment != kind {
            errors.push(format!(
                "config declares experiment \"{}\" but the subcommand is \"{}\"",
                self.experiment.name(),
                kind.name()
            ));
        }
        self.check_grid(self.grid, "grid", &mut errors);
        if let Some(cg) = self.coarse_grid {
            self.check_grid(cg, "coarse_grid", &mut errors);
            if cg.nx > self.grid.nx || cg.ny > self.grid.ny {
                errors.push("coarse_grid must not be finer than grid".into());
            }
        }
        match kind {
            ExperimentKind::Reconstruct | ExperimentKind::Active => {
                self.check_observations(&mut errors);
                self.check_methods(kind, &mut errors);
                if kind == ExperimentKind::Active {
                    match self.n_max {
                        None => errors.push("active requires n_max".into()),
                        Some(n) => {
                            if let Some(n0) = self.observation_count() {
                                if n < n0 {
                                    errors.push(format!(
                                        "n_max ({n}) is below the initial observation count ({n0})"
                                    ));
                                }
                            }
                        }
                    }
                }
            }
            ExperimentKind::MlmcCompare => {
                self.check_observations(&mut errors);
                if self.coarse_grid.is_none() {
                    errors.push("mlmc-compare requires coarse_grid".into());
                }
                match &self.m_fine_values {
                    None => errors.push("mlmc-compare requires m_fine_values".into()),
                    Some(v) if v.is_empty() => {
                        errors.push("m_fine_values must not be empty".into())
                    }
                    Some(v) => {
                        if let Some(&bad) = v.iter().find(|&&m| m < 2) {
                            errors.push(format!(
                                "every entry of m_fine_values must be at least 2, got {bad}"
                            ));
                        }
                    }
                }
                match self.m_coarse {
                    None => errors.push("mlmc-compare requires m_coarse (0 allowed)".into()),
                    Some(1) => {
                        errors.push("m_coarse must be 0 or at least 2 (a single \
                                     realization has no sample covariance)"
                            .into());
                    }
                    _ => {}
                }
                for m in &self.methods {
                    if *m == MethodName::Kriging {
                        errors.push(
                            "mlmc-compare compares phik and mlmc-phik; kriging has no column"
                                .into(),
                        );
                    }
                }
            }
            ExperimentKind::VerifyBounds => {
                if self.trials == Some(0) {
                    errors.push("trials must be at least 1".into());
                }
                // the suites need interior nodes to observe and a boundary to
                // constrain
                if self.grid.nx < 4 || self.grid.ny < 4 {
                    errors.push("verify-bounds needs a grid of at least 4x4 nodes".into());
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors.join("; "))
        }
    }

    fn check_grid(&self, g: GridSize, name: &str, errors: &mut Vec<String>) {
        if g.nx < 2 || g.ny < 2 {
            errors.push(format!("{name} needs at least 2 nodes per side"));
        }
    }

    fn check_observations(&self, errors: &mut Vec<String>) {
        match &self.observations {
            None => errors.push("this experiment requires observations".into()),
            Some(ObservationSpec::Halton { count, .. }) => {
                if *count == 0 {
                    errors.push("observations.count must be at least 1".into());
                }
                if *count > self.grid.nx * self.grid.ny {
                    errors.push(format!(
                        "observations.count ({count}) exceeds the number of grid nodes"
                    ));
                }
            }
            Some(ObservationSpec::Explicit { points }) => {
                if points.is_empty() {
                    errors.push("observations.points must not be empty".into());
                }
                for (i, p) in points.iter().enumerate() {
                    if !(p[0].is_finite() && p[1].is_finite()) {
                        errors.push(format!("observation point {i} is not finite"));
                    } else if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                        errors.push(format!(
                            "observation point {i} ({}, {}) lies outside the unit square",
                            p[0], p[1]
                        ));
                    }
                }
            }
        }
    }

    fn check_methods(&self, kind: ExperimentKind, errors: &mut Vec<String>) {
        if self.methods.is_empty() {
            errors.push(format!("{} requires a non-empty methods list", kind.name()));
        }
        for m in &self.methods {
            match m {
                MethodName::Kriging => {}
                MethodName::Phik => match self.m {
                    None => errors.push("method phik requires m".into()),
                    Some(m) if m < 2 => {
                        errors.push(format!("m must be at least 2 for sample moments, got {m}"))
                    }
                    _ => {}
                },
                MethodName::MlmcPhik => {
                    if self.coarse_grid.is_none() {
                        errors.push("method mlmc-phik requires coarse_grid".into());
                    }
                    match &self.m_levels {
                        None => errors.push("method mlmc-phik requires m_levels".into()),
                        Some(v) if v.len() != 2 => errors.push(format!(
                            "m_levels must have exactly 2 entries (coarse, fine), got {}",
                            v.len()
                        )),
                        Some(v) => {
                            if let Some(&bad) = v.iter().find(|&&m| m < 2) {
                                errors.push(format!(
                                    "every m_levels entry must be at least 2, got {bad}"
                                ));
                            }
                        }
                    }
                }
            }
        }
    }

    /// Number of initial observations, when determinable from the config.
    pub fn observation_count(&self) -> Option<usize> {
        match &self.observations {
            Some(ObservationSpec::Halton { count, .. }) => Some(*count),
            Some(ObservationSpec::Explicit { points }) => Some(points.len()),
            None => None,
        }
    }
}
