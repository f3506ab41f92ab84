//! Gaussian-process regression on structured grids with ensemble-derived
//! priors.
//!
//! The crate provides two complementary regression paths:
//!
//! * **Data-driven Kriging** ([`kriging`]): a stationary Gaussian kernel
//!   whose variance, mean, and anisotropic lengthscales are fit by maximum
//!   likelihood from the observations alone.
//! * **Ensemble Kriging** ([`ensemble`], [`mlmc`]): the prior mean and
//!   covariance are estimated from Monte Carlo realizations of a stochastic
//!   model — either a single ensemble or a multilevel telescoping ensemble
//!   with per-level sample counts — so the predictor inherits the physics
//!   encoded in the model.
//!
//! Supporting modules cover shared prediction machinery ([`gp`]), linear
//!   constraint preservation diagnostics and a-priori error bounds
//!   ([`constraints`]), variance-greedy active learning ([`active`]),
//!   deterministic seeded sampling ([`rng`]), a derivative-free optimizer
//!   ([`optim`]), reference stochastic models ([`models`]), and CSV
//!   serialization ([`io`]).

pub mod active;
pub mod constraints;
pub mod domain;
pub mod ensemble;
pub mod error;
pub mod gp;
pub mod io;
pub mod kriging;
pub mod mlmc;
pub mod models;
pub mod optim;
pub mod rng;

pub use domain::{Field, Grid2D, Locations, Observations, PointSet};
pub use ensemble::{mc_cov, mc_mean, phik_predict, EmpiricalMoments, Ensemble};
pub use error::{PhikError, Result};
pub use gp::{gp_predict, AlphaPolicy, GpModel, Prediction};
pub use kriging::{fit_kriging, kriging_predict, MleFit, StationaryKernel};
pub use mlmc::{mlmc_phik_predict, LevelEnsemble, MlmcMoments};
pub use rng::RngSpec;
