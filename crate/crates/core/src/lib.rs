//! Simulation study of Bayesian-regularized age-period-cohort models.
//!
//! * [`grid`]: index arithmetic and centering indexes of the age-period table.
//! * [`datagen`]: artificial effects for the 13 sign cases and noisy data.
//! * [`design`]: dummy-coded design matrix and cell means.
//! * [`models`]: likelihood, priors and the non-centered parameterization.
//! * [`inference`]: MAP optimization and NUTS sampling.
//! * [`analysis`]: linear/nonlinear decomposition, bias scalar and grades.
//! * [`cli`]: the command implementations behind the `apcsim` binary.

pub mod analysis;
pub mod cli;
pub mod datagen;
pub mod design;
pub mod error;
pub mod grid;
pub mod inference;
pub mod models;

pub use analysis::{bias_s, decompose, grade, run_grid, BiasReport, Decomposition, Grade};
pub use datagen::{artificial_effects, enumerate_cases, generate_case, generate_dataset, CaseSpec, Dataset, EffectSet};
pub use error::{ApcError, Result};
pub use grid::{centering_indexes, cohort_index, index_weight_sum, weight_gap, CenteringIndexes, GridSpec};
pub use inference::{fit, map_fit, mcmc_fit, FitConfig, FitResult, Method};
pub use models::{Model, ModelKind, Posterior};
