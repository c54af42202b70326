//! Sequential conditional models for categorical survey data with unit and
//! item nonresponse, identified through auxiliary population margins.
//!
//! The crate is organized around a pipeline:
//!
//! 1. [`data`] — schema'd categorical datasets with explicit missingness
//!    structure (item indicators, unit nonrespondent rows, synthetic rows).
//! 2. [`spec`] — declarative sequences of conditional models (saturated
//!    head, logistic and proportional-odds regressions for survey variables
//!    and nonresponse indicators), a catalog of named specifications, rule
//!    based identification accounting, and validation.
//! 3. [`augment`] — deterministic construction of synthetic records whose
//!    empirical distribution matches an auxiliary margin.
//! 4. [`sampler`] — Metropolis-within-Gibbs engine alternating imputation of
//!    missing values with parameter updates.
//! 5. [`diagnostics`] — subgroup estimands, posterior predictive cell
//!    checks, nonrespondent predictions, ESS / split R-hat.
//! 6. [`simgen`] — exact enumeration oracle and scenario generators used for
//!    testing and calibration studies.
//! 7. [`config`] / [`runner`] — TOML run configuration and the batch
//!    subcommands behind the `mdam` binary.

pub mod augment;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod numeric;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod simgen;
pub mod spec;

pub use error::{Error, Result};
