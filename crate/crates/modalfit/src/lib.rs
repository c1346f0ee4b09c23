//! Frequency-domain identification of multivariable modal models.
//!
//! The crate estimates modal models of lightly damped mechanical systems
//! (flexible positioning stages, for instance) from measured frequency
//! response data. Estimation runs in two stages:
//!
//! 1. an iterative refined instrumental-variable scheme fits an *additive*
//!    transfer-matrix model — a sum of low-order submodels sharing no poles
//!    (see [`additive`] and [`riv`]); then
//! 2. a weighted Gauss–Newton projection maps the additive estimate onto the
//!    modal form with rank-one residue matrices, using the first stage's
//!    parameter covariance as the metric (see [`modal`] and [`ipem`]).
//!
//! Supporting modules handle FRF datasets and weighting ([`frf`]), state-space
//! realization of modal models ([`realize`]), and synthetic test systems
//! ([`synth`]). [`pipeline`] chains everything behind a single call used by
//! the command-line frontend.

pub mod additive;
pub mod error;
pub mod frf;
pub mod ipem;
pub mod linalg;
pub mod modal;
pub mod pipeline;
pub mod realize;
pub mod riv;
pub mod synth;

pub use error::{Error, Result};

/// Complex scalar used throughout: double-precision, `re`/`im` layout.
pub type C64 = num_complex::Complex<f64>;
