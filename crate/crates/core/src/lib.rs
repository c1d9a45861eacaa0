//! Simulation and inference laboratory for state space stochastic
//! differential equations.
//!
//! The crate simulates coupled observation/latent SDE pairs, computes the
//! Girsanov sufficient statistics and likelihood approximations for the
//! shared drift parameter, fits maximum-likelihood and Bayesian estimates,
//! and verifies the expected large-horizon behavior (consistency, asymptotic
//! normality, posterior decay rates) with a Monte-Carlo experiment harness.
//!
//! Module map:
//!
//! - [`model`] — SDE coefficients, parameter maps, observation window,
//!   numerical assumption checks
//! - [`simulate`] — Euler-Maruyama paths with reproducible Wiener streams
//! - [`stability`] — Lyapunov condition checks and empirical decay envelopes
//! - [`likelihood`] — sufficient statistics, Monte-Carlo marginal likelihood,
//!   asymptotic approximations and the Kullback-Leibler rate
//! - [`mle`] — approximated objective, analytic derivatives, Newton fits,
//!   observed information
//! - [`bayes`] — posteriors, random-walk Metropolis, normality diagnostics
//! - [`panel`] — pooled estimation for collections of series sharing theta
//! - [`harness`] — config-driven Monte-Carlo experiment runner
//! - [`presets`] — named model registry used by the CLI and the harness

// NaN-rejecting comparisons like `!(x > 0.0)` are deliberate throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_is_multiple_of)]

pub mod bayes;
pub mod error;
pub mod harness;
pub mod likelihood;
pub mod mle;
pub mod model;
pub mod panel;
pub mod presets;
pub mod rng;
pub mod simulate;
pub mod stability;

pub use error::{Error, Result};

/// Identifier of the random-number scheme; bump when the stream derivation
/// or generator changes, since that silently changes every simulation.
pub const RNG_ALGORITHM: &str = "chacha12/splitmix64-substreams-v1";
