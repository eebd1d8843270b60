//! Multi-fidelity sparse-grid surrogates built by adaptive multi-index
//! stochastic collocation (MISC), plus the PlateauMISC variant that watches
//! the spectral coefficients of each fidelity for a solver-noise plateau and
//! stops refining fidelities once they have nothing more to give.
//!
//! The crate is organised bottom-up:
//!
//! - [`knots`]: 1D Clenshaw–Curtis and symmetric Leja point families.
//! - [`midx`]: multi-index sets, margins, backfill sets.
//! - [`tensor`]: barycentric Lagrange interpolation and quadrature weights.
//! - [`combiner`]: combination-technique surrogates.
//! - [`spectral`]: change of basis to Chebyshev coefficients and envelopes.
//! - [`plateau`]: piecewise log-linear change-point fits.
//! - [`adaptive`]: the greedy MISC and PlateauMISC loops.
//! - [`models`]: model hierarchies and the evaluation cache.
//! - [`metrics`]: Monte-Carlo error norms, KDE and the KS2 statistic.
//! - [`experiment`]: config-driven runs and CSV output.

pub mod adaptive;
pub mod combiner;
pub mod error;
pub mod experiment;
pub mod knots;
pub mod metrics;
pub mod midx;
pub mod models;
pub mod plateau;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
