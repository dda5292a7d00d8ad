//! Lindstedt expansions of quasi-periodic solutions, limit cycles and
//! isochrones for state-dependent delay differential equations.
//!
//! The crate is organized around a small set of kernels:
//!
//! * [`fourier`] — truncated vector-valued Fourier series on `T^d`;
//! * [`jets`] — truncated power series in the perturbation parameter over
//!   generic coefficient spaces, with analytic composition, series-valued
//!   angular shifts and implicit-delay fixed points;
//! * [`ftaylor`] — Fourier–Taylor polynomials `W(theta, s)` for limit-cycle
//!   and isochrone parameterizations;
//! * [`divisors`] — Diophantine diagnostics and the small-divisor linear
//!   solvers (plain, eigenvalue-shifted, Jordan chains, series frequency);
//! * [`lindstedt`] — the order-by-order driver for the torus invariance
//!   equation with Hamiltonian and reducible strategies;
//! * [`cycle`] — the quadratically convergent quasi-Newton iteration around
//!   a limit cycle;
//! * [`oracle`] — independent verification by direct integration and
//!   residual-order fitting;
//! * [`models`] — bundled delay models with their unperturbed seeds.

pub mod cycle;
pub mod divisors;
pub mod error;
pub mod expr;
pub mod fourier;
pub mod ftaylor;
pub mod jets;
pub mod lindstedt;
pub mod model;
pub mod models;
pub mod oracle;

pub use error::{Error, Result};
pub use fourier::{TfMatrix, TorusFourier, C64};
pub use jets::{AlgebraCtx, AnalyticMap, Coeff, CoeffAlgebra, EpsSeries};
