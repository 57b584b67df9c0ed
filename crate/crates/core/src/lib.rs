//! Minimum-variance filtering posed as a dual optimal-control problem.
//!
//! The crate covers the full loop for finite-state hidden Markov models
//! observed in additive white noise:
//!
//! * [`model`] and [`algebra`]: model types and the algebraic primitives of
//!   the dual problem (jump covariation, Lagrangian, Hamiltonian, value).
//! * [`sim`]: exact jump-chain simulation with reproducible per-path streams.
//! * [`filters`]: Wonham, Kalman-Bucy, grid-Kushner and the Markov-chain
//!   Kalman filter, plus the covariance DRE of the nonlinear filter.
//! * [`lq`]: the deterministic linear-quadratic dual and its Riccati solver.
//! * [`dual`]: the BSDE-constrained dual control problem: costs, estimators,
//!   the optimal feedback law, co-state propagation, regression and PDE
//!   solvers, and martingale diagnostics.
//!
//! The crate is `no_std` (it needs `alloc`). Work over many sample paths is
//! routed through the [`exec::Executor`] trait so that a caller can supply a
//! thread pool without changing any numeric result.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod algebra;
pub mod dual;
pub mod error;
pub mod exec;
pub mod filters;
pub mod grid;
pub mod linalg;
pub mod lq;
pub mod model;
pub mod ode;
pub mod rng;
pub mod sde;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
pub use grid::{MatPath, TimeGrid, VecPath};
pub use model::{Diffusion1DModel, FiniteModel, LinearGaussianModel};
