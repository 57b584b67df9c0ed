//! The dual optimal-control problem over the BSDE constraint
//!
//! ```text
//! min J(U) = E[ ½|Y₀ᵀ(X₀ − π₀)|² + ∫ ℓ(Y_t, V_t, U_t; X_t) dt ]
//! dY_t = −(A Y_t + H U_t + diag(H V_tᵀ) − V_t Hᵀπ_t) dt + V_t dI_t,   Y_T = f
//! ```
//!
//! A BSDE solution is represented as a [`DualField`]: a map from a time
//! index and a posterior `π` to the pair `(Y, V)`. Deterministic schedules,
//! least-squares regression and the PDE synthesis for two states all produce
//! fields, and every Monte Carlo functional (cost, estimator, martingale
//! diagnostic) is evaluated path by path against a field.

mod bsde;
mod cost;
mod iteration;
mod policy;
mod synthesis;

pub use bsde::{bsde_solve_deterministic, bsde_solve_regression, BasisSpec, DeterministicField, FilteredBundle, RegressionField, RegressionStep};
pub use cost::{
    cost_J, duality_gap, duality_gaps, estimator_S, martingale_diagnostic, path_outcomes, value_function,
    CostReport, GapReport, MartingaleReport, PathOutcome,
};
pub use iteration::{policy_iteration, IterationReport};
pub use policy::{ControlPolicy, FeedbackLaw, PolicyDoc};
pub use synthesis::{
    bsde_solve_optimal_synthesis, costate_forward, costate_identity_error, optimal_control_law,
    running_estimator_check, synthesize, DualTrajectory, OptimalField,
};

/// A BSDE solution `(Y, V)` as a function of time index and posterior.
pub trait DualField: Send + Sync {
    fn d(&self) -> usize;
    fn m(&self) -> usize;
    /// Writes `Y(t_k, π)` (`d`) and `V(t_k, π)` (row-major `d x m`).
    fn eval(&self, k: usize, pi: &[f64], y: &mut [f64], v: &mut [f64]);
}

/// A field read on a grid coarser by `factor`.
pub struct Strided<'a> {
    inner: &'a dyn DualField,
    factor: usize,
}

impl<'a> Strided<'a> {
    pub fn new(inner: &'a dyn DualField, factor: usize) -> Self {
        Strided { inner, factor }
    }
}

impl DualField for Strided<'_> {
    fn d(&self) -> usize {
        self.inner.d()
    }

    fn m(&self) -> usize {
        self.inner.m()
    }

    fn eval(&self, k: usize, pi: &[f64], y: &mut [f64], v: &mut [f64]) {
        self.inner.eval(k * self.factor, pi, y, v);
    }
}
