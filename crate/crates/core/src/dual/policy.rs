use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use super::bsde::{BasisSpec, RegressionField, RegressionStep};
use super::DualField;
use crate::algebra::Kernel;
use crate::error::{Error, Result};
use crate::grid::{TimeGrid, VecPath};
use crate::model::FiniteModel;

/// Feedback law `(k, π) ↦ U(t_k, π)`.
pub type FeedbackLaw = Arc<dyn Fn(usize, &[f64], &mut [f64]) + Send + Sync>;

/// Admissible dual control. Feedback kinds depend on the observations only
/// through the current posterior.
#[derive(Clone)]
pub enum ControlPolicy {
    /// Deterministic schedule given at the grid nodes.
    Schedule { grid: TimeGrid, u: VecPath },
    /// Arbitrary feedback on `(t_k, π)`.
    Feedback { name: String, m: usize, law: FeedbackLaw },
    /// `U = −R⁻¹HᵀΣ(π)Ŷ(t, π) − V̂(t, π)ᵀπ` from a regressed BSDE solution.
    RegressionFeedback { field: Arc<RegressionField>, kernel: Arc<Kernel> },
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPolicy::Schedule { grid, .. } => write!(f, "Schedule({} steps)", grid.n_steps()),
            ControlPolicy::Feedback { name, .. } => write!(f, "Feedback({name})"),
            ControlPolicy::RegressionFeedback { field, .. } => {
                write!(f, "RegressionFeedback({} steps)", field.steps.len().saturating_sub(1))
            }
        }
    }
}

impl ControlPolicy {
    pub fn zero(grid: &TimeGrid, m: usize) -> Self {
        ControlPolicy::Schedule {
            grid: *grid,
            u: VecPath::zeros(grid.n_steps() + 1, m),
        }
    }

    pub fn schedule(grid: &TimeGrid, u: VecPath) -> Result<Self> {
        if u.len() != grid.n_steps() + 1 {
            return Err(Error::GridMismatch);
        }
        Ok(ControlPolicy::Schedule { grid: *grid, u })
    }

    pub fn feedback(name: &str, m: usize, law: FeedbackLaw) -> Self {
        ControlPolicy::Feedback {
            name: String::from(name),
            m,
            law,
        }
    }

    pub fn regression_feedback(field: Arc<RegressionField>, model: &FiniteModel) -> Self {
        ControlPolicy::RegressionFeedback {
            field,
            kernel: Arc::new(Kernel::new(model)),
        }
    }

    /// The optimal law `U* = −R⁻¹HᵀΣ(π)Y − Vᵀπ` evaluated on a field.
    pub fn optimal_on<F: DualField + 'static>(field: Arc<F>, model: &FiniteModel, name: &str) -> Self {
        let kernel = Kernel::new(model);
        let (d, m) = (kernel.d, kernel.m);
        let law: FeedbackLaw = Arc::new(move |k, pi, out| {
            let mut y = vec![0.0; d];
            let mut v = vec![0.0; d * m];
            field.eval(k, pi, &mut y, &mut v);
            kernel.optimal_control(&y, &v, pi, out);
        });
        ControlPolicy::feedback(name, m, law)
    }

    pub fn m(&self) -> usize {
        match self {
            ControlPolicy::Schedule { u, .. } => u.dim(),
            ControlPolicy::Feedback { m, .. } => *m,
            ControlPolicy::RegressionFeedback { kernel, .. } => kernel.m,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ControlPolicy::Schedule { .. } => "deterministic_schedule",
            ControlPolicy::Feedback { .. } => "feedback",
            ControlPolicy::RegressionFeedback { .. } => "regression_feedback",
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, ControlPolicy::Schedule { .. })
    }

    pub fn as_schedule(&self) -> Option<(&TimeGrid, &VecPath)> {
        match self {
            ControlPolicy::Schedule { grid, u } => Some((grid, u)),
            _ => None,
        }
    }

    /// Checks that a schedule lives on `grid`.
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        match self {
            ControlPolicy::Schedule { grid: g, .. } if !g.same_as(grid) => Err(Error::GridMismatch),
            ControlPolicy::RegressionFeedback { field, .. } if field.steps.len() != grid.n_steps() + 1 => {
                Err(Error::GridMismatch)
            }
            _ => Ok(()),
        }
    }

    /// Writes `U(t_k, π)`.
    pub fn control(&self, k: usize, pi: &[f64], out: &mut [f64]) {
        match self {
            ControlPolicy::Schedule { u, .. } => out.copy_from_slice(u.get(k)),
            ControlPolicy::Feedback { law, .. } => law(k, pi, out),
            ControlPolicy::RegressionFeedback { field, kernel } => {
                let mut y = vec![0.0; kernel.d];
                let mut v = vec![0.0; kernel.d * kernel.m];
                field.eval(k, pi, &mut y, &mut v);
                kernel.optimal_control(&y, &v, pi, out);
            }
        }
    }

    /// The same policy on a grid coarser by `factor`: node `k` of the coarse
    /// grid is node `k·factor` of the original.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        match self {
            ControlPolicy::Schedule { grid, u } => {
                let coarse = grid.coarsen(factor)?;
                let mut path = VecPath::with_capacity(coarse.n_steps() + 1, u.dim());
                (0..=coarse.n_steps()).for_each(|k| path.push(u.get(k * factor)));
                Ok(ControlPolicy::Schedule { grid: coarse, u: path })
            }
            ControlPolicy::Feedback { name, m, law } => {
                let inner = law.clone();
                let law: FeedbackLaw = Arc::new(move |k, pi, out| inner(k * factor, pi, out));
                Ok(ControlPolicy::feedback(name, *m, law))
            }
            ControlPolicy::RegressionFeedback { field, kernel } => {
                let n = field.steps.len() - 1;
                if factor == 0 || n % factor != 0 {
                    return Err(Error::param("factor", "must divide the number of steps"));
                }
                let steps = field.steps.iter().step_by(factor).cloned().collect();
                let coarse = RegressionField::from_steps(field.basis, field.d, field.m, steps)?;
                Ok(ControlPolicy::RegressionFeedback {
                    field: Arc::new(coarse),
                    kernel: kernel.clone(),
                })
            }
        }
    }

    pub fn to_doc(&self) -> PolicyDoc {
        match self {
            ControlPolicy::Schedule { grid, u } => PolicyDoc::DeterministicSchedule {
                grid: *grid,
                u: u.iter().map(|r| r.to_vec()).collect(),
            },
            ControlPolicy::Feedback { name, m, .. } => PolicyDoc::Feedback { name: name.clone(), m: *m },
            ControlPolicy::RegressionFeedback { field, .. } => PolicyDoc::RegressionFeedback {
                basis: field.basis,
                d: field.d,
                m: field.m,
                steps: field.steps.clone(),
            },
        }
    }

    /// Rebuilds a policy from its document. Closure feedback laws carry no
    /// data and cannot be restored.
    pub fn from_doc(doc: &PolicyDoc, model: &FiniteModel) -> Result<Self> {
        match doc {
            PolicyDoc::DeterministicSchedule { grid, u } => {
                let m = u.first().map_or(model.m(), |r| r.len());
                if m != model.m() || u.iter().any(|r| r.len() != m) {
                    return Err(Error::dim("schedule rows must have m entries"));
                }
                let mut path = VecPath::with_capacity(u.len(), m);
                u.iter().for_each(|r| path.push(r));
                ControlPolicy::schedule(grid, path)
            }
            PolicyDoc::Feedback { name, .. } => Err(Error::Unsupported(format!(
                "feedback policy '{name}' has no serialized form"
            ))),
            PolicyDoc::RegressionFeedback { basis, d, m, steps } => {
                if *d != model.d() || *m != model.m() {
                    return Err(Error::dim("regression tables do not match the model"));
                }
                let field = RegressionField::from_steps(*basis, *d, *m, steps.clone())?;
                Ok(ControlPolicy::regression_feedback(Arc::new(field), model))
            }
        }
    }
}

/// Serialized form of a [`ControlPolicy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyDoc {
    DeterministicSchedule { grid: TimeGrid, u: Vec<Vec<f64>> },
    Feedback { name: String, m: usize },
    RegressionFeedback { basis: BasisSpec, d: usize, m: usize, steps: Vec<RegressionStep> },
}
