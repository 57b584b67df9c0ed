use alloc::sync::Arc;
use alloc::vec::Vec;

use super::bsde::{bsde_solve_regression, BasisSpec, FilteredBundle, RegressionField};
use super::cost::{cost_J, CostReport};
use super::policy::ControlPolicy;
use super::DualField;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::lq::lq_solve;
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone)]
pub struct IterationReport {
    /// `U⁰` (the LQ schedule) followed by the regression feedback iterates.
    pub policies: Vec<ControlPolicy>,
    /// BSDE solution under each policy.
    pub fields: Vec<Arc<RegressionField>>,
    pub costs: Vec<CostReport>,
    /// First iterate whose cost is within 2 SE of its predecessor.
    pub converged_at: Option<usize>,
}

impl IterationReport {
    pub fn final_policy(&self) -> &ControlPolicy {
        self.policies.last().expect("at least one policy")
    }

    pub fn final_cost(&self) -> &CostReport {
        self.costs.last().expect("at least one cost")
    }
}

/// Starts from the LQ schedule, regresses the BSDE under the current
/// policy and replaces it by the optimal law on the regressed field.
pub fn policy_iteration<E: Executor>(
    f: &[f64],
    bundle: &FilteredBundle,
    basis: BasisSpec,
    n_iters: usize,
    exec: &E,
) -> Result<IterationReport> {
    if n_iters == 0 {
        return Err(Error::param("n_iters", "must be at least 1"));
    }
    let lq = lq_solve(&bundle.model, f, &bundle.grid)?;
    let mut policy = ControlPolicy::schedule(&bundle.grid, lq.schedule())?;
    let mut policies = Vec::with_capacity(n_iters + 1);
    let mut fields = Vec::with_capacity(n_iters + 1);
    let mut costs: Vec<CostReport> = Vec::with_capacity(n_iters + 1);
    let mut converged_at = None;
    for it in 0..=n_iters {
        let field = Arc::new(bsde_solve_regression(&policy, f, bundle, basis)?);
        let cost = if policy.is_deterministic() {
            cost_J(&policy, None, f, bundle, bundle.scheme, exec)?
        } else {
            cost_J(&policy, Some(field.as_ref() as &dyn DualField), f, bundle, bundle.scheme, exec)?
        };
        if converged_at.is_none() {
            let flat = match costs.last() {
                Some(prev) => (prev.j.mean - cost.j.mean).abs() <= 2.0 * prev.j.se.hypot(cost.j.se),
                None => cost.j.mean.abs() <= 1e-14,
            };
            if flat {
                converged_at = Some(it);
            }
        }
        costs.push(cost);
        let next = ControlPolicy::regression_feedback(field.clone(), &bundle.model);
        policies.push(core::mem::replace(&mut policy, next));
        fields.push(field);
        if it == n_iters {
            break;
        }
    }
    Ok(IterationReport {
        policies,
        fields,
        costs,
        converged_at,
    })
}
