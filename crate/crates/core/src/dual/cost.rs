use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::bsde::DeterministicField;
use super::policy::ControlPolicy;
use super::{DualField, Strided};
use crate::algebra::Kernel;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::filters::{wonham_filter_with, FilterTrajectory};
use crate::grid::TimeGrid;
use crate::linalg;
use crate::lq::deterministic_cost;
use crate::model::FiniteModel;
use crate::ode::midpoint_cubic;
use crate::sde::Scheme;
use crate::sim::{ObsPath, PathSource, StatePath};
use crate::stats::{slope, MeanSe};
#[allow(unused_imports)]
use num_traits::Float;

/// Pathwise quantities of one policy on one sample path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathOutcome {
    /// `½|Y₀ᵀ(X₀ − π₀)|²`.
    pub initial: f64,
    /// Quadrature of `ℒ(Y_k, V_k, U_k; π_k)` over the horizon.
    pub running: f64,
    /// `S_T = π₀ᵀY₀ − Σ U_kᵀΔZ_k`.
    pub s_t: f64,
    /// `fᵀX_T`.
    pub f_x: f64,
    /// `π_Tᵀf`.
    pub pi_f: f64,
    /// `𝒱(f; π_T)`.
    pub terminal_value: f64,
}

impl PathOutcome {
    pub fn j(&self) -> f64 {
        self.initial + self.running
    }

    pub fn half_mse(&self) -> f64 {
        0.5 * (self.s_t - self.f_x).powi(2)
    }

    /// `S_T − π_T(f)`.
    pub fn estimator_error(&self) -> f64 {
        self.s_t - self.pi_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub j: MeanSe,
    pub initial: MeanSe,
    pub running: MeanSe,
    /// Deterministic quadrature of the same cost, for schedules.
    pub closed_form: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub j: MeanSe,
    pub half_mse: MeanSe,
    /// Paired `J − ½MSE`.
    pub gap: MeanSe,
    /// Paired gap on the same paths observed at twice the step.
    pub gap_coarse: MeanSe,
    /// Discretization bias estimate `|gap(2Δt) − gap(Δt)|`.
    pub allowance: f64,
    /// Paired `gap(Δt) − ½gap(2Δt)`, which vanishes for a first-order bias.
    pub halving: MeanSe,
}

impl GapReport {
    /// `|gap| ≤ 3(SE + allowance)`.
    pub fn within_tolerance(&self) -> bool {
        self.within(3.0)
    }

    /// `|gap| ≤ k(SE + allowance)`.
    pub fn within(&self, k: f64) -> bool {
        self.gap.mean.abs() <= k * (self.gap.se + self.allowance)
    }

    /// The bias at least halves with the step:
    /// `|gap(Δt)| − ½|gap(2Δt)| ≤ 3 SE` of the paired difference.
    pub fn bias_halves(&self) -> bool {
        self.gap.mean.abs() - 0.5 * self.gap_coarse.mean.abs() <= 3.0 * self.halving.se + 1e-15
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub times: Vec<f64>,
    /// Monte Carlo mean of `M_k = 𝒱(Y_k; π_k) − ∫₀^{t_k} ℒ dt`.
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// Per-path least-squares slope of `M` against `t`, averaged.
    pub trend: MeanSe,
}

impl MartingaleReport {
    pub fn t_stat(&self) -> f64 {
        self.trend.t_stat()
    }
}

enum FieldRef<'a> {
    Borrowed(&'a dyn DualField),
    Owned(Box<dyn DualField + 'a>),
}

impl FieldRef<'_> {
    fn get(&self) -> &dyn DualField {
        match self {
            FieldRef::Borrowed(f) => *f,
            FieldRef::Owned(f) => f.as_ref(),
        }
    }
}

/// A policy together with a BSDE solution consistent with it.
pub(crate) struct Evaluation<'a> {
    policy: ControlPolicy,
    field: FieldRef<'a>,
}

impl<'a> Evaluation<'a> {
    pub(crate) fn new(
        model: &FiniteModel,
        grid: &TimeGrid,
        policy: &ControlPolicy,
        field: Option<&'a dyn DualField>,
        f: &[f64],
    ) -> Result<Self> {
        policy.check_grid(grid)?;
        if policy.m() != model.m() {
            return Err(Error::PolicyMismatch(alloc::format!(
                "policy has {} control components, model has {}",
                policy.m(),
                model.m()
            )));
        }
        let field = match field {
            Some(fd) => FieldRef::Borrowed(fd),
            None if policy.is_deterministic() => FieldRef::Owned(Box::new(DeterministicField::new(model, policy, f)?)),
            None => return Err(Error::MissingBsdeSolution),
        };
        Ok(Evaluation {
            policy: policy.clone(),
            field,
        })
    }

    /// The same evaluation on a grid coarser by `factor`.
    fn coarsen(&self, factor: usize) -> Result<Evaluation<'_>> {
        Ok(Evaluation {
            policy: self.policy.coarsen(factor)?,
            field: FieldRef::Owned(Box::new(Strided::new(self.field.get(), factor))),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Options {
    /// Drops the `V` terms of the Lagrangian (mutation control).
    pub drop_v_term: bool,
}

/// Walks one filtered path, calling `node(k, M_k)` at every node.
///
/// The running cost is integrated per interval by Simpson's rule with the
/// midpoint value of `ℒ` from the same cubic interpolation used by the
/// deterministic quadrature, so that both agree for deterministic inputs.
#[allow(clippy::too_many_arguments)]
fn walk(
    kern: &Kernel,
    eval: &Evaluation<'_>,
    f: &[f64],
    state: &StatePath,
    obs: &ObsPath,
    filt: &FilterTrajectory,
    opts: Options,
    mut node: impl FnMut(usize, f64),
) -> PathOutcome {
    let (d, m) = (kern.d, kern.m);
    let n = obs.grid.n_steps();
    let dt = obs.grid.dt();
    let field = eval.field.get();
    let (mut y, mut v, mut u) = (vec![0.0; d], vec![0.0; d * m], vec![0.0; m]);
    let zero_v = vec![0.0; d * m];
    let mut lag = Vec::with_capacity(n + 1);
    let mut value = Vec::with_capacity(n + 1);
    let mut initial = 0.0;
    let mut s = 0.0;
    for k in 0..=n {
        let pi = filt.pi.get(k);
        field.eval(k, pi, &mut y, &mut v);
        eval.policy.control(k, pi, &mut u);
        lag.push(kern.lagrangian(&y, if opts.drop_v_term { &zero_v } else { &v }, &u, pi));
        value.push(kern.terminal_value(&y, pi));
        if k == 0 {
            let centered = y[state.initial] - linalg::dot(pi, &y);
            initial = 0.5 * centered * centered;
            s = linalg::dot(pi, &y);
        }
        if k < n {
            s -= linalg::dot(&u, obs.increment(k));
        }
    }
    let mut running = 0.0;
    let mut mid = [0.0];
    node(0, value[0]);
    for k in 0..n {
        midpoint_cubic(&lag, 1, k, &mut mid);
        running += dt / 6.0 * (lag[k] + 4.0 * mid[0] + lag[k + 1]);
        node(k + 1, value[k + 1] - running);
    }
    let pi_t = filt.terminal();
    PathOutcome {
        initial,
        running,
        s_t: s,
        f_x: f[state.terminal()],
        pi_f: linalg::dot(pi_t, f),
        terminal_value: kern.terminal_value(f, pi_t),
    }
}

/// Outcomes of several evaluations on every path of `source`, sharing the
/// simulated and filtered paths.
pub(crate) fn outcomes<S: PathSource, E: Executor>(
    evals: &[Evaluation<'_>],
    f: &[f64],
    source: &S,
    scheme: Scheme,
    opts: Options,
    exec: &E,
) -> Result<Vec<Vec<PathOutcome>>> {
    if source.is_empty() {
        return Err(Error::EmptyBundle);
    }
    let kern = Kernel::new(source.model());
    let rows = exec.map_indexed(source.len(), |i| {
        let (state, obs, filt) = source.filtered(i, scheme)?;
        Ok(evals.iter().map(|e| walk(&kern, e, f, &state, &obs, &filt, opts, |_, _| {})).collect::<Vec<_>>())
    });
    transpose(rows, evals.len())
}

fn transpose(rows: Vec<Result<Vec<PathOutcome>>>, k: usize) -> Result<Vec<Vec<PathOutcome>>> {
    let mut out: Vec<Vec<PathOutcome>> = (0..k).map(|_| Vec::with_capacity(rows.len())).collect();
    for r in rows {
        for (j, o) in r?.into_iter().enumerate() {
            out[j].push(o);
        }
    }
    Ok(out)
}

fn check_f(model: &FiniteModel, f: &[f64]) -> Result<()> {
    if f.len() != model.d() {
        return Err(Error::dim("f must have d entries"));
    }
    Ok(())
}

/// Monte Carlo dual cost `J(U)`. Deterministic policies get their `(Y, V)`
/// from the backward ODE when `field` is `None`; others require a field.
#[allow(non_snake_case)]
pub fn cost_J<S: PathSource, E: Executor>(
    policy: &ControlPolicy,
    field: Option<&dyn DualField>,
    f: &[f64],
    source: &S,
    scheme: Scheme,
    exec: &E,
) -> Result<CostReport> {
    let model = source.model();
    check_f(model, f)?;
    let eval = Evaluation::new(model, source.grid(), policy, field, f)?;
    let out = outcomes(core::slice::from_ref(&eval), f, source, scheme, Options::default(), exec)?;
    let rows = &out[0];
    let js: Vec<f64> = rows.iter().map(PathOutcome::j).collect();
    let init: Vec<f64> = rows.iter().map(|o| o.initial).collect();
    let run: Vec<f64> = rows.iter().map(|o| o.running).collect();
    let closed_form = match (policy.as_schedule(), field) {
        (Some((grid, u)), None) => {
            let y = super::bsde_solve_deterministic(model, grid, u, f)?;
            let (a, b) = deterministic_cost(model, grid, u, &y)?;
            Some(a + b)
        }
        _ => None,
    };
    Ok(CostReport {
        j: MeanSe::of(&js),
        initial: MeanSe::of(&init),
        running: MeanSe::of(&run),
        closed_form,
    })
}

/// `S_k = π₀ᵀY₀ − Σ_{j<k} U_jᵀΔZ_j` with the policy evaluated along
/// `filter`.
#[allow(non_snake_case)]
pub fn estimator_S(policy: &ControlPolicy, y0: &[f64], obs: &ObsPath, filter: &FilterTrajectory) -> Result<Vec<f64>> {
    policy.check_grid(&obs.grid)?;
    if filter.pi.len() != obs.grid.n_steps() + 1 {
        return Err(Error::GridMismatch);
    }
    let n = obs.grid.n_steps();
    let mut u = vec![0.0; policy.m()];
    let mut s = Vec::with_capacity(n + 1);
    let mut acc = linalg::dot(filter.pi.get(0), y0);
    s.push(acc);
    for k in 0..n {
        policy.control(k, filter.pi.get(k), &mut u);
        acc -= linalg::dot(&u, obs.increment(k));
        s.push(acc);
    }
    Ok(s)
}

/// Both sides of `J(U) = ½E|S_T − fᵀX_T|²` on `source` and on the same
/// paths observed at twice the step.
pub fn duality_gap<S: PathSource, E: Executor>(
    policy: &ControlPolicy,
    field: Option<&dyn DualField>,
    f: &[f64],
    source: &S,
    scheme: Scheme,
    exec: &E,
) -> Result<GapReport> {
    let model = source.model();
    check_f(model, f)?;
    let eval = Evaluation::new(model, source.grid(), policy, field, f)?;
    let mut r = duality_gaps_with(core::slice::from_ref(&eval), f, source, scheme, Options::default(), exec)?;
    Ok(r.remove(0))
}

/// [`duality_gap`] for several policies on shared simulated and filtered
/// paths.
pub fn duality_gaps<S: PathSource, E: Executor>(
    policies: &[(&ControlPolicy, Option<&dyn DualField>)],
    f: &[f64],
    source: &S,
    scheme: Scheme,
    exec: &E,
) -> Result<Vec<GapReport>> {
    let evals = evaluations(source, policies, f)?;
    duality_gaps_with(&evals, f, source, scheme, Options::default(), exec)
}

/// Per-path outcomes of several policies on shared paths, indexed
/// `[policy][path]`.
pub fn path_outcomes<S: PathSource, E: Executor>(
    policies: &[(&ControlPolicy, Option<&dyn DualField>)],
    f: &[f64],
    source: &S,
    scheme: Scheme,
    exec: &E,
) -> Result<Vec<Vec<PathOutcome>>> {
    let evals = evaluations(source, policies, f)?;
    outcomes(&evals, f, source, scheme, Options::default(), exec)
}

fn evaluations<'a, S: PathSource>(
    source: &S,
    policies: &[(&ControlPolicy, Option<&'a dyn DualField>)],
    f: &[f64],
) -> Result<Vec<Evaluation<'a>>> {
    let model = source.model();
    check_f(model, f)?;
    policies
        .iter()
        .map(|(p, fd)| Evaluation::new(model, source.grid(), p, *fd, f))
        .collect()
}

pub(crate) fn duality_gaps_with<S: PathSource, E: Executor>(
    evals: &[Evaluation<'_>],
    f: &[f64],
    source: &S,
    scheme: Scheme,
    opts: Options,
    exec: &E,
) -> Result<Vec<GapReport>> {
    if source.is_empty() {
        return Err(Error::EmptyBundle);
    }
    let coarse: Vec<Evaluation<'_>> = evals.iter().map(|e| e.coarsen(2)).collect::<Result<_>>()?;
    let model = source.model();
    let kern = Kernel::new(model);
    source.grid().coarsen(2)?;
    let rows = exec.map_indexed(source.len(), |i| {
        let (state, obs, filt) = source.filtered(i, scheme)?;
        let obs2 = obs.coarsen(2)?;
        let filt2 = wonham_filter_with(model, &obs2, scheme)?;
        let mut state2 = state.clone();
        state2.grid = obs2.grid;
        let mut row = Vec::with_capacity(2 * evals.len());
        for (e, c) in evals.iter().zip(&coarse) {
            row.push(walk(&kern, e, f, &state, &obs, &filt, opts, |_, _| {}));
            row.push(walk(&kern, c, f, &state2, &obs2, &filt2, opts, |_, _| {}));
        }
        Ok(row)
    });
    let cols = transpose(rows, 2 * evals.len())?;
    Ok((0..evals.len()).map(|j| gap_report(&cols[2 * j], &cols[2 * j + 1])).collect())
}

fn gap_report(fine: &[PathOutcome], coarse: &[PathOutcome]) -> GapReport {
    let g1: Vec<f64> = fine.iter().map(|o| o.j() - o.half_mse()).collect();
    let g2: Vec<f64> = coarse.iter().map(|o| o.j() - o.half_mse()).collect();
    let js: Vec<f64> = fine.iter().map(PathOutcome::j).collect();
    let hm: Vec<f64> = fine.iter().map(PathOutcome::half_mse).collect();
    let gap = MeanSe::of(&g1);
    let gap_coarse = MeanSe::of(&g2);
    let halves: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - 0.5 * b).collect();
    GapReport {
        j: MeanSe::of(&js),
        half_mse: MeanSe::of(&hm),
        gap,
        gap_coarse,
        allowance: (gap_coarse.mean - gap.mean).abs(),
        halving: MeanSe::of(&halves),
    }
}

/// `E[𝒱(f; π_T)] = E[½Σ_i π_T(i)(f_i − π_Tᵀf)²]`.
pub fn value_function<S: PathSource, E: Executor>(f: &[f64], source: &S, scheme: Scheme, exec: &E) -> Result<MeanSe> {
    check_f(source.model(), f)?;
    if source.is_empty() {
        return Err(Error::EmptyBundle);
    }
    let kern = Kernel::new(source.model());
    let vals = exec.map_indexed(source.len(), |i| {
        let (_, _, filt) = source.filtered(i, scheme)?;
        Ok(kern.terminal_value(f, filt.terminal()))
    });
    let vals = vals.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(MeanSe::of(&vals))
}

/// Paths per reduction chunk.
const CHUNK: usize = 256;

/// Mean curve of `M_k = 𝒱(Y_k; π_k) − ∫₀^{t_k} ℒ dt` and the average
/// per-path linear trend.
pub fn martingale_diagnostic<S: PathSource, E: Executor>(
    policy: &ControlPolicy,
    field: Option<&dyn DualField>,
    f: &[f64],
    source: &S,
    scheme: Scheme,
    exec: &E,
) -> Result<MartingaleReport> {
    let model = source.model();
    check_f(model, f)?;
    if source.is_empty() {
        return Err(Error::EmptyBundle);
    }
    let eval = Evaluation::new(model, source.grid(), policy, field, f)?;
    let kern = Kernel::new(model);
    let times = source.grid().nodes();
    let n1 = times.len();
    let n_chunks = source.len().div_ceil(CHUNK);
    let parts = exec.map_indexed(n_chunks, |c| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut sum = vec![0.0; n1];
        let mut sq = vec![0.0; n1];
        let mut slopes = Vec::with_capacity(CHUNK);
        let mut curve = vec![0.0; n1];
        for i in c * CHUNK..((c + 1) * CHUNK).min(source.len()) {
            let (state, obs, filt) = source.filtered(i, scheme)?;
            walk(&kern, &eval, f, &state, &obs, &filt, Options::default(), |k, mk| curve[k] = mk);
            for k in 0..n1 {
                sum[k] += curve[k];
                sq[k] += curve[k] * curve[k];
            }
            slopes.push(slope(&times, &curve));
        }
        Ok((sum, sq, slopes))
    });
    let n = source.len() as f64;
    let mut sum = vec![0.0; n1];
    let mut sq = vec![0.0; n1];
    let mut slopes = Vec::with_capacity(source.len());
    for p in parts {
        let (s, q, b) = p?;
        for k in 0..n1 {
            sum[k] += s[k];
            sq[k] += q[k];
        }
        slopes.extend(b);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = (0..n1)
        .map(|k| {
            let var = (sq[k] - n * mean[k] * mean[k]).max(0.0) / (n - 1.0).max(1.0);
            (var / n).sqrt()
        })
        .collect();
    Ok(MartingaleReport {
        times,
        mean,
        se,
        trend: MeanSe::of(&slopes),
    })
}
