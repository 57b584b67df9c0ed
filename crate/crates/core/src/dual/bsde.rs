use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::policy::ControlPolicy;
use super::DualField;
use crate::algebra::Kernel;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::filters::{wonham_filter_with, FilterTrajectory};
use crate::grid::{TimeGrid, VecPath};
use crate::linalg;
use crate::model::FiniteModel;
use crate::ode::{midpoint_cubic, Rk4};
use crate::sde::Scheme;
use crate::sim::{ObsPath, PathSource, StatePath};
#[allow(unused_imports)]
use num_traits::Float;

/// Backward RK4 for `dY/dt = −(AY + Hu_t)`, `Y_T = f`, with the schedule
/// cubic-interpolated at interval midpoints. `V ≡ 0` for such schedules.
pub fn bsde_solve_deterministic(model: &FiniteModel, grid: &TimeGrid, u: &VecPath, f: &[f64]) -> Result<VecPath> {
    let kern = Kernel::new(model);
    let (d, m) = (kern.d, kern.m);
    let n = grid.n_steps();
    if f.len() != d {
        return Err(Error::dim("f must have d entries"));
    }
    if u.len() != n + 1 || u.dim() != m {
        return Err(Error::GridMismatch);
    }
    let dt = grid.dt();
    let mut rows = vec![vec![0.0; d]; n + 1];
    rows[n].copy_from_slice(f);
    let mut y = f.to_vec();
    let mut rk = Rk4::new(d);
    let mut umid = vec![0.0; m];
    let mut hu = vec![0.0; d];
    for k in (0..n).rev() {
        midpoint_cubic(u.as_flat(), m, k, &mut umid);
        let (u0, u1) = (u.get(k), u.get(k + 1));
        // reversed time s = t_{k+1} − t: dY/ds = AY + Hu
        rk.step(
            |s, x, o| {
                let uu: &[f64] = if s == 0.0 {
                    u1
                } else if (s - dt).abs() < 0.25 * dt {
                    u0
                } else {
                    &umid
                };
                kern.a_mul(x, o);
                linalg::mat_vec(&kern.h, d, m, uu, &mut hu);
                for i in 0..d {
                    o[i] += hu[i];
                }
            },
            0.0,
            &mut y,
            dt,
        );
        rows[k].copy_from_slice(&y);
    }
    let mut out = VecPath::with_capacity(n + 1, d);
    rows.iter().for_each(|r| out.push(r));
    Ok(out)
}

/// BSDE solution of a deterministic schedule: `Y` independent of `π`,
/// `V = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicField {
    pub y: VecPath,
    pub m: usize,
}

impl DeterministicField {
    pub fn new(model: &FiniteModel, policy: &ControlPolicy, f: &[f64]) -> Result<Self> {
        let (grid, u) = policy
            .as_schedule()
            .ok_or_else(|| Error::PolicyMismatch("deterministic field needs a schedule".into()))?;
        Ok(DeterministicField {
            y: bsde_solve_deterministic(model, grid, u, f)?,
            m: model.m(),
        })
    }
}

impl DualField for DeterministicField {
    fn d(&self) -> usize {
        self.y.dim()
    }

    fn m(&self) -> usize {
        self.m
    }

    fn eval(&self, k: usize, _pi: &[f64], y: &mut [f64], v: &mut [f64]) {
        y.copy_from_slice(self.y.get(k));
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Regression basis in `π`: a constant, the coordinates `π_1 … π_{d−1}`
/// (the last is implied by the simplex), and optionally all quadratic
/// monomials in those coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BasisSpec {
    #[serde(default)]
    pub quadratic: bool,
}

impl BasisSpec {
    pub fn affine() -> Self {
        BasisSpec { quadratic: false }
    }

    pub fn quadratic() -> Self {
        BasisSpec { quadratic: true }
    }

    /// Number of non-constant features.
    pub fn n_raw(&self, d: usize) -> usize {
        let l = d - 1;
        l + if self.quadratic { l * (l + 1) / 2 } else { 0 }
    }

    pub fn n_features(&self, d: usize) -> usize {
        1 + self.n_raw(d)
    }

    /// Non-constant features of `π`.
    pub fn raw(&self, pi: &[f64], out: &mut [f64]) {
        let l = pi.len() - 1;
        out[..l].copy_from_slice(&pi[..l]);
        if self.quadratic {
            let mut c = l;
            for i in 0..l {
                for j in i..l {
                    out[c] = pi[i] * pi[j];
                    c += 1;
                }
            }
        }
    }
}

/// Regression coefficients at one time node. Features are standardized
/// with `mean` and `scale`; a zero scale marks a feature that did not vary
/// across paths and was left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionStep {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `n_features x d`, row-major.
    pub y_coef: Vec<f64>,
    /// `n_features x (d·m)`, row-major.
    pub v_coef: Vec<f64>,
}

impl RegressionStep {
    fn constant(n_raw: usize, y: &[f64], v: &[f64]) -> Self {
        let (d, dm) = (y.len(), v.len());
        let mut y_coef = vec![0.0; (n_raw + 1) * d];
        let mut v_coef = vec![0.0; (n_raw + 1) * dm];
        y_coef[..d].copy_from_slice(y);
        v_coef[..dm].copy_from_slice(v);
        RegressionStep {
            mean: vec![0.0; n_raw],
            scale: vec![0.0; n_raw],
            y_coef,
            v_coef,
        }
    }

    fn standardize(&self, raw: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for j in 0..raw.len() {
            out[j + 1] = if self.scale[j] > 0.0 {
                (raw[j] - self.mean[j]) / self.scale[j]
            } else {
                0.0
            };
        }
    }
}

/// BSDE solution from least-squares Monte Carlo: `Ŷ(t_k, π)` and
/// `V̂(t_k, π)` linear in the basis at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionField {
    pub basis: BasisSpec,
    pub d: usize,
    pub m: usize,
    pub steps: Vec<RegressionStep>,
}

impl RegressionField {
    pub fn from_steps(basis: BasisSpec, d: usize, m: usize, steps: Vec<RegressionStep>) -> Result<Self> {
        let nf = basis.n_features(d);
        let ok = steps.iter().all(|s| {
            s.mean.len() == nf - 1 && s.scale.len() == nf - 1 && s.y_coef.len() == nf * d && s.v_coef.len() == nf * d * m
        });
        if !ok || steps.is_empty() {
            return Err(Error::dim("regression tables have inconsistent sizes"));
        }
        Ok(RegressionField { basis, d, m, steps })
    }
}

impl DualField for RegressionField {
    fn d(&self) -> usize {
        self.d
    }

    fn m(&self) -> usize {
        self.m
    }

    fn eval(&self, k: usize, pi: &[f64], y: &mut [f64], v: &mut [f64]) {
        let step = &self.steps[k];
        let nf = self.basis.n_features(self.d);
        let mut raw = vec![0.0; nf - 1];
        let mut x = vec![0.0; nf];
        self.basis.raw(pi, &mut raw);
        step.standardize(&raw, &mut x);
        let dm = self.d * self.m;
        for i in 0..self.d {
            y[i] = (0..nf).map(|j| x[j] * step.y_coef[j * self.d + i]).sum();
        }
        for i in 0..dm {
            v[i] = (0..nf).map(|j| x[j] * step.v_coef[j * dm + i]).sum();
        }
    }
}

/// Paths of a source together with their filter trajectories, kept in
/// memory for repeated backward regressions.
#[derive(Debug, Clone)]
pub struct FilteredBundle {
    pub model: FiniteModel,
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub states: Vec<StatePath>,
    pub obs: Vec<ObsPath>,
    pub filters: Vec<FilterTrajectory>,
}

impl FilteredBundle {
    pub fn new<S: PathSource, E: Executor>(source: &S, scheme: Scheme, exec: &E) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::EmptyBundle);
        }
        let model = source.model().clone();
        let rows = exec.map_indexed(source.len(), |i| {
            let (s, o) = source.path(i);
            wonham_filter_with(&model, &o, scheme).map(|f| (s, o, f))
        });
        let mut states = Vec::with_capacity(rows.len());
        let mut obs = Vec::with_capacity(rows.len());
        let mut filters = Vec::with_capacity(rows.len());
        for r in rows {
            let (s, o, f) = r?;
            states.push(s);
            obs.push(o);
            filters.push(f);
        }
        Ok(FilteredBundle {
            model,
            grid: *source.grid(),
            scheme,
            states,
            obs,
            filters,
        })
    }
}

impl PathSource for FilteredBundle {
    fn model(&self) -> &FiniteModel {
        &self.model
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn len(&self) -> usize {
        self.obs.len()
    }

    fn path(&self, i: usize) -> (StatePath, ObsPath) {
        (self.states[i].clone(), self.obs[i].clone())
    }

    fn filtered(&self, i: usize, scheme: Scheme) -> Result<(StatePath, ObsPath, FilterTrajectory)> {
        if scheme == self.scheme {
            Ok((self.states[i].clone(), self.obs[i].clone(), self.filters[i].clone()))
        } else {
            let (s, o) = self.path(i);
            let f = wonham_filter_with(&self.model, &o, scheme)?;
            Ok((s, o, f))
        }
    }
}

/// Relative spread below which a feature is treated as constant.
const SPREAD_TOL: f64 = 1e-9;

/// Least-squares Monte Carlo backward induction for the BSDE under a
/// policy.
///
/// At each node `V̂_k` regresses `(Y_{k+1} − Ȳ_k)ΔI_kᵀ/Δt`, where `Ȳ_k` is a
/// preliminary regression of `Y_{k+1}` (subtracting any function of `π_k`
/// leaves the conditional expectation unchanged and removes most of the
/// variance). `Ŷ_k` then regresses `Y_{k+1} + (AY_{k+1} + HU_k +
/// diag(HV̂_kᵀ) − V̂_kHᵀπ_k)Δt`.
pub fn bsde_solve_regression(
    policy: &ControlPolicy,
    f: &[f64],
    bundle: &FilteredBundle,
    basis: BasisSpec,
) -> Result<RegressionField> {
    let kern = Kernel::new(&bundle.model);
    let (d, m) = (kern.d, kern.m);
    if f.len() != d {
        return Err(Error::dim("f must have d entries"));
    }
    policy.check_grid(&bundle.grid)?;
    let n = bundle.grid.n_steps();
    let dt = bundle.grid.dt();
    let np = bundle.filters.len();
    let n_raw = basis.n_raw(d);
    let nf = n_raw + 1;
    let dm = d * m;
    let mut steps: Vec<Option<RegressionStep>> = vec![None; n + 1];
    let mut y_next: Vec<f64> = (0..np).flat_map(|_| f.iter().copied()).collect();
    let mut raw = vec![0.0; np * n_raw];
    let mut u = vec![0.0; m];
    let mut drv = vec![0.0; d];
    let mut resp_v = vec![0.0; np * dm];
    let mut resp_y = vec![0.0; np * d];
    for k in (0..n).rev() {
        for (i, filt) in bundle.filters.iter().enumerate() {
            basis.raw(filt.pi.get(k), &mut raw[i * n_raw..(i + 1) * n_raw]);
        }
        let mut mean = vec![0.0; n_raw];
        let mut scale = vec![0.0; n_raw];
        for j in 0..n_raw {
            let mu = (0..np).map(|i| raw[i * n_raw + j]).sum::<f64>() / np as f64;
            let var = (0..np).map(|i| (raw[i * n_raw + j] - mu).powi(2)).sum::<f64>() / np as f64;
            mean[j] = mu;
            let sd = var.sqrt();
            scale[j] = if sd > SPREAD_TOL * mu.abs().max(1.0) { sd } else { 0.0 };
        }
        let active: Vec<usize> = (0..n_raw).filter(|&j| scale[j] > 0.0).collect();
        let p = active.len() + 1;
        let mut x = vec![0.0; np * p];
        for i in 0..np {
            x[i * p] = 1.0;
            for (c, &j) in active.iter().enumerate() {
                x[i * p + c + 1] = (raw[i * n_raw + j] - mean[j]) / scale[j];
            }
        }
        let fit = |coef: &[f64], q: usize, i: usize, c: usize| (0..p).map(|a| x[i * p + a] * coef[a * q + c]).sum::<f64>();

        let prelim = linalg::least_squares(&x, np, p, &y_next, d).ok_or(Error::RankDeficient { step: k })?;
        for (i, filt) in bundle.filters.iter().enumerate() {
            let di = filt.innovation(k);
            for a in 0..d {
                let centered = y_next[i * d + a] - fit(&prelim, d, i, a);
                for c in 0..m {
                    resp_v[i * dm + a * m + c] = centered * di[c] / dt;
                }
            }
        }
        let v_coef = linalg::least_squares(&x, np, p, &resp_v, dm).ok_or(Error::RankDeficient { step: k })?;
        let mut v_hat = vec![0.0; dm];
        for (i, filt) in bundle.filters.iter().enumerate() {
            let pi = filt.pi.get(k);
            for c in 0..dm {
                v_hat[c] = fit(&v_coef, dm, i, c);
            }
            policy.control(k, pi, &mut u);
            let yn = &y_next[i * d..(i + 1) * d];
            kern.bsde_driver(yn, &v_hat, &u, pi, &mut drv);
            for a in 0..d {
                resp_y[i * d + a] = yn[a] + drv[a] * dt;
            }
        }
        let y_coef = linalg::least_squares(&x, np, p, &resp_y, d).ok_or(Error::RankDeficient { step: k })?;
        for i in 0..np {
            for a in 0..d {
                y_next[i * d + a] = fit(&y_coef, d, i, a);
            }
        }
        let expand = |coef: &[f64], q: usize| {
            let mut full = vec![0.0; nf * q];
            full[..q].copy_from_slice(&coef[..q]);
            for (c, &j) in active.iter().enumerate() {
                full[(j + 1) * q..(j + 2) * q].copy_from_slice(&coef[(c + 1) * q..(c + 2) * q]);
            }
            full
        };
        steps[k] = Some(RegressionStep {
            mean,
            scale,
            y_coef: expand(&y_coef, d),
            v_coef: expand(&v_coef, dm),
        });
    }
    // terminal node: Y = f exactly; V carried over from the last interval
    let mut last = RegressionStep::constant(n_raw, f, &vec![0.0; dm]);
    if let Some(prev) = steps[n - 1].as_ref() {
        last.mean = prev.mean.clone();
        last.scale = prev.scale.clone();
        last.v_coef = prev.v_coef.clone();
    }
    steps[n] = Some(last);
    Ok(RegressionField {
        basis,
        d,
        m,
        steps: steps.into_iter().map(|s| s.expect("every node filled")).collect(),
    })
}
