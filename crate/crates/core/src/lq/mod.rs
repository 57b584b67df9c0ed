//! Deterministic linear-quadratic duals.
//!
//! For the finite chain, restricting the dual control to deterministic
//! schedules (`V = 0`) leaves a deterministic LQ problem whose Riccati
//! equation is driven by the marginal law `ρ_t = exp(Aᵀt)π₀`. For linear
//! Gaussian models the same construction reproduces the Kalman-Bucy filter.
//!
//! Schedules live at grid nodes; wherever an ODE or a quadrature needs a
//! value at an interval midpoint it uses four-point cubic interpolation, so
//! all quantities here are fourth-order accurate in `dt`.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::algebra::Kernel;
use crate::error::{Error, Result};
use crate::filters::kalman_riccati;
use crate::grid::{MatPath, TimeGrid, VecPath};
use crate::linalg;
use crate::model::{FiniteModel, LinearGaussianModel};
use crate::ode::{midpoint_cubic, Rk4};
use crate::sim::ObsPath;

const PSD_TOL: f64 = 1e-9;

/// `ρ_t = exp(Aᵀt)π₀` and `E[Q(X_t)] = ρ_t(Q)` on the grid.
pub fn marginal_moments(model: &FiniteModel, grid: &TimeGrid) -> (VecPath, MatPath) {
    let kern = Kernel::new(model);
    let d = kern.d;
    let rho = marginal_law(&kern, model.prior().as_slice(), grid);
    let mut eq = MatPath::with_capacity(rho.len(), d, d);
    let mut e = vec![0.0; d];
    let mut col = vec![0.0; d];
    let mut q = vec![0.0; d * d];
    for p in rho.iter() {
        for j in 0..d {
            e.iter_mut().enumerate().for_each(|(i, x)| *x = if i == j { 1.0 } else { 0.0 });
            kern.expected_covariation_mul(p, &e, &mut col);
            for i in 0..d {
                q[i * d + j] = col[i];
            }
        }
        eq.push(&q);
    }
    (rho, eq)
}

fn marginal_law(kern: &Kernel, prior: &[f64], grid: &TimeGrid) -> VecPath {
    let d = kern.d;
    let mut rho = prior.to_vec();
    let mut out = VecPath::with_capacity(grid.n_steps() + 1, d);
    out.push(&rho);
    let mut rk = Rk4::new(d);
    for k in 0..grid.n_steps() {
        rk.step(|_, x, o| kern.a_t_mul(x, o), grid.t(k), &mut rho, grid.dt());
        out.push(&rho);
    }
    out
}

/// Riccati path of the deterministic dual,
/// `dΣ̄/dt = Σ̄A + AᵀΣ̄ − Σ̄HR⁻¹HᵀΣ̄ + ρ_t(Q)`, `Σ̄₀ = diag(π₀) − π₀π₀ᵀ`.
///
/// `ρ` and `Σ̄` are integrated jointly by RK4.
pub fn dre_forward(model: &FiniteModel, grid: &TimeGrid) -> Result<MatPath> {
    let kern = Kernel::new(model);
    let (d, m) = (kern.d, kern.m);
    let mut x = vec![0.0; d + d * d];
    x[..d].copy_from_slice(model.prior().as_slice());
    kern.covariance_into(model.prior().as_slice(), &mut x[d..]);
    let mut out = MatPath::with_capacity(grid.n_steps() + 1, d, d);
    out.push(&x[d..]);
    let mut rk = Rk4::new(x.len());
    let mut e = vec![0.0; d];
    let mut col = vec![0.0; d];
    let mut sh = vec![0.0; d * m];
    let mut shr = vec![0.0; d * m];
    let field = |x: &[f64], o: &mut [f64], e: &mut [f64], col: &mut [f64], sh: &mut [f64], shr: &mut [f64]| {
        let (rho, s) = x.split_at(d);
        kern.a_t_mul(rho, &mut o[..d]);
        let ds = &mut o[d..];
        for i in 0..d {
            for c in 0..m {
                sh[i * m + c] = (0..d).map(|j| s[i * d + j] * kern.h[j * m + c]).sum();
                shr[i * m + c] = (0..d).map(|j| s[i * d + j] * kern.h_rinv[j * m + c]).sum();
            }
        }
        for j in 0..d {
            e.iter_mut().enumerate().for_each(|(i, v)| *v = if i == j { 1.0 } else { 0.0 });
            kern.expected_covariation_mul(rho, e, col);
            for i in 0..d {
                let mut v = col[i];
                for k in 0..d {
                    v += s[i * d + k] * kern.a[k * d + j] + kern.a[k * d + i] * s[k * d + j];
                }
                for c in 0..m {
                    v -= shr[i * m + c] * sh[j * m + c];
                }
                ds[i * d + j] = v;
            }
        }
    };
    for k in 0..grid.n_steps() {
        rk.step(|_, x, o| field(x, o, &mut e, &mut col, &mut sh, &mut shr), grid.t(k), &mut x, grid.dt());
        linalg::symmetrize_slice(&mut x[d..], d);
        let sm = linalg::from_row_major(d, d, &x[d..]);
        let min_eig = linalg::min_eigenvalue(&sm);
        if !(min_eig >= -PSD_TOL * sm.amax().max(1.0)) {
            return Err(Error::RiccatiBlowUp { step: k + 1, min_eig });
        }
        out.push(&x[d..]);
    }
    Ok(out)
}

/// Solution of a deterministic LQ dual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqSolution {
    pub grid: TimeGrid,
    /// Riccati path, row-major `d x d` per node.
    pub sigma_bar: Vec<Vec<f64>>,
    /// Backward costate `y_t`, with `y_T = f`.
    pub y: Vec<Vec<f64>>,
    /// Optimal schedule `u_t`.
    pub u: Vec<Vec<f64>>,
    /// `½ y₀ᵀΣ₀y₀`.
    pub initial_term: f64,
    /// `∫ (½uᵀRu + ½yᵀρ(Q)y) dt`.
    pub running_term: f64,
    pub value: f64,
}

impl LqSolution {
    pub fn schedule(&self) -> VecPath {
        let m = self.u.first().map_or(0, |u| u.len());
        let mut p = VecPath::with_capacity(self.u.len(), m);
        self.u.iter().for_each(|u| p.push(u));
        p
    }

    pub fn y0(&self) -> &[f64] {
        &self.y[0]
    }
}

/// Backward RK4 for `dy/dt = −M_t y`, `y_T = f`, with `M` given at the
/// grid nodes (row-major) and cubic-interpolated at midpoints.
fn backward_linear(mats: &MatPath, f: &[f64], grid: &TimeGrid) -> VecPath {
    let d = f.len();
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut nodes = vec![vec![0.0; d]; n + 1];
    nodes[n].copy_from_slice(f);
    let mut y = f.to_vec();
    let mut mid = vec![0.0; d * d];
    let mut rk = Rk4::new(d);
    for k in (0..n).rev() {
        midpoint_cubic(mats.as_flat(), d * d, k, &mut mid);
        let (m0, m1) = (mats.get(k), mats.get(k + 1));
        // reversed time s = t_{k+1} − t, so dy/ds = M y
        rk.step(
            |s, x, o| {
                let mm: &[f64] = if s == 0.0 {
                    m1
                } else if (s - dt).abs() < 0.25 * dt {
                    m0
                } else {
                    &mid
                };
                linalg::mat_vec(mm, d, d, x, o);
            },
            0.0,
            &mut y,
            dt,
        );
        nodes[k].copy_from_slice(&y);
    }
    let mut out = VecPath::with_capacity(n + 1, d);
    nodes.iter().for_each(|v| out.push(v));
    out
}

/// Deterministic dual cost of a schedule `u` with costate `y` (both on the
/// grid): `½ y₀ᵀΣ₀y₀ + ∫ (½uᵀRu + ½yᵀρ(Q)y) dt`, Simpson per interval with
/// cubic midpoint values. Returns `(initial term, running term)`.
pub fn deterministic_cost(model: &FiniteModel, grid: &TimeGrid, u: &VecPath, y: &VecPath) -> Result<(f64, f64)> {
    let kern = Kernel::new(model);
    let (d, m) = (kern.d, kern.m);
    let n = grid.n_steps();
    if u.len() != n + 1 || y.len() != n + 1 || u.dim() != m || y.dim() != d {
        return Err(Error::GridMismatch);
    }
    let rho = marginal_law(&kern, model.prior().as_slice(), grid);
    let density = |uu: &[f64], yy: &[f64], rr: &[f64]| 0.5 * kern.r_norm2(uu) + 0.5 * kern.quad_variation(yy, rr);
    let (mut um, mut ym, mut rm) = (vec![0.0; m], vec![0.0; d], vec![0.0; d]);
    let mut running = 0.0;
    for k in 0..n {
        midpoint_cubic(u.as_flat(), m, k, &mut um);
        midpoint_cubic(y.as_flat(), d, k, &mut ym);
        midpoint_cubic(rho.as_flat(), d, k, &mut rm);
        let a = density(u.get(k), y.get(k), rho.get(k));
        let b = density(&um, &ym, &rm);
        let c = density(u.get(k + 1), y.get(k + 1), rho.get(k + 1));
        running += grid.dt() / 6.0 * (a + 4.0 * b + c);
    }
    let initial = kern.terminal_value(y.get(0), model.prior().as_slice());
    Ok((initial, running))
}

/// Optimal deterministic dual for the chain: `u = −R⁻¹HᵀΣ̄y`,
/// `dy/dt = (−A + HR⁻¹HᵀΣ̄)y`, `y_T = f`.
pub fn lq_solve(model: &FiniteModel, f: &[f64], grid: &TimeGrid) -> Result<LqSolution> {
    let d = model.d();
    let m = model.m();
    if f.len() != d {
        return Err(Error::dim("f must have d entries"));
    }
    if (grid.horizon() - model.horizon()).abs() > 1e-12 * model.horizon() {
        return Err(Error::GridMismatch);
    }
    let sigma = dre_forward(model, grid)?;
    let hrh = model.h() * model.r_inv() * model.h().transpose();
    let mut mats = MatPath::with_capacity(sigma.len(), d, d);
    for k in 0..sigma.len() {
        // dy/dt = −(A − HR⁻¹HᵀΣ̄) y
        let mk = model.a() - &hrh * sigma.matrix(k);
        mats.push(&linalg::row_major(&mk));
    }
    let y = backward_linear(&mats, f, grid);
    let gain = model.r_inv() * model.h().transpose();
    let mut u = VecPath::with_capacity(y.len(), m);
    for k in 0..y.len() {
        let uk = -(&gain * sigma.matrix(k) * nalgebra::DVector::from_row_slice(y.get(k)));
        u.push(uk.as_slice());
    }
    let (initial_term, running_term) = deterministic_cost(model, grid, &u, &y)?;
    Ok(LqSolution {
        grid: *grid,
        sigma_bar: sigma.iter_rows(),
        y: y.iter().map(|v| v.to_vec()).collect(),
        u: u.iter().map(|v| v.to_vec()).collect(),
        initial_term,
        running_term,
        value: initial_term + running_term,
    })
}

/// Deterministic dual of a linear-Gaussian model (`H` is `m x d`):
/// `u = −R⁻¹HΣ̄y`, `dy/dt = −Aᵀy + HᵀR⁻¹HΣ̄y`, `y_T = f`, with `Σ̄` the
/// Kalman-Bucy covariance. The value uses `Q` in place of `ρ(Q)`.
pub fn lq_solve_lg(model: &LinearGaussianModel, f: &[f64], grid: &TimeGrid) -> Result<LqSolution> {
    let d = model.d();
    let m = model.m();
    if f.len() != d {
        return Err(Error::dim("f must have d entries"));
    }
    let sigma = kalman_riccati(model, grid)?;
    let hrh = model.h().transpose() * model.r_inv() * model.h();
    let mut mats = MatPath::with_capacity(sigma.len(), d, d);
    for k in 0..sigma.len() {
        let mk = model.a().transpose() - &hrh * sigma.matrix(k);
        mats.push(&linalg::row_major(&mk));
    }
    let y = backward_linear(&mats, f, grid);
    let gain = model.r_inv() * model.h();
    let mut u = VecPath::with_capacity(y.len(), m);
    for k in 0..y.len() {
        let uk = -(&gain * sigma.matrix(k) * nalgebra::DVector::from_row_slice(y.get(k)));
        u.push(uk.as_slice());
    }
    let r = model.r();
    let q = model.q();
    let density = |uu: &[f64], yy: &[f64]| {
        let uv = nalgebra::DVector::from_row_slice(uu);
        let yv = nalgebra::DVector::from_row_slice(yy);
        0.5 * (uv.transpose() * r * &uv)[(0, 0)] + 0.5 * (yv.transpose() * q * &yv)[(0, 0)]
    };
    let (mut um, mut ym) = (vec![0.0; m], vec![0.0; d]);
    let mut running = 0.0;
    for k in 0..grid.n_steps() {
        midpoint_cubic(u.as_flat(), m, k, &mut um);
        midpoint_cubic(y.as_flat(), d, k, &mut ym);
        running += grid.dt() / 6.0
            * (density(u.get(k), y.get(k)) + 4.0 * density(&um, &ym) + density(u.get(k + 1), y.get(k + 1)));
    }
    let y0 = nalgebra::DVector::from_row_slice(y.get(0));
    let initial = 0.5 * (y0.transpose() * model.sigma0() * &y0)[(0, 0)];
    Ok(LqSolution {
        grid: *grid,
        sigma_bar: sigma.iter_rows(),
        y: y.iter().map(|v| v.to_vec()).collect(),
        u: u.iter().map(|v| v.to_vec()).collect(),
        initial_term: initial,
        running_term: running,
        value: initial + running,
    })
}

/// Dual estimate of `fᵀX_T`: `S_T = y₀ᵀm₀ − ∫uᵀdZ`.
pub fn dual_estimator_lg(model: &LinearGaussianModel, f: &[f64], obs: &ObsPath) -> Result<f64> {
    let sol = lq_solve_lg(model, f, &obs.grid)?;
    Ok(estimate_with(&sol, model.m0().as_slice(), obs))
}

/// `y₀ᵀx₀ − ∫uᵀdZ` for a solved schedule. The integrand is deterministic,
/// so the integral is summed with the trapezoidal rule
/// `Σ_k ½(u_k + u_{k+1})ᵀΔZ_k`.
pub fn estimate_with(sol: &LqSolution, x0: &[f64], obs: &ObsPath) -> f64 {
    let mut s = linalg::dot(sol.y0(), x0);
    for k in 0..obs.grid.n_steps() {
        let dz = obs.increment(k);
        s -= 0.5 * (linalg::dot(&sol.u[k], dz) + linalg::dot(&sol.u[k + 1], dz));
    }
    s
}

/// Backward Riccati of the LQR problem `dx/ds = Fx + Gu`, cost
/// `½∫(xᵀQx + uᵀRu) ds + ½x_Sᵀ P_S x_S`:
/// `−dP/ds = FᵀP + PF + Q − PGR⁻¹GᵀP`. Returns `P` at `s_k`, `k = 0..n`.
pub fn lqr_riccati(
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    p_terminal: &DMatrix<f64>,
    grid: &TimeGrid,
) -> MatPath {
    let d = f.nrows();
    let n = grid.n_steps();
    let grg = g * r_inv * g.transpose();
    let mut p = linalg::row_major(p_terminal);
    let mut rows = vec![Vec::new(); n + 1];
    rows[n] = p.clone();
    let mut rk = Rk4::new(d * d);
    for k in (0..n).rev() {
        // integrate in τ = S − s so that dP/dτ = FᵀP + PF + Q − PGR⁻¹GᵀP
        rk.step(
            |_, x, o| {
                let pm = linalg::from_row_major(d, d, x);
                let dp = f.transpose() * &pm + &pm * f + q - &pm * &grg * &pm;
                o.copy_from_slice(&linalg::row_major(&dp));
            },
            grid.t(n - k - 1),
            &mut p,
            grid.dt(),
        );
        linalg::symmetrize_slice(&mut p, d);
        rows[k] = p.clone();
    }
    let mut out = MatPath::with_capacity(n + 1, d, d);
    rows.iter().for_each(|r| out.push(r));
    out
}

/// Largest entrywise deviation between the Kalman-Bucy covariance and the
/// LQR Riccati of the time-reversed dual (`F = Aᵀ`, `G = Hᵀ`, terminal
/// weight `Σ₀`), node by node.
pub fn riccati_duality_check(model: &LinearGaussianModel, grid: &TimeGrid) -> Result<f64> {
    let filter = kalman_riccati(model, grid)?;
    let control = lqr_riccati(
        &model.a().transpose(),
        &model.h().transpose(),
        model.q(),
        model.r_inv(),
        model.sigma0(),
        grid,
    );
    let n = grid.n_steps();
    let mut worst = 0.0f64;
    for k in 0..=n {
        // filter time t_k corresponds to control time s = T − t_k
        worst = worst.max(linalg::max_abs_diff(filter.get(k), control.get(n - k)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
