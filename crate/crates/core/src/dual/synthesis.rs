use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use nalgebra::{DMatrix, DVector};

use super::DualField;
use crate::algebra::{self, Kernel};
use crate::error::{Error, Result};
use crate::filters::{right_mul_lower, whiten, wonham_filter, FilterTrajectory};
use crate::grid::{MatPath, TimeGrid, VecPath};
use crate::linalg;
use crate::model::FiniteModel;
use crate::ode::Rk4;
use crate::sde::{Scheme, Stepper};
use crate::sim::ObsPath;
#[allow(unused_imports)]
use num_traits::Float;

/// `U* = −R⁻¹HᵀΣ(π)Y − Vᵀπ`.
pub fn optimal_control_law(y: &DVector<f64>, v: &DMatrix<f64>, pi: &DVector<f64>, model: &FiniteModel) -> DVector<f64> {
    let sigma = algebra::covariance_of(pi);
    -(model.r_inv() * model.h().transpose() * sigma * y) - v.transpose() * pi
}

/// Optimal BSDE solution for a two-state chain as a function of
/// `p = π(1)`.
///
/// Along the optimal trajectory `Y_t = y(t, π_t)` where `y` solves the
/// linear backward equation
///
/// ```text
/// ∂_t y + b ∂_p y + ½ q ∂²_p y + (Ay + HU* + diag(HVᵀ) − VHᵀπ) = 0,   y(T, ·) = f
/// b = (Aᵀπ)₁,  g = p(1 − p)(H₁ − H₂)R⁻¹,  q = gRgᵀ,  V = ∂_p y ⊗ g
/// ```
///
/// solved by the method of lines (second-order differences, one-sided at
/// the endpoints where `q` vanishes and the drift points inward) with
/// explicit RK4 substeps. Values are stored at every node of the time grid.
#[derive(Debug, Clone)]
pub struct OptimalField {
    grid: TimeGrid,
    n_p: usize,
    m: usize,
    /// `(H₁ − H₂)R⁻¹`.
    hd: Vec<f64>,
    /// `y` and `∂_p y`, indexed `[k][node][i]`.
    y: Vec<f64>,
    dy: Vec<f64>,
}

struct Stencil<'a> {
    kern: &'a Kernel,
    hd: &'a [f64],
    hrh: f64,
    n_p: usize,
    dp: f64,
}

impl Stencil<'_> {
    fn p(&self, j: usize) -> f64 {
        j as f64 * self.dp
    }

    fn derivative(&self, y: &[f64], out: &mut [f64]) {
        let (n, h) = (self.n_p, self.dp);
        for i in 0..2 {
            let at = |j: usize| y[j * 2 + i];
            out[i] = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
            out[(n - 1) * 2 + i] = (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h);
            for j in 1..n - 1 {
                out[j * 2 + i] = (at(j + 1) - at(j - 1)) / (2.0 * h);
            }
        }
    }

    /// `∂_τ y` with `τ = T − t`.
    fn rhs(&self, y: &[f64], out: &mut [f64], dy: &mut [f64]) {
        let (n, h, m) = (self.n_p, self.dp, self.kern.m);
        self.derivative(y, dy);
        let mut v = vec![0.0; 2 * m];
        let mut u = vec![0.0; m];
        let mut drv = [0.0; 2];
        let mut pi = [0.0; 2];
        let mut bvec = [0.0; 2];
        for j in 0..n {
            let p = self.p(j);
            pi[0] = p;
            pi[1] = 1.0 - p;
            let w = p * (1.0 - p);
            self.kern.a_t_mul(&pi, &mut bvec);
            let b = bvec[0];
            let q = w * w * self.hrh;
            for i in 0..2 {
                for c in 0..m {
                    v[i * m + c] = dy[j * 2 + i] * w * self.hd[c];
                }
            }
            let yj = &y[j * 2..j * 2 + 2];
            self.kern.optimal_control(yj, &v, &pi, &mut u);
            self.kern.bsde_driver(yj, &v, &u, &pi, &mut drv);
            for i in 0..2 {
                let second = if j == 0 || j == n - 1 {
                    0.0
                } else {
                    (y[(j + 1) * 2 + i] - 2.0 * y[j * 2 + i] + y[(j - 1) * 2 + i]) / (h * h)
                };
                out[j * 2 + i] = b * dy[j * 2 + i] + 0.5 * q * second + drv[i];
            }
        }
    }
}

impl OptimalField {
    pub fn solve(model: &FiniteModel, f: &[f64], grid: &TimeGrid, n_p: usize) -> Result<Self> {
        if model.d() != 2 {
            return Err(Error::Unsupported(format!(
                "optimal synthesis is implemented for two states, got {}",
                model.d()
            )));
        }
        if f.len() != 2 {
            return Err(Error::dim("f must have d entries"));
        }
        if n_p < 5 {
            return Err(Error::param("n_p", "need at least 5 nodes in p"));
        }
        let kern = Kernel::new(model);
        let m = kern.m;
        let hd: Vec<f64> = (0..m).map(|c| kern.h_rinv[c] - kern.h_rinv[m + c]).collect();
        let hdiff: Vec<f64> = (0..m).map(|c| kern.h[c] - kern.h[m + c]).collect();
        let hrh = linalg::dot(&hd, &hdiff);
        let dp = 1.0 / (n_p - 1) as f64;
        let st = Stencil {
            kern: &kern,
            hd: &hd,
            hrh,
            n_p,
            dp,
        };
        let n = grid.n_steps();
        let width = n_p * 2;
        let mut y = vec![0.0; (n + 1) * width];
        let mut dy = vec![0.0; (n + 1) * width];
        let mut cur: Vec<f64> = (0..n_p).flat_map(|_| f.iter().copied()).collect();
        y[n * width..].copy_from_slice(&cur);
        let mut deriv = vec![0.0; width];
        st.derivative(&cur, &mut deriv);
        dy[n * width..].copy_from_slice(&deriv);

        // explicit stability bound for RK4 (≈ 2.78 on the negative axis)
        let amax = (0..2).map(|i| kern.a[i * 2 + i].abs()).fold(0.0, f64::max);
        let gmax = 0.0625 * hd.iter().map(|x| x.abs()).sum::<f64>() * hdiff.iter().map(|x| x.abs()).sum::<f64>();
        let lambda = 4.0 * 0.5 * 0.0625 * hrh / (dp * dp)
            + (2.0 * amax + gmax) / dp
            + 4.0 * amax
            + 2.0 * hrh;
        let sub = ((grid.dt() * lambda / 2.0).ceil() as usize).max(1);
        let h = grid.dt() / sub as f64;
        let mut rk = Rk4::new(width);
        let mut scratch = vec![0.0; width];
        for k in (0..n).rev() {
            for _ in 0..sub {
                rk.step(|_, x, o| st.rhs(x, o, &mut scratch), 0.0, &mut cur, h);
            }
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::RiccatiBlowUp { step: k, min_eig: f64::NAN });
            }
            y[k * width..(k + 1) * width].copy_from_slice(&cur);
            st.derivative(&cur, &mut deriv);
            dy[k * width..(k + 1) * width].copy_from_slice(&deriv);
        }
        Ok(OptimalField {
            grid: *grid,
            n_p,
            m,
            hd,
            y,
            dy,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Cubic Lagrange interpolation in `p` of a stored table.
    fn interp(&self, table: &[f64], k: usize, p: f64, out: &mut [f64; 2]) {
        let n = self.n_p;
        let x = p.clamp(0.0, 1.0) * (n - 1) as f64;
        let j = (x.floor() as usize).min(n - 2);
        let base = j.saturating_sub(1).min(n - 4);
        let s = x - base as f64;
        let w = [
            -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0,
            s * (s - 2.0) * (s - 3.0) / 2.0,
            -s * (s - 1.0) * (s - 3.0) / 2.0,
            s * (s - 1.0) * (s - 2.0) / 6.0,
        ];
        let row = &table[k * n * 2..(k + 1) * n * 2];
        for i in 0..2 {
            out[i] = (0..4).map(|a| w[a] * row[(base + a) * 2 + i]).sum();
        }
    }
}

impl DualField for OptimalField {
    fn d(&self) -> usize {
        2
    }

    fn m(&self) -> usize {
        self.m
    }

    fn eval(&self, k: usize, pi: &[f64], y: &mut [f64], v: &mut [f64]) {
        let p = pi[0].clamp(0.0, 1.0);
        let mut yy = [0.0; 2];
        let mut dd = [0.0; 2];
        self.interp(&self.y, k, p, &mut yy);
        self.interp(&self.dy, k, p, &mut dd);
        y[..2].copy_from_slice(&yy);
        let w = p * (1.0 - p);
        for i in 0..2 {
            for c in 0..self.m {
                v[i * self.m + c] = dd[i] * w * self.hd[c];
            }
        }
    }
}

/// Dual quantities along one observation path.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTrajectory {
    pub grid: TimeGrid,
    pub y: VecPath,
    pub v: MatPath,
    pub u: VecPath,
    /// Co-state.
    pub p: VecPath,
    /// Running estimator `S_k = π₀ᵀY₀ − Σ_{j<k} U_jᵀΔZ_j`.
    pub s: Vec<f64>,
}

/// Forward co-state by Euler–Maruyama,
/// `dP = (AᵀP + π(Q)Y)dt + (diag(P) − Pπᵀ)HR⁻¹dI + (πUᵀ + diag(π)V)dI`,
/// from `P₀ = Σ₀Y₀`.
pub fn costate_forward(
    y: &VecPath,
    v: &MatPath,
    u: &VecPath,
    filter: &FilterTrajectory,
    model: &FiniteModel,
) -> Result<VecPath> {
    let kern = Kernel::new(model);
    let (d, m) = (kern.d, kern.m);
    let n = filter.grid.n_steps();
    if y.len() != n + 1 || v.len() != n + 1 || u.len() != n + 1 {
        return Err(Error::GridMismatch);
    }
    let dt = filter.grid.dt();
    let mut p = vec![0.0; d];
    let mut sig = vec![0.0; d * d];
    kern.covariance_into(filter.pi.get(0), &mut sig);
    linalg::mat_vec(&sig, d, d, y.get(0), &mut p);
    let mut out = VecPath::with_capacity(n + 1, d);
    out.push(&p);
    let mut drift = vec![0.0; d];
    let mut noise = vec![0.0; d];
    for k in 0..n {
        costate_coefficients(&kern, filter.pi.get(k), &p, y.get(k), v.get(k), u.get(k), filter.innovation(k), &mut drift, &mut noise);
        for i in 0..d {
            p[i] += drift[i] * dt + noise[i];
        }
        out.push(&p);
    }
    let _ = m;
    Ok(out)
}

/// Co-state drift and the noise term for innovation direction `e`.
#[allow(clippy::too_many_arguments)]
fn costate_coefficients(
    kern: &Kernel,
    pi: &[f64],
    p: &[f64],
    y: &[f64],
    v: &[f64],
    u: &[f64],
    e: &[f64],
    drift: &mut [f64],
    noise: &mut [f64],
) {
    let (d, m) = (kern.d, kern.m);
    kern.a_t_mul(p, drift);
    let mut qy = vec![0.0; d];
    kern.expected_covariation_mul(pi, y, &mut qy);
    for i in 0..d {
        drift[i] += qy[i];
    }
    // HR⁻¹e, Uᵀe, Ve
    let hre: Vec<f64> = (0..d).map(|j| (0..m).map(|c| kern.h_rinv[j * m + c] * e[c]).sum()).collect();
    let ue: f64 = (0..m).map(|c| u[c] * e[c]).sum();
    let pt_hre = linalg::dot(pi, &hre);
    for i in 0..d {
        let ve: f64 = (0..m).map(|c| v[i * m + c] * e[c]).sum();
        noise[i] = p[i] * hre[i] - p[i] * pt_hre + pi[i] * ue + pi[i] * ve;
    }
}

/// `sup_k ‖P_k − Σ(π_k)Y_k‖∞` along the optimal trajectory of `field`,
/// with the filter and the co-state advanced as one system.
pub fn costate_identity_error<F: DualField + ?Sized>(field: &F, model: &FiniteModel, obs: &ObsPath, scheme: Scheme) -> Result<f64> {
    let kern = Kernel::new(model);
    let (d, m) = (kern.d, kern.m);
    let n = obs.grid.n_steps();
    let dt = obs.grid.dt();
    let ns = 2 * d;
    let mut x = vec![0.0; ns];
    x[..d].copy_from_slice(model.prior().as_slice());
    let mut y = vec![0.0; d];
    let mut v = vec![0.0; d * m];
    let mut sig = vec![0.0; d * d];
    field.eval(0, &x[..d], &mut y, &mut v);
    kern.covariance_into(&x[..d], &mut sig);
    linalg::mat_vec(&sig, d, d, &y, &mut x[d..]);
    let mut stepper = Stepper::new(ns, m);
    let (mut hp, mut di, mut dw) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let scratch = RefCell::new(JointScratch::new(d, m));
    let mut sy = vec![0.0; d];
    let mut worst = 0.0f64;
    for k in 0..n {
        kern.h_t_mul(&x[..d], &mut hp);
        for c in 0..m {
            di[c] = obs.dz[k * m + c] - hp[c] * dt;
        }
        whiten(&kern.r_chol, m, &di, &mut dw);
        stepper.step(
            scheme,
            &mut x,
            dt,
            &dw,
            |s, o| scratch.borrow_mut().drift(&kern, field, k, s, o),
            |s, o| scratch.borrow_mut().diffusion(&kern, field, k, s, o),
        );
        // keep the filter part on the simplex
        let total: f64 = x[..d].iter().map(|v| v.max(0.0)).sum();
        for i in 0..d {
            x[i] = x[i].max(0.0) / total;
        }
        field.eval(k + 1, &x[..d], &mut y, &mut v);
        kern.covariance_into(&x[..d], &mut sig);
        linalg::mat_vec(&sig, d, d, &y, &mut sy);
        worst = worst.max(linalg::max_abs_diff(&x[d..], &sy));
    }
    Ok(worst)
}

/// Buffers for the joint `(π, P)` coefficients.
struct JointScratch {
    y: Vec<f64>,
    v: Vec<f64>,
    u: Vec<f64>,
    e: Vec<f64>,
    gain: Vec<f64>,
    gl: Vec<f64>,
    drift: Vec<f64>,
    noise: Vec<f64>,
}

impl JointScratch {
    fn new(d: usize, m: usize) -> Self {
        JointScratch {
            y: vec![0.0; d],
            v: vec![0.0; d * m],
            u: vec![0.0; m],
            e: vec![0.0; m],
            gain: vec![0.0; d * m],
            gl: vec![0.0; d * m],
            drift: vec![0.0; d],
            noise: vec![0.0; d],
        }
    }

    fn fields<F: DualField + ?Sized>(&mut self, kern: &Kernel, field: &F, k: usize, pi: &[f64]) {
        field.eval(k, pi, &mut self.y, &mut self.v);
        kern.optimal_control(&self.y, &self.v, pi, &mut self.u);
    }

    fn drift<F: DualField + ?Sized>(&mut self, kern: &Kernel, field: &F, k: usize, s: &[f64], o: &mut [f64]) {
        let d = kern.d;
        self.fields(kern, field, k, &s[..d]);
        kern.a_t_mul(&s[..d], &mut o[..d]);
        self.e.iter_mut().for_each(|e| *e = 0.0);
        costate_coefficients(kern, &s[..d], &s[d..], &self.y, &self.v, &self.u, &self.e, &mut self.drift, &mut self.noise);
        o[d..].copy_from_slice(&self.drift);
    }

    /// Columns are the responses to the whitened directions `L e_j`.
    fn diffusion<F: DualField + ?Sized>(&mut self, kern: &Kernel, field: &F, k: usize, s: &[f64], o: &mut [f64]) {
        let (d, m) = (kern.d, kern.m);
        self.fields(kern, field, k, &s[..d]);
        kern.gain_into(&s[..d], &mut self.gain);
        right_mul_lower(&self.gain, d, &kern.r_chol, m, &mut self.gl);
        for j in 0..m {
            for c in 0..m {
                self.e[c] = kern.r_chol[c * m + j];
            }
            costate_coefficients(kern, &s[..d], &s[d..], &self.y, &self.v, &self.u, &self.e, &mut self.drift, &mut self.noise);
            for i in 0..d {
                o[i * m + j] = self.gl[i * m + j];
                o[(d + i) * m + j] = self.noise[i];
            }
        }
    }
}

/// Optimal dual trajectory along a filtered path: `Y, V` from the field,
/// `U = U*`, the co-state by [`costate_forward`] and the running estimator.
pub fn synthesize<F: DualField + ?Sized>(field: &F, model: &FiniteModel, obs: &ObsPath, filter: &FilterTrajectory) -> Result<DualTrajectory> {
    let kern = Kernel::new(model);
    let (d, m) = (kern.d, kern.m);
    let n = obs.grid.n_steps();
    if filter.pi.len() != n + 1 {
        return Err(Error::GridMismatch);
    }
    let mut y = VecPath::with_capacity(n + 1, d);
    let mut v = MatPath::with_capacity(n + 1, d, m);
    let mut u = VecPath::with_capacity(n + 1, m);
    let (mut yk, mut vk, mut uk) = (vec![0.0; d], vec![0.0; d * m], vec![0.0; m]);
    for k in 0..=n {
        let pi = filter.pi.get(k);
        field.eval(k, pi, &mut yk, &mut vk);
        kern.optimal_control(&yk, &vk, pi, &mut uk);
        y.push(&yk);
        v.push(&vk);
        u.push(&uk);
    }
    let p = costate_forward(&y, &v, &u, filter, model)?;
    let mut s = Vec::with_capacity(n + 1);
    let mut acc = linalg::dot(filter.pi.get(0), y.get(0));
    s.push(acc);
    for k in 0..n {
        acc -= linalg::dot(u.get(k), obs.increment(k));
        s.push(acc);
    }
    Ok(DualTrajectory {
        grid: obs.grid,
        y,
        v,
        u,
        p,
        s,
    })
}

/// Solves the two-state optimal field on the observation grid (401 nodes in
/// `p`) and synthesizes the trajectory along the Wonham filter.
pub fn bsde_solve_optimal_synthesis(model: &FiniteModel, f: &[f64], obs: &ObsPath) -> Result<DualTrajectory> {
    let field = OptimalField::solve(model, f, &obs.grid, 401)?;
    let filter = wonham_filter(model, obs)?;
    synthesize(&field, model, obs, &filter)
}

/// `max_k |π_kᵀY_k − S_k|`.
pub fn running_estimator_check(dual: &DualTrajectory, filter: &FilterTrajectory) -> f64 {
    (0..dual.s.len())
        .map(|k| (linalg::dot(filter.pi.get(k), dual.y.get(k)) - dual.s[k]).abs())
        .fold(0.0, f64::max)
}
