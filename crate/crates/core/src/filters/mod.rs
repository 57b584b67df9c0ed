//! Reference filters: Wonham (with the covariance DRE check), Kalman-Bucy,
//! the grid approximation of the Kushner equation, and the Kalman filter
//! built from the deterministic dual of a Markov chain.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::algebra::{self, Kernel};
use crate::error::{Error, Result};
use crate::grid::{MatPath, TimeGrid, VecPath};
use crate::linalg;
use crate::model::{Diffusion1DModel, FiniteModel, LinearGaussianModel};
use crate::ode::Rk4;
use crate::sde::{Scheme, Stepper};
use crate::sim::ObsPath;

/// Posterior path of a finite-state filter.
///
/// The covariance `Σ_k = diag(π_k) − π_kπ_kᵀ` is a function of `π_k` and is
/// produced on demand by [`FilterTrajectory::sigma`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrajectory {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub pi: VecPath,
    /// Innovation increments, row-major `n_steps x m`.
    pub di: Vec<f64>,
    pub m: usize,
    /// Largest total mass removed by clipping at a single step.
    pub max_clipped: f64,
}

impl FilterTrajectory {
    pub fn d(&self) -> usize {
        self.pi.dim()
    }

    pub fn pi_vec(&self, k: usize) -> DVector<f64> {
        DVector::from_row_slice(self.pi.get(k))
    }

    pub fn sigma(&self, k: usize) -> DMatrix<f64> {
        algebra::covariance_of(&self.pi_vec(k))
    }

    pub fn innovation(&self, k: usize) -> &[f64] {
        &self.di[k * self.m..(k + 1) * self.m]
    }

    /// `π_k(f)` at every node.
    pub fn estimate(&self, f: &[f64]) -> Vec<f64> {
        self.pi.iter().map(|p| linalg::dot(p, f)).collect()
    }

    pub fn terminal(&self) -> &[f64] {
        self.pi.last()
    }
}

/// Mean and covariance path of a Kalman-type filter.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrajectory {
    pub grid: TimeGrid,
    pub mean: VecPath,
    pub cov: MatPath,
}

impl KalmanTrajectory {
    pub fn terminal_mean(&self) -> &[f64] {
        self.mean.last()
    }
}

fn check_grid(model_t: f64, obs: &ObsPath, m: usize) -> Result<()> {
    if obs.m != m {
        return Err(Error::dim("observation dimension differs from the model"));
    }
    if (obs.grid.horizon() - model_t).abs() > 1e-12 * model_t {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Wonham filter by Euler–Maruyama with clip-and-renormalize.
pub fn wonham_filter(model: &FiniteModel, obs: &ObsPath) -> Result<FilterTrajectory> {
    wonham_filter_with(model, obs, Scheme::EulerMaruyama)
}

/// Wonham filter with a chosen scheme. The Milstein variant drives the
/// update with the whitened innovation `L⁻¹ΔI`, `R = LLᵀ`.
pub fn wonham_filter_with(model: &FiniteModel, obs: &ObsPath, scheme: Scheme) -> Result<FilterTrajectory> {
    check_grid(model.horizon(), obs, model.m())?;
    let kern = Kernel::new(model);
    wonham_kernel(&kern, model.prior().as_slice(), obs, scheme)
}

pub(crate) fn wonham_kernel(kern: &Kernel, prior: &[f64], obs: &ObsPath, scheme: Scheme) -> Result<FilterTrajectory> {
    let (d, m) = (kern.d, kern.m);
    let n = obs.grid.n_steps();
    let dt = obs.grid.dt();
    let mut pi = prior.to_vec();
    let mut path = VecPath::with_capacity(n + 1, d);
    path.push(&pi);
    let mut di = vec![0.0; n * m];
    let mut hp = vec![0.0; m];
    let mut drift = vec![0.0; d];
    let mut gain = vec![0.0; d * m];
    let mut dw = vec![0.0; m];
    let mut stepper = Stepper::new(d, m);
    let mut g = vec![0.0; d * m];
    let mut max_clipped = 0.0f64;
    for k in 0..n {
        kern.h_t_mul(&pi, &mut hp);
        let dik = &mut di[k * m..(k + 1) * m];
        for c in 0..m {
            dik[c] = obs.dz[k * m + c] - hp[c] * dt;
        }
        match scheme {
            Scheme::EulerMaruyama => {
                kern.a_t_mul(&pi, &mut drift);
                kern.gain_into(&pi, &mut gain);
                for i in 0..d {
                    let mut s = drift[i] * dt;
                    for c in 0..m {
                        s += gain[i * m + c] * dik[c];
                    }
                    pi[i] += s;
                }
            }
            Scheme::Milstein => {
                whiten(&kern.r_chol, m, dik, &mut dw);
                stepper.step(
                    scheme,
                    &mut pi,
                    dt,
                    &dw,
                    |x, out| kern.a_t_mul(x, out),
                    |x, out| {
                        kern.gain_into(x, &mut g);
                        right_mul_lower(&g, d, &kern.r_chol, m, out);
                    },
                );
            }
        }
        let clipped = clip_and_normalize(&mut pi).ok_or(Error::Renormalization { step: k })?;
        max_clipped = max_clipped.max(clipped);
        path.push(&pi);
    }
    Ok(FilterTrajectory {
        grid: obs.grid,
        scheme,
        pi: path,
        di,
        m,
        max_clipped,
    })
}

/// `out = L⁻¹ x` for lower-triangular row-major `L`.
pub(crate) fn whiten(l: &[f64], m: usize, x: &[f64], out: &mut [f64]) {
    for a in 0..m {
        let mut s = x[a];
        for b in 0..a {
            s -= l[a * m + b] * out[b];
        }
        out[a] = s / l[a * m + a];
    }
}

/// `out = G L` for row-major `G` (`rows x m`) and lower-triangular `L`.
pub(crate) fn right_mul_lower(g: &[f64], rows: usize, l: &[f64], m: usize, out: &mut [f64]) {
    for i in 0..rows {
        for j in 0..m {
            let mut s = 0.0;
            for a in j..m {
                s += g[i * m + a] * l[a * m + j];
            }
            out[i * m + j] = s;
        }
    }
}

/// Returns the clipped mass, or `None` when nothing positive remains.
fn clip_and_normalize(pi: &mut [f64]) -> Option<f64> {
    let mut clipped = 0.0;
    let mut total = 0.0;
    for p in pi.iter_mut() {
        if *p < 0.0 {
            clipped -= *p;
            *p = 0.0;
        }
        total += *p;
    }
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    for p in pi.iter_mut() {
        *p /= total;
    }
    Some(clipped)
}

/// Drift of the covariance DRE, row-major `d x d`:
/// `AᵀΣ + ΣA + π(Q) − ΣHR⁻¹HᵀΣ`.
fn dre_drift(kern: &Kernel, pi: &[f64], s: &[f64], out: &mut [f64]) {
    let (d, m) = (kern.d, kern.m);
    let mut shr = vec![0.0; d * m];
    for i in 0..d {
        for c in 0..m {
            shr[i * m + c] = (0..d).map(|j| s[i * d + j] * kern.h_rinv[j * m + c]).sum();
        }
    }
    let mut cov = vec![0.0; d * d];
    let mut col = vec![0.0; d];
    let mut qy = vec![0.0; d];
    for j in 0..d {
        col.iter_mut().enumerate().for_each(|(i, c)| *c = if i == j { 1.0 } else { 0.0 });
        kern.expected_covariation_mul(pi, &col, &mut qy);
        for i in 0..d {
            cov[i * d + j] = qy[i];
        }
    }
    for i in 0..d {
        for j in 0..d {
            let mut v = cov[i * d + j];
            for k in 0..d {
                v += kern.a[k * d + i] * s[k * d + j] + s[i * d + k] * kern.a[k * d + j];
            }
            // ΣHR⁻¹HᵀΣ = (ΣHR⁻¹)(ΣH)ᵀ
            for c in 0..m {
                let sh_jc: f64 = (0..d).map(|k| s[j * d + k] * kern.h[k * m + c]).sum();
                v -= shr[i * m + c] * sh_jc;
            }
            out[i * d + j] = v;
        }
    }
}

/// Noise coefficient of the covariance DRE for the innovation direction
/// `e` (an `m`-vector): `diag(ΣHR⁻¹e) − ΣHR⁻¹e πᵀ − π eᵀR⁻¹HᵀΣ`.
fn dre_noise(kern: &Kernel, pi: &[f64], s: &[f64], e: &[f64], out: &mut [f64]) {
    let (d, m) = (kern.d, kern.m);
    let mut w = vec![0.0; d];
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            let hre: f64 = (0..m).map(|c| kern.h_rinv[j * m + c] * e[c]).sum();
            acc += s[i * d + j] * hre;
        }
        w[i] = acc;
    }
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = if i == j { w[i] } else { 0.0 } - w[i] * pi[j] - pi[i] * w[j];
        }
    }
}

/// Integrates the covariance DRE of the nonlinear filter along a Wonham
/// trajectory, driven by its recorded innovations, from `Σ₀ = Σ(π₀)`.
///
/// Uses the scheme the filter was built with. For Milstein the filter and
/// the covariance are advanced as one joint system so that the correction
/// terms see the same support point.
pub fn sigma_dre_step(filter: &FilterTrajectory, model: &FiniteModel) -> Result<MatPath> {
    if filter.d() != model.d() || filter.m != model.m() {
        return Err(Error::dim("filter and model dimensions differ"));
    }
    let kern = Kernel::new(model);
    let (d, m) = (kern.d, kern.m);
    let n = filter.grid.n_steps();
    let dt = filter.grid.dt();
    let mut s = vec![0.0; d * d];
    kern.covariance_into(filter.pi.get(0), &mut s);
    let mut out = MatPath::with_capacity(n + 1, d, d);
    out.push(&s);
    let mut drift = vec![0.0; d * d];
    let mut noise = vec![0.0; d * d];
    let mut e = vec![0.0; m];
    match filter.scheme {
        Scheme::EulerMaruyama => {
            for k in 0..n {
                let pi = filter.pi.get(k);
                dre_drift(&kern, pi, &s, &mut drift);
                dre_noise(&kern, pi, &s, filter.innovation(k), &mut noise);
                for i in 0..d * d {
                    s[i] += drift[i] * dt + noise[i];
                }
                linalg::symmetrize_slice(&mut s, d);
                out.push(&s);
            }
        }
        Scheme::Milstein => {
            let n_state = d + d * d;
            let mut x = vec![0.0; n_state];
            let mut stepper = Stepper::new(n_state, m);
            let mut dw = vec![0.0; m];
            let mut gain = vec![0.0; d * m];
            let mut col_noise = vec![0.0; d * d];
            let mut tmp = vec![0.0; d * d];
            let mut pig = vec![0.0; d * m];
            for k in 0..n {
                x[..d].copy_from_slice(filter.pi.get(k));
                x[d..].copy_from_slice(&s);
                whiten(&kern.r_chol, m, filter.innovation(k), &mut dw);
                stepper.step(
                    Scheme::Milstein,
                    &mut x,
                    dt,
                    &dw,
                    |x, o| {
                        kern.a_t_mul(&x[..d], &mut o[..d]);
                        dre_drift(&kern, &x[..d], &x[d..], &mut tmp);
                        o[d..].copy_from_slice(&tmp);
                    },
                    |x, o| {
                        kern.gain_into(&x[..d], &mut gain);
                        right_mul_lower(&gain, d, &kern.r_chol, m, &mut pig);
                        for j in 0..m {
                            for i in 0..d {
                                o[i * m + j] = pig[i * m + j];
                            }
                            for c in 0..m {
                                e[c] = kern.r_chol[c * m + j];
                            }
                            dre_noise(&kern, &x[..d], &x[d..], &e, &mut col_noise);
                            for r in 0..d * d {
                                o[(d + r) * m + j] = col_noise[r];
                            }
                        }
                    },
                );
                s.copy_from_slice(&x[d..]);
                linalg::symmetrize_slice(&mut s, d);
                out.push(&s);
            }
        }
    }
    Ok(out)
}

/// `sup_k ‖Σ̂_k − Σ(π_k)‖∞`.
pub fn dre_tracking_error(filter: &FilterTrajectory, sigma_hat: &MatPath) -> f64 {
    let d = filter.d();
    let mut s = vec![0.0; d * d];
    let mut worst = 0.0f64;
    for k in 0..filter.pi.len() {
        let pi = filter.pi.get(k);
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = if i == j { pi[i] } else { 0.0 } - pi[i] * pi[j];
            }
        }
        worst = worst.max(linalg::max_abs_diff(&s, sigma_hat.get(k)));
    }
    worst
}

/// Relative tolerance for the PSD monitor of Riccati iterates.
const PSD_TOL: f64 = 1e-9;

/// Forward Riccati path `dΣ̄/dt = AΣ̄ + Σ̄Aᵀ + Q − Σ̄HᵀR⁻¹HΣ̄` by RK4.
pub fn kalman_riccati(model: &LinearGaussianModel, grid: &TimeGrid) -> Result<MatPath> {
    let d = model.d();
    let a = model.a().clone();
    let q = model.q().clone();
    let hrh = model.h().transpose() * model.r_inv() * model.h();
    let mut s = linalg::row_major(model.sigma0());
    let mut out = MatPath::with_capacity(grid.n_steps() + 1, d, d);
    out.push(&s);
    let mut rk = Rk4::new(d * d);
    for k in 0..grid.n_steps() {
        rk.step(
            |_, x, o| {
                let sm = linalg::from_row_major(d, d, x);
                let ds = &a * &sm + &sm * a.transpose() + &q - &sm * &hrh * &sm;
                o.copy_from_slice(&linalg::row_major(&ds));
            },
            grid.t(k),
            &mut s,
            grid.dt(),
        );
        linalg::symmetrize_slice(&mut s, d);
        check_psd(&s, d, k + 1)?;
        out.push(&s);
    }
    Ok(out)
}

fn check_psd(s: &[f64], d: usize, step: usize) -> Result<()> {
    let sm = linalg::from_row_major(d, d, s);
    let scale = sm.amax().max(1.0);
    let min_eig = linalg::min_eigenvalue(&sm);
    if !(min_eig >= -PSD_TOL * scale) {
        return Err(Error::RiccatiBlowUp { step, min_eig });
    }
    Ok(())
}

/// Kalman-Bucy filter: RK4 Riccati and a Heun (trapezoidal) update of the
/// mean `dm = (A − K_tH)m dt + K_t dZ`, `K_t = Σ̄_tHᵀR⁻¹`, with the gain
/// taken at both ends of each step.
pub fn kalman_bucy(model: &LinearGaussianModel, obs: &ObsPath) -> Result<KalmanTrajectory> {
    check_grid(model.horizon(), obs, model.m())?;
    let cov = kalman_riccati(model, &obs.grid)?;
    let (d, m) = (model.d(), model.m());
    let ht_rinv = model.h().transpose() * model.r_inv();
    let dt = obs.grid.dt();
    let n = obs.grid.n_steps();
    // F_k = A − K_kH and K_k, row-major, at every node
    let mut drift = Vec::with_capacity(n + 1);
    let mut gain = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let kk = cov.matrix(k) * &ht_rinv;
        drift.push(linalg::row_major(&(model.a() - &kk * model.h())));
        gain.push(linalg::row_major(&kk));
    }
    let mut mean = model.m0().as_slice().to_vec();
    let mut path = VecPath::with_capacity(n + 1, d);
    path.push(&mean);
    let (mut f0, mut f1, mut g0, mut g1, mut pred) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for k in 0..n {
        let dz = obs.increment(k);
        linalg::mat_vec(&drift[k], d, d, &mean, &mut f0);
        linalg::mat_vec(&gain[k], d, m, dz, &mut g0);
        linalg::mat_vec(&gain[k + 1], d, m, dz, &mut g1);
        for i in 0..d {
            pred[i] = mean[i] + f0[i] * dt + g0[i];
        }
        linalg::mat_vec(&drift[k + 1], d, d, &pred, &mut f1);
        for i in 0..d {
            mean[i] += 0.5 * (f0[i] + f1[i]) * dt + 0.5 * (g0[i] + g1[i]);
        }
        path.push(&mean);
    }
    Ok(KalmanTrajectory {
        grid: obs.grid,
        mean: path,
        cov,
    })
}

/// Finite filter on the chain approximation of a scalar diffusion.
///
/// Node weights are probabilities; divide by the node spacing for a
/// density. Returns the trajectory and the node locations.
pub fn grid_kushner(model: &Diffusion1DModel, n: usize, obs: &ObsPath) -> Result<(FilterTrajectory, Vec<f64>)> {
    let (finite, nodes) = algebra::grid_generator(model, n)?;
    let traj = wonham_filter(&finite, obs)?;
    Ok((traj, nodes))
}

/// Posterior mean and variance of the node locations at each time.
pub fn grid_moments(traj: &FilterTrajectory, nodes: &[f64]) -> Vec<(f64, f64)> {
    traj.pi
        .iter()
        .map(|p| {
            let mean = linalg::dot(p, nodes);
            let var = p.iter().zip(nodes).map(|(w, x)| w * (x - mean) * (x - mean)).sum();
            (mean, var)
        })
        .collect()
}

/// Kalman filter for the chain built from the deterministic dual:
/// `X̄' = X̄ + AᵀX̄ dt + Σ̄HR⁻¹(ΔZ − HᵀX̄ dt)` with `Σ̄` supplied on the grid
/// (see [`crate::lq::dre_forward`]).
pub fn mc_kalman(model: &FiniteModel, obs: &ObsPath, sigma_bar: &MatPath) -> Result<KalmanTrajectory> {
    check_grid(model.horizon(), obs, model.m())?;
    let kern = Kernel::new(model);
    let (d, m) = (kern.d, kern.m);
    let n = obs.grid.n_steps();
    if sigma_bar.len() != n + 1 || sigma_bar.shape() != (d, d) {
        return Err(Error::GridMismatch);
    }
    let dt = obs.grid.dt();
    let mut x = model.prior().as_slice().to_vec();
    let mut path = VecPath::with_capacity(n + 1, d);
    path.push(&x);
    let (mut ax, mut hx, mut innov, mut w) = (vec![0.0; d], vec![0.0; m], vec![0.0; m], vec![0.0; d]);
    for k in 0..n {
        kern.a_t_mul(&x, &mut ax);
        kern.h_t_mul(&x, &mut hx);
        for c in 0..m {
            innov[c] = obs.dz[k * m + c] - hx[c] * dt;
        }
        linalg::mat_vec(&kern.h_rinv, d, m, &innov, &mut w);
        let sb = sigma_bar.get(k);
        for i in 0..d {
            let g: f64 = (0..d).map(|j| sb[i * d + j] * w[j]).sum();
            x[i] += ax[i] * dt + g;
        }
        path.push(&x);
    }
    Ok(KalmanTrajectory {
        grid: obs.grid,
        mean: path,
        cov: sigma_bar.clone(),
    })
}

#[cfg(test)]
mod tests;
