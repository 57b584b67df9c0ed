//! Algebraic primitives of the dual control problem for a finite-state
//! chain: jump covariation `Q(e_i)`, its expectation `μ(Q)`, the posterior
//! covariance, the cost density, the Lagrangian, the Hamiltonian with its
//! partial derivatives, and the terminal value function.
//!
//! State indices are zero based.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Diffusion1DModel, FiniteModel, PriorDensity};
#[allow(unused_imports)]
use num_traits::Float;

/// Row sums of a generator must vanish to this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GeneratorViolation {
    NotSquare { rows: usize, cols: usize },
    RowSum { row: usize, sum: f64 },
    NegativeRate { row: usize, col: usize, rate: f64 },
    NonFinite { row: usize, col: usize },
}

/// Checks zero row sums and nonnegative off-diagonal rates, listing every
/// violated entry.
pub fn validate_generator(a: &DMatrix<f64>) -> core::result::Result<(), Vec<GeneratorViolation>> {
    if a.nrows() != a.ncols() {
        return Err(vec![GeneratorViolation::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        }]);
    }
    let mut out = Vec::new();
    for i in 0..a.nrows() {
        let mut sum = 0.0;
        for j in 0..a.ncols() {
            let v = a[(i, j)];
            if !v.is_finite() {
                out.push(GeneratorViolation::NonFinite { row: i, col: j });
            }
            if i != j && v < 0.0 {
                out.push(GeneratorViolation::NegativeRate { row: i, col: j, rate: v });
            }
            sum += v;
        }
        if !(sum.abs() <= ROW_SUM_TOL) {
            out.push(GeneratorViolation::RowSum { row: i, sum });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// `Q(e_i) = Σ_j A_ij (e_j − e_i)(e_j − e_i)ᵀ`.
pub fn jump_covariation(a: &DMatrix<f64>, i: usize) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if i >= d {
        return Err(Error::IndexOutOfRange { index: i, d });
    }
    let mut q = DMatrix::zeros(d, d);
    for j in 0..d {
        if j == i {
            continue;
        }
        let rate = a[(i, j)];
        q[(j, j)] += rate;
        q[(i, i)] += rate;
        q[(i, j)] -= rate;
        q[(j, i)] -= rate;
    }
    Ok(q)
}

/// `μ(Q) = diag(Aᵀμ) − Aᵀ diag(μ) − diag(μ) A`, which equals
/// `Σ_i μ_i Q(e_i)`.
pub fn expected_covariation(a: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let atmu = a.transpose() * mu;
    let dmu = DMatrix::from_diagonal(mu);
    DMatrix::from_diagonal(&atmu) - a.transpose() * &dmu - &dmu * a
}

/// `Σ = diag(π) − ππᵀ`.
pub fn covariance_of(pi: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(pi) - pi * pi.transpose()
}

fn basis_index(x: &DVector<f64>) -> Option<usize> {
    let mut idx = None;
    for (i, &v) in x.iter().enumerate() {
        if v == 1.0 {
            if idx.is_some() {
                return None;
            }
            idx = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    idx
}

/// `ℓ(y, v, u; x) = ½ yᵀQ(x)y + ½ (u + vᵀx)ᵀ R (u + vᵀx)` for a basis
/// vector `x`.
pub fn cost_density(
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    u: &DVector<f64>,
    x: &DVector<f64>,
    model: &FiniteModel,
) -> Result<f64> {
    if x.len() != model.d() {
        return Err(Error::dim("x must have d entries"));
    }
    let i = basis_index(x).ok_or(Error::NotBasisVector)?;
    let q = jump_covariation(model.a(), i)?;
    let w = u + v.transpose() * x;
    Ok(0.5 * (y.transpose() * q * y)[(0, 0)] + 0.5 * (w.transpose() * model.r() * &w)[(0, 0)])
}

/// Control Lagrangian `ℒ = ½ yᵀμ(Q)y + ½ uᵀRu + uᵀRvᵀμ + ½ μᵀdiag(vRvᵀ)`.
pub fn lagrangian(
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    u: &DVector<f64>,
    mu: &DVector<f64>,
    model: &FiniteModel,
) -> f64 {
    let r = model.r();
    let q = expected_covariation(model.a(), mu);
    let vrv = v * r * v.transpose();
    0.5 * (y.transpose() * q * y)[(0, 0)]
        + 0.5 * (u.transpose() * r * u)[(0, 0)]
        + (u.transpose() * r * v.transpose() * mu)[(0, 0)]
        + 0.5 * mu.dot(&vrv.diagonal())
}

/// Right-hand side of the BSDE in standard form,
/// `ℋ_p = −Ay − Hu − diag(Hvᵀ) + vHᵀμ`.
pub fn bsde_drift(
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    u: &DVector<f64>,
    mu: &DVector<f64>,
    model: &FiniteModel,
) -> DVector<f64> {
    let h = model.h();
    -(model.a() * y) - h * u - (h * v.transpose()).diagonal() + v * (h.transpose() * mu)
}

/// `ℋ(y, v, u, p; μ) = pᵀ(−Ay − Hu − diag(Hvᵀ) + vHᵀμ) − ℒ(y, v, u; μ)`.
pub fn hamiltonian(
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    u: &DVector<f64>,
    p: &DVector<f64>,
    mu: &DVector<f64>,
    model: &FiniteModel,
) -> f64 {
    p.dot(&bsde_drift(y, v, u, mu, model)) - lagrangian(y, v, u, mu, model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPartials {
    pub p: DVector<f64>,
    pub y: DVector<f64>,
    pub v: DMatrix<f64>,
    pub u: DVector<f64>,
}

/// Exact partial derivatives of [`hamiltonian`].
///
/// `ℋ_u = −(Hᵀp + Ru + Rvᵀμ)`; its zero set is the optimal control law.
pub fn hamiltonian_partials(
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    u: &DVector<f64>,
    p: &DVector<f64>,
    mu: &DVector<f64>,
    model: &FiniteModel,
) -> HamiltonianPartials {
    let a = model.a();
    let h = model.h();
    let r = model.r();
    let hp = bsde_drift(y, v, u, mu, model);
    let hy = -(a.transpose() * p) - expected_covariation(a, mu) * y;
    let hv = -(DMatrix::from_diagonal(p) * h) + p * (mu.transpose() * h) - mu * (u.transpose() * r)
        - DMatrix::from_diagonal(mu) * v * r;
    let hu = -(h.transpose() * p) - r * u - r * v.transpose() * mu;
    HamiltonianPartials {
        p: hp,
        y: hy,
        v: hv,
        u: hu,
    }
}

/// `𝒱(y; μ) = ½ Σ_i |y_i − μᵀy|² μ_i`.
pub fn terminal_value(y: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    let mean = mu.dot(y);
    0.5 * y.iter().zip(mu.iter()).map(|(yi, mi)| (yi - mean).powi(2) * mi).sum::<f64>()
}

/// Row-major caches of a [`FiniteModel`] for allocation-free inner loops.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub d: usize,
    pub m: usize,
    pub a: Vec<f64>,
    pub h: Vec<f64>,
    pub r: Vec<f64>,
    pub r_inv: Vec<f64>,
    pub r_chol: Vec<f64>,
    /// `H R⁻¹`, `d x m`.
    pub h_rinv: Vec<f64>,
    /// Nonzero entries of `A` as `(i, j, A_ij)`.
    a_sparse: Vec<(usize, usize, f64)>,
}

impl Kernel {
    pub fn new(model: &FiniteModel) -> Self {
        let a = linalg::row_major(model.a());
        let a_sparse = (0..model.d())
            .flat_map(|i| (0..model.d()).map(move |j| (i, j)))
            .filter_map(|(i, j)| {
                let v = a[i * model.d() + j];
                (v != 0.0).then_some((i, j, v))
            })
            .collect();
        Kernel {
            d: model.d(),
            m: model.m(),
            a,
            h: linalg::row_major(model.h()),
            r: linalg::row_major(model.r()),
            r_inv: linalg::row_major(model.r_inv()),
            r_chol: linalg::row_major(model.r_chol()),
            h_rinv: linalg::row_major(&(model.h() * model.r_inv())),
            a_sparse,
        }
    }

    /// `out = Aᵀ x`.
    #[inline]
    pub fn a_t_mul(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for &(i, j, v) in &self.a_sparse {
            out[j] += v * x[i];
        }
    }

    /// `out = A x`.
    #[inline]
    pub fn a_mul(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for &(i, j, v) in &self.a_sparse {
            out[i] += v * x[j];
        }
    }

    /// `out = Hᵀ x` (`m` entries).
    #[inline]
    pub fn h_t_mul(&self, x: &[f64], out: &mut [f64]) {
        linalg::mat_t_vec(&self.h, self.d, self.m, x, out);
    }

    /// `yᵀ μ(Q) y = Σ_ij μ_i A_ij (y_j − y_i)²`.
    #[inline]
    pub fn quad_variation(&self, y: &[f64], mu: &[f64]) -> f64 {
        let mut s = 0.0;
        for &(i, j, v) in &self.a_sparse {
            if i != j {
                let dy = y[j] - y[i];
                s += mu[i] * v * dy * dy;
            }
        }
        s
    }

    /// `out = μ(Q) y`.
    pub fn expected_covariation_mul(&self, mu: &[f64], y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for &(i, j, rate) in &self.a_sparse {
            if i != j {
                // μ_i A_ij (e_j − e_i)(e_j − e_i)ᵀ y
                let w = mu[i] * rate * (y[j] - y[i]);
                out[j] += w;
                out[i] -= w;
            }
        }
    }

    /// `uᵀ R u`.
    #[inline]
    pub fn r_norm2(&self, u: &[f64]) -> f64 {
        let m = self.m;
        let mut s = 0.0;
        for a in 0..m {
            for b in 0..m {
                s += u[a] * self.r[a * m + b] * u[b];
            }
        }
        s
    }

    /// Lagrangian on row-major arguments (`v` is `d x m`).
    pub fn lagrangian(&self, y: &[f64], v: &[f64], u: &[f64], mu: &[f64]) -> f64 {
        let (d, m) = (self.d, self.m);
        let mut total = 0.5 * self.quad_variation(y, mu) + 0.5 * self.r_norm2(u);
        for b in 0..m {
            let w_b: f64 = (0..d).map(|i| v[i * m + b] * mu[i]).sum();
            let ru_b: f64 = (0..m).map(|a| u[a] * self.r[a * m + b]).sum();
            total += ru_b * w_b;
        }
        for i in 0..d {
            if mu[i] != 0.0 {
                total += 0.5 * mu[i] * self.r_norm2(&v[i * m..(i + 1) * m]);
            }
        }
        total
    }

    /// `out = Ay + Hu + diag(Hvᵀ) − vHᵀμ`, so that `dY = −out dt + V dI`.
    pub fn bsde_driver(&self, y: &[f64], v: &[f64], u: &[f64], mu: &[f64], out: &mut [f64]) {
        let (d, m) = (self.d, self.m);
        self.a_mul(y, out);
        for i in 0..d {
            for c in 0..m {
                out[i] += self.h[i * m + c] * (u[c] + v[i * m + c]);
            }
        }
        for c in 0..m {
            let hmu: f64 = (0..d).map(|j| self.h[j * m + c] * mu[j]).sum();
            for i in 0..d {
                out[i] -= v[i * m + c] * hmu;
            }
        }
    }

    /// Covariance `diag(π) − ππᵀ` into a row-major buffer.
    pub fn covariance_into(&self, pi: &[f64], out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = if i == j { pi[i] } else { 0.0 } - pi[i] * pi[j];
            }
        }
    }

    /// `out = Σ(π) H R⁻¹` (`d x m`) without forming `Σ`:
    /// row `i` is `π_i (H R⁻¹)_i − π_i πᵀ H R⁻¹`.
    pub fn gain_into(&self, pi: &[f64], out: &mut [f64]) {
        let (d, m) = (self.d, self.m);
        for c in 0..m {
            let mean: f64 = (0..d).map(|j| pi[j] * self.h_rinv[j * m + c]).sum();
            for i in 0..d {
                out[i * m + c] = pi[i] * (self.h_rinv[i * m + c] - mean);
            }
        }
    }

    /// Optimal law `U* = −R⁻¹HᵀΣ(π)y − vᵀπ`.
    pub fn optimal_control(&self, y: &[f64], v: &[f64], pi: &[f64], out: &mut [f64]) {
        // R⁻¹HᵀΣ y = (Σ H R⁻¹)ᵀ y with Σ symmetric
        let (d, m) = (self.d, self.m);
        let mean_y: f64 = (0..d).map(|i| pi[i] * y[i]).sum();
        for c in 0..m {
            let mean_hr: f64 = (0..d).map(|j| pi[j] * self.h_rinv[j * m + c]).sum();
            let mut s = 0.0;
            let mut vt_pi = 0.0;
            for i in 0..d {
                s += pi[i] * (self.h_rinv[i * m + c] - mean_hr) * (y[i] - mean_y);
                vt_pi += v[i * m + c] * pi[i];
            }
            out[c] = -s - vt_pi;
        }
    }

    /// `½ Σ_i |y_i − πᵀy|² π_i`.
    pub fn terminal_value(&self, y: &[f64], pi: &[f64]) -> f64 {
        let mean = linalg::dot(y, pi);
        0.5 * y.iter().zip(pi).map(|(a, p)| (a - mean) * (a - mean) * p).sum::<f64>()
    }
}

/// Generator of a finite chain approximating a 1-D diffusion on a uniform
/// grid: central differences for `½σ²∂²`, upwind differences for `a∂`,
/// reflecting (zero-flux) boundary rows.
///
/// Returns the finite model (observation row `i` is `h(x_i)`, prior is the
/// normalized prior density at the nodes) and the node locations.
pub fn grid_generator(model: &Diffusion1DModel, n: usize) -> Result<(FiniteModel, Vec<f64>)> {
    if n < 3 {
        return Err(Error::param("n", "need at least 3 grid nodes"));
    }
    model.validate()?;
    let [lo, hi] = model.domain;
    let dx = (hi - lo) / (n - 1) as f64;
    let nodes: Vec<f64> = (0..n).map(|i| lo + dx * i as f64).collect();
    let mut a = DMatrix::zeros(n, n);
    for (i, &x) in nodes.iter().enumerate() {
        let s = model.sigma.eval(x);
        if s.abs() < model.epsilon {
            return Err(Error::param("sigma", "ellipticity fails on the grid"));
        }
        let diff = 0.5 * s * s / (dx * dx);
        let drift = model.drift.eval(x);
        let right = diff + drift.max(0.0) / dx;
        let left = diff + (-drift).max(0.0) / dx;
        if i + 1 < n {
            a[(i, i + 1)] = right;
        }
        if i > 0 {
            a[(i, i - 1)] = left;
        }
        let out: f64 = (if i + 1 < n { right } else { 0.0 }) + (if i > 0 { left } else { 0.0 });
        a[(i, i)] = -out;
    }
    let m = model.obs.len();
    let mut h = DMatrix::zeros(n, m);
    for (i, &x) in nodes.iter().enumerate() {
        for (c, f) in model.obs.iter().enumerate() {
            h[(i, c)] = f.eval(x);
        }
    }
    let prior = match model.prior {
        PriorDensity::PointMass { x } => {
            let j = (((x - lo) / dx).round().max(0.0) as usize).min(n - 1);
            let mut p = DVector::zeros(n);
            p[j] = 1.0;
            p
        }
        ref density => {
            let w: Vec<f64> = nodes.iter().map(|&x| density.density(x, lo, hi).unwrap_or(0.0)).collect();
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::param("prior", "no prior mass on the grid"));
            }
            DVector::from_iterator(n, w.iter().map(|v| v / total))
        }
    };
    let finite = FiniteModel::new(a, h, model.r.clone(), prior, model.horizon)?;
    Ok((finite, nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScalarFn;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn m2(a: [f64; 4]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &a)
    }

    fn random_generator(d: usize, rates: &[f64]) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    a[(i, j)] = rates[k];
                    k += 1;
                }
            }
            let s: f64 = (0..d).filter(|&j| j != i).map(|j| a[(i, j)]).sum();
            a[(i, i)] = -s;
        }
        a
    }

    fn simplex(w: &[f64]) -> DVector<f64> {
        let s: f64 = w.iter().sum();
        DVector::from_iterator(w.len(), w.iter().map(|x| x / s))
    }

    /// Term-by-term evaluation of Σ_j A_ij (e_j − e_i)(e_j − e_i)ᵀ.
    fn q_oracle(a: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
        let d = a.nrows();
        let mut q = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::<f64>::zeros(d);
            e[j] += 1.0;
            e[i] -= 1.0;
            q += (&e * e.transpose()) * a[(i, j)];
        }
        q
    }

    #[test]
    fn generator_validation_examples() {
        assert!(validate_generator(&m2([-1.0, 1.0, 1.0, -1.0])).is_ok());
        assert!(validate_generator(&m2([0.0; 4])).is_ok());
        let err = validate_generator(&m2([-1.0, 2.0, 1.0, -1.0])).unwrap_err();
        assert_eq!(err, vec![GeneratorViolation::RowSum { row: 0, sum: 1.0 }]);
        let err = validate_generator(&m2([1.0, -1.0, 1.0, -1.0])).unwrap_err();
        assert!(err.contains(&GeneratorViolation::NegativeRate { row: 0, col: 1, rate: -1.0 }));
        assert!(validate_generator(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn jump_covariation_examples() {
        let a = m2([-1.0, 1.0, 1.0, -1.0]);
        assert_eq!(jump_covariation(&a, 0).unwrap(), m2([1.0, -1.0, -1.0, 1.0]));
        assert_eq!(jump_covariation(&m2([0.0; 4]), 1).unwrap(), DMatrix::zeros(2, 2));
        assert_eq!(
            jump_covariation(&a, 2).unwrap_err(),
            Error::IndexOutOfRange { index: 2, d: 2 }
        );
        let a3 = random_generator(3, &[0.3, 1.2, 0.7, 0.1, 2.0, 0.5]);
        assert!((jump_covariation(&a3, 1).unwrap() - q_oracle(&a3, 1)).amax() < 1e-15);
    }

    #[test]
    fn expected_covariation_examples() {
        let a = m2([-1.0, 1.0, 1.0, -1.0]);
        let mu = DVector::from_vec(vec![0.5, 0.5]);
        assert!((expected_covariation(&a, &mu) - m2([1.0, -1.0, -1.0, 1.0])).amax() < 1e-15);
        let a3 = random_generator(3, &[0.3, 1.2, 0.7, 0.1, 2.0, 0.5]);
        for k in 0..3 {
            let mut e = DVector::zeros(3);
            e[k] = 1.0;
            assert!((expected_covariation(&a3, &e) - jump_covariation(&a3, k).unwrap()).amax() < 1e-14);
        }
    }

    #[test]
    fn covariance_examples() {
        let s = covariance_of(&DVector::from_vec(vec![0.5, 0.5]));
        assert_eq!(s, m2([0.25, -0.25, -0.25, 0.25]));
        assert_eq!(covariance_of(&DVector::from_vec(vec![1.0, 0.0])), DMatrix::zeros(2, 2));
        let p = [0.2, 0.3, 0.5];
        let s = covariance_of(&DVector::from_vec(p.to_vec()));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
                assert_relative_eq!(s[(i, j)], want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn terminal_value_examples() {
        let mu = DVector::from_vec(vec![0.5, 0.5]);
        assert_relative_eq!(terminal_value(&DVector::from_vec(vec![1.0, 0.0]), &mu), 0.125);
        assert_eq!(terminal_value(&DVector::from_vec(vec![3.0, 3.0]), &mu), 0.0);
        assert_eq!(
            terminal_value(&DVector::from_vec(vec![1.0, -2.0]), &DVector::from_vec(vec![0.0, 1.0])),
            0.0
        );
    }

    #[test]
    fn cost_density_rejects_non_basis_and_decouples() {
        let model = FiniteModel::canonical();
        let y = DVector::from_vec(vec![1.0, -0.5]);
        let u = DVector::from_vec(vec![0.3]);
        let v0 = DMatrix::zeros(2, 1);
        let x = DVector::from_vec(vec![0.0, 1.0]);
        let l = cost_density(&y, &v0, &u, &x, &model).unwrap();
        let q = jump_covariation(model.a(), 1).unwrap();
        assert_relative_eq!(l, 0.5 * (y.transpose() * q * &y)[(0, 0)] + 0.5 * 0.09, epsilon = 1e-15);
        assert_eq!(
            cost_density(&y, &v0, &u, &DVector::from_vec(vec![0.5, 0.5]), &model).unwrap_err(),
            Error::NotBasisVector
        );
        let zero = cost_density(&DVector::zeros(2), &v0, &DVector::zeros(1), &x, &model).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn zero_arguments_give_zero_hamiltonian() {
        let model = FiniteModel::canonical();
        let z = DVector::zeros(2);
        let mu = DVector::from_vec(vec![0.3, 0.7]);
        let v = DMatrix::zeros(2, 1);
        let u = DVector::zeros(1);
        assert_eq!(hamiltonian(&z, &v, &u, &z, &mu, &model), 0.0);
        let p = hamiltonian_partials(&z, &v, &u, &z, &mu, &model);
        assert_eq!(p.p.amax() + p.y.amax() + p.v.amax() + p.u.amax(), 0.0);
    }

    fn three_state_model(rates: &[f64], h: &[f64], r: [f64; 3]) -> FiniteModel {
        let a = random_generator(3, rates);
        let rm = DMatrix::from_row_slice(2, 2, &[r[0], r[1], r[1], r[2]]);
        FiniteModel::new(a, DMatrix::from_row_slice(3, 2, h), rm, simplex(&[1.0, 1.0, 1.0]), 1.0).unwrap()
    }

    fn finite_difference_partials(
        y: &DVector<f64>,
        v: &DMatrix<f64>,
        u: &DVector<f64>,
        p: &DVector<f64>,
        mu: &DVector<f64>,
        model: &FiniteModel,
    ) -> HamiltonianPartials {
        let h = 1e-5;
        let f = |y: &DVector<f64>, v: &DMatrix<f64>, u: &DVector<f64>, p: &DVector<f64>| {
            hamiltonian(y, v, u, p, mu, model)
        };
        let grad_vec = |x: &DVector<f64>, g: &dyn Fn(&DVector<f64>) -> f64| {
            DVector::from_iterator(
                x.len(),
                (0..x.len()).map(|i| {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    (g(&xp) - g(&xm)) / (2.0 * h)
                }),
            )
        };
        let mut gv = DMatrix::zeros(v.nrows(), v.ncols());
        for i in 0..v.nrows() {
            for j in 0..v.ncols() {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[(i, j)] += h;
                vm[(i, j)] -= h;
                gv[(i, j)] = (f(y, &vp, u, p) - f(y, &vm, u, p)) / (2.0 * h);
            }
        }
        HamiltonianPartials {
            p: grad_vec(p, &|pp| f(y, v, u, pp)),
            y: grad_vec(y, &|yy| f(yy, v, u, p)),
            v: gv,
            u: grad_vec(u, &|uu| f(y, v, uu, p)),
        }
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().fold(1.0f64, |s, x| s.max(x.abs()));
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn optimal_control_zeroes_control_partial() {
        let model = three_state_model(&[0.3, 1.2, 0.7, 0.1, 2.0, 0.5], &[1.0, 0.0, -0.5, 2.0, 0.3, 0.3], [1.0, 0.2, 0.5]);
        let y = DVector::from_vec(vec![0.4, -1.0, 2.0]);
        let v = DMatrix::from_row_slice(3, 2, &[0.1, -0.3, 0.7, 0.2, -0.5, 0.05]);
        let mu = simplex(&[0.2, 0.5, 0.3]);
        let sigma = covariance_of(&mu);
        let p = &sigma * &y;
        let u = -(model.r_inv() * model.h().transpose() * &p) - v.transpose() * &mu;
        let hu = hamiltonian_partials(&y, &v, &u, &p, &mu, &model).u;
        assert!(hu.amax() < 1e-12, "{hu}");
        let k = Kernel::new(&model);
        let mut uk = [0.0; 2];
        k.optimal_control(y.as_slice(), &linalg::row_major(&v), mu.as_slice(), &mut uk);
        assert!((uk[0] - u[0]).abs() < 1e-14 && (uk[1] - u[1]).abs() < 1e-14);
    }

    #[test]
    fn ou_grid_chain_stationary_law_approaches_gaussian() {
        // dX = −X dt + dB has stationary law N(0, 1/2).
        let model = Diffusion1DModel {
            drift: ScalarFn::linear(-1.0),
            sigma: ScalarFn::constant(1.0),
            obs: vec![ScalarFn::linear(1.0)],
            r: DMatrix::from_element(1, 1, 1.0),
            prior: PriorDensity::Gaussian { mean: 0.0, std: 1.0 },
            domain: [-4.0, 4.0],
            horizon: 1.0,
            epsilon: 1e-3,
        };
        let mut errs = Vec::new();
        for n in [41, 81, 161] {
            let (fm, nodes) = grid_generator(&model, n).unwrap();
            assert!(validate_generator(fm.a()).is_ok());
            // stationary vector: null space of Aᵀ via detailed balance of the birth-death chain
            let a = fm.a();
            let mut p = vec![1.0; n];
            for i in 1..n {
                p[i] = p[i - 1] * a[(i - 1, i)] / a[(i, i - 1)];
            }
            let s: f64 = p.iter().sum();
            let dx = nodes[1] - nodes[0];
            let var = 0.5;
            let err = nodes
                .iter()
                .zip(&p)
                .map(|(x, w)| {
                    let dens = (-x * x / (2.0 * var)).exp() / (2.0 * core::f64::consts::PI * var).sqrt();
                    (w / s / dx - dens).abs()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 0.02, "{errs:?}");
    }

    #[test]
    fn grid_generator_rows() {
        let mut model = Diffusion1DModel {
            drift: ScalarFn::constant(0.0),
            sigma: ScalarFn::constant(1.0),
            obs: vec![ScalarFn::linear(1.0)],
            r: DMatrix::from_element(1, 1, 1.0),
            prior: PriorDensity::Uniform,
            domain: [0.0, 1.0],
            horizon: 1.0,
            epsilon: 1e-3,
        };
        let (fm, nodes) = grid_generator(&model, 3).unwrap();
        let dx = nodes[1] - nodes[0];
        let a = fm.a();
        // generator ½σ²∂² gives the halved discrete Laplacian
        assert_relative_eq!(a[(1, 0)], 0.5 / (dx * dx));
        assert_relative_eq!(a[(1, 1)], -1.0 / (dx * dx));
        assert_relative_eq!(a[(1, 2)], 0.5 / (dx * dx));
        // reflecting boundary rows
        assert_relative_eq!(a[(0, 1)], 0.5 / (dx * dx));
        assert_relative_eq!(a[(0, 0)], -0.5 / (dx * dx));
        assert_eq!(fm.h()[(2, 0)], 1.0);
        assert!(grid_generator(&model, 2).is_err());

        model.drift = ScalarFn::constant(2.0);
        let (fm, _) = grid_generator(&model, 5).unwrap();
        let a = fm.a();
        let dx = 0.25;
        assert_relative_eq!(a[(2, 3)] - a[(2, 1)], 2.0 / dx);
        assert_relative_eq!(a[(2, 1)], 0.5 / (dx * dx));
    }

    proptest! {
        #[test]
        fn mixture_of_vertex_covariations(rates in proptest::collection::vec(0.0f64..3.0, 6),
                                          w in proptest::collection::vec(0.01f64..1.0, 3)) {
            let a = random_generator(3, &rates);
            let mu = simplex(&w);
            let mut mix = DMatrix::zeros(3, 3);
            for i in 0..3 {
                mix += q_oracle(&a, i) * mu[i];
            }
            let q = expected_covariation(&a, &mu);
            prop_assert!((q - &mix).amax() < 1e-12);
            prop_assert!(validate_generator(&a).is_ok());
        }

        #[test]
        fn covariance_is_psd_and_kills_ones(w in proptest::collection::vec(0.0f64..1.0, 4)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-3);
            let pi = simplex(&w);
            let s = covariance_of(&pi);
            prop_assert!(linalg::min_eigenvalue(&s) >= -1e-12);
            prop_assert!((&s * DVector::from_element(4, 1.0)).amax() < 1e-15);
            let y = DVector::from_iterator(4, w.iter().map(|x| 3.0 * x - 1.0));
            prop_assert!((terminal_value(&y, &pi) - 0.5 * (y.transpose() * &s * &y)[(0, 0)]).abs() < 1e-12);
        }

        #[test]
        fn lagrangian_is_expected_cost_density(rates in proptest::collection::vec(0.0f64..3.0, 6),
                                               w in proptest::collection::vec(0.01f64..1.0, 3),
                                               args in proptest::collection::vec(-2.0f64..2.0, 11)) {
            let model = three_state_model(&rates, &[1.0, 0.0, -0.5, 2.0, 0.3, 0.3], [1.0, 0.2, 0.5]);
            let mu = simplex(&w);
            let y = DVector::from_row_slice(&args[0..3]);
            let v = DMatrix::from_row_slice(3, 2, &args[3..9]);
            let u = DVector::from_row_slice(&args[9..11]);
            let mut tower = 0.0;
            for i in 0..3 {
                let mut e = DVector::zeros(3);
                e[i] = 1.0;
                tower += mu[i] * cost_density(&y, &v, &u, &e, &model).unwrap();
            }
            let l = lagrangian(&y, &v, &u, &mu, &model);
            prop_assert!((l - tower).abs() < 1e-12 * (1.0 + tower.abs()));
            let k = Kernel::new(&model);
            let lk = k.lagrangian(y.as_slice(), &linalg::row_major(&v), u.as_slice(), mu.as_slice());
            prop_assert!((lk - tower).abs() < 1e-12 * (1.0 + tower.abs()));
            let drift = bsde_drift(&y, &v, &u, &mu, &model);
            let mut out = [0.0; 3];
            k.bsde_driver(y.as_slice(), &linalg::row_major(&v), u.as_slice(), mu.as_slice(), &mut out);
            for i in 0..3 {
                prop_assert!((out[i] + drift[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn partials_match_finite_differences(rates in proptest::collection::vec(0.0f64..3.0, 6),
                                             w in proptest::collection::vec(0.01f64..1.0, 3),
                                             args in proptest::collection::vec(-2.0f64..2.0, 14)) {
            let model = three_state_model(&rates, &[1.0, 0.0, -0.5, 2.0, 0.3, 0.3], [1.0, 0.2, 0.5]);
            let mu = simplex(&w);
            let y = DVector::from_row_slice(&args[0..3]);
            let v = DMatrix::from_row_slice(3, 2, &args[3..9]);
            let u = DVector::from_row_slice(&args[9..11]);
            let p = DVector::from_row_slice(&args[11..14]);
            let exact = hamiltonian_partials(&y, &v, &u, &p, &mu, &model);
            let fd = finite_difference_partials(&y, &v, &u, &p, &mu, &model);
            prop_assert!(rel_close(exact.p.as_slice(), fd.p.as_slice(), 1e-6));
            prop_assert!(rel_close(exact.y.as_slice(), fd.y.as_slice(), 1e-6));
            prop_assert!(rel_close(exact.v.as_slice(), fd.v.as_slice(), 1e-6));
            prop_assert!(rel_close(exact.u.as_slice(), fd.u.as_slice(), 1e-6));
        }
    }
}
