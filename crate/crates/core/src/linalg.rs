//! Small dense helpers. Model types use `nalgebra`; hot loops work on
//! row-major slices to avoid per-step allocation.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// `out = a x` for a row-major `rows x cols` matrix.
#[inline]
pub fn mat_vec(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

/// `out = aᵀ x` for a row-major `rows x cols` matrix (`x` has `rows` entries).
#[inline]
pub fn mat_t_vec(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    out[..cols].iter_mut().for_each(|o| *o = 0.0);
    for i in 0..rows {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        let row = &a[i * cols..(i + 1) * cols];
        for j in 0..cols {
            out[j] += row[j] * xi;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

pub fn symmetrize_slice(m: &mut [f64], n: usize) {
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.l())
}

/// Symmetric square root of a positive semidefinite matrix. Tiny negative
/// eigenvalues from round-off are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let n = m.nrows();
    let mut root = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        root += v * v.transpose() * lam;
    }
    root
}

pub fn inverse_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

pub fn diag_from(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(v)
}

/// Max-abs entry of the difference of two equally shaped slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Solves a small least-squares problem `min |X b - y|` column by column.
/// `x` is row-major `n x p`; `y` is row-major `n x q`. Returns row-major
/// `p x q` coefficients, or `None` when `X` is numerically rank deficient.
pub fn least_squares(x: &[f64], n: usize, p: usize, y: &[f64], q: usize) -> Option<Vec<f64>> {
    // Gram matrix on column-scaled features; p is tiny so normal equations
    // in scaled coordinates are adequate.
    let mut scale = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            scale[j] += x[i * p + j] * x[i * p + j];
        }
    }
    for s in scale.iter_mut() {
        *s = s.sqrt();
        if *s == 0.0 {
            return None;
        }
    }
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, q);
    for i in 0..n {
        let row = &x[i * p..(i + 1) * p];
        for a in 0..p {
            let xa = row[a] / scale[a];
            for b in 0..=a {
                gram[(a, b)] += xa * row[b] / scale[b];
            }
            for c in 0..q {
                rhs[(a, c)] += xa * y[i * q + c];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(lo > hi * 1e-12) {
        return None;
    }
    let chol = gram.cholesky()?;
    let sol = chol.solve(&rhs);
    let mut out = vec![0.0; p * q];
    for a in 0..p {
        for c in 0..q {
            out[a * q + c] = sol[(a, c)] / scale[a];
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_recovers_exact_fit() {
        let n = 20;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let t = i as f64 / n as f64;
            x.extend_from_slice(&[1.0, t, t * t]);
            y.extend_from_slice(&[2.0 - t + 3.0 * t * t, 0.5 * t]);
        }
        let b = least_squares(&x, n, 3, &y, 2).unwrap();
        let expect = [2.0, 0.0, -1.0, 0.5, 3.0, 0.0];
        for (got, want) in b.iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn least_squares_flags_collinear_columns() {
        let x: Vec<f64> = (0..10).flat_map(|i| [1.0, i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(least_squares(&x, 10, 3, &y, 1).is_none());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_sqrt(&m);
        assert!((&r * &r - &m).amax() < 1e-12);
    }
}
