//! Classical fixed-step Runge–Kutta integration for smooth systems.

use alloc::vec;
use alloc::vec::Vec;

/// Workspace for [`Rk4::step`].
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Rk4 {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// Advances `x' = f(t, x)` from `t` to `t + h`. The vector field is
    /// called at `t`, `t + h/2` (twice) and `t + h`.
    pub fn step<F>(&mut self, mut f: F, t: f64, x: &mut [f64], h: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = x.len();
        f(t, x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f(t + h, &self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Cubic interpolation of node values `v[k]` (row-major, `dim` wide) at the
/// midpoint of interval `k`, using the four nearest nodes.
pub fn midpoint_cubic(v: &[f64], dim: usize, k: usize, out: &mut [f64]) {
    let n_nodes = v.len() / dim;
    let at = |j: usize, c: usize| v[j * dim + c];
    if n_nodes < 4 {
        for c in 0..dim {
            out[c] = 0.5 * (at(k, c) + at(k + 1, c));
        }
        return;
    }
    let (base, w): (usize, [f64; 4]) = if k == 0 {
        (0, [5.0, 15.0, -5.0, 1.0])
    } else if k + 2 >= n_nodes {
        (n_nodes - 4, [1.0, -5.0, 15.0, 5.0])
    } else {
        (k - 1, [-1.0, 9.0, 9.0, -1.0])
    };
    for c in 0..dim {
        out[c] = (0..4).map(|j| w[j] * at(base + j, c)).sum::<f64>() / 16.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_is_fourth_order() {
        let err = |n: usize| {
            let mut x = [1.0];
            let mut rk = Rk4::new(1);
            let h = 1.0 / n as f64;
            for k in 0..n {
                rk.step(|t, x, o| o[0] = -x[0] + t, k as f64 * h, &mut x, h);
            }
            // x' = −x + t, x(0)=1 ⇒ x(t) = t − 1 + 2e^{−t}
            (x[0] - 2.0 * (-1.0f64).exp()).abs()
        };
        let r = err(10) / err(20);
        assert!(r > 14.0 && r < 18.0, "{r}");
    }

    #[test]
    fn midpoint_cubic_exact_for_cubics() {
        let p = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t * t;
        let v: Vec<f64> = (0..7).map(|k| p(k as f64)).collect();
        let mut out = [0.0];
        for k in 0..6 {
            midpoint_cubic(&v, 1, k, &mut out);
            assert!((out[0] - p(k as f64 + 0.5)).abs() < 1e-12, "{k}");
        }
    }
}
