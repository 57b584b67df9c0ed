//! One-step integrators for Itô systems `dX = a(X) dt + b(X) dW` with `W`
//! a standard `m`-dimensional Brownian motion and `b` stored row-major
//! (`n x m`).

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

/// Integration scheme for stochastic updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler–Maruyama, strong order 1/2.
    EulerMaruyama,
    /// Derivative-free Milstein (Platen), strong order 1 for scalar or
    /// commutative noise.
    #[default]
    Milstein,
}

/// Reusable buffers for [`Stepper::step`].
#[derive(Debug, Clone)]
pub struct Stepper {
    n: usize,
    m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    support: Vec<f64>,
    b_support: Vec<f64>,
    corr: Vec<f64>,
}

impl Stepper {
    pub fn new(n: usize, m: usize) -> Self {
        Stepper {
            n,
            m,
            a: vec![0.0; n],
            b: vec![0.0; n * m],
            support: vec![0.0; n],
            b_support: vec![0.0; n * m],
            corr: vec![0.0; n],
        }
    }

    /// Advances `x` in place by one step with Brownian increment `dw`.
    ///
    /// The Milstein correction uses `ΔW_j ΔW_k` in place of the iterated
    /// integrals, which is exact when the noise is scalar or commutative.
    pub fn step<A, B>(&mut self, scheme: Scheme, x: &mut [f64], dt: f64, dw: &[f64], mut drift: A, mut diffusion: B)
    where
        A: FnMut(&[f64], &mut [f64]),
        B: FnMut(&[f64], &mut [f64]),
    {
        let (n, m) = (self.n, self.m);
        drift(x, &mut self.a);
        diffusion(x, &mut self.b);
        if scheme == Scheme::Milstein {
            let sq = dt.sqrt();
            let corr = &mut self.corr;
            corr.iter_mut().for_each(|c| *c = 0.0);
            for j in 0..m {
                for i in 0..n {
                    self.support[i] = x[i] + self.a[i] * dt + self.b[i * m + j] * sq;
                }
                diffusion(&self.support, &mut self.b_support);
                for k in 0..m {
                    let iter = if j == k { 0.5 * (dw[j] * dw[j] - dt) } else { 0.5 * dw[j] * dw[k] };
                    for i in 0..n {
                        corr[i] += (self.b_support[i * m + k] - self.b[i * m + k]) * iter / sq;
                    }
                }
            }
            for i in 0..n {
                x[i] += corr[i];
            }
        }
        for i in 0..n {
            let mut s = self.a[i] * dt;
            for j in 0..m {
                s += self.b[i * m + j] * dw[j];
            }
            x[i] += s;
        }
    }
}
