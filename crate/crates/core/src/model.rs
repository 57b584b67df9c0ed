//! Model definitions.
//!
//! Matrix conventions follow the filter `dπ = Aᵀπ dt`: `A[i][j]` is the
//! jump rate from state `i` to state `j`. In [`FiniteModel`] the observation
//! matrix is `d x m` (`h(e_i)` is row `i`); in [`LinearGaussianModel`] it is
//! `m x d` (`h(x) = H x`). The two are never converted implicitly.

use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::algebra::validate_generator;
use crate::error::{Error, Result};
use crate::linalg;
#[allow(unused_imports)]
use num_traits::Float;

/// Vectors closer than this to the simplex are renormalized onto it.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Clamps tiny negative entries and renormalizes; rejects vectors further
/// than [`SIMPLEX_TOL`] from the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = v.iter().sum();
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min >= -SIMPLEX_TOL) || !((sum - 1.0).abs() <= SIMPLEX_TOL) {
        return Err(Error::NotOnSimplex { sum, min });
    }
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let s: f64 = clipped.iter().sum();
    Ok(clipped.into_iter().map(|x| x / s).collect())
}

pub(crate) mod rowmajor {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> core::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> core::result::Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}

pub(crate) mod vector {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> core::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> core::result::Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

/// Wire form of [`FiniteModel`]; field names match the document format.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteModelDoc {
    pub d: usize,
    #[serde(with = "rowmajor")]
    pub A: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub H: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub R: DMatrix<f64>,
    #[serde(with = "vector")]
    pub prior: DVector<f64>,
    pub T: f64,
}

/// Finite-state hidden Markov model observed through `dZ = Hᵀx dt + dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FiniteModelDoc", into = "FiniteModelDoc")]
pub struct FiniteModel {
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    prior: DVector<f64>,
    horizon: f64,
    r_inv: DMatrix<f64>,
    r_chol: DMatrix<f64>,
}

fn check_noise_cov(r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !linalg::is_symmetric(r, 1e-12) {
        return Err(Error::NotPositiveDefinite("R"));
    }
    let chol = linalg::cholesky(r).ok_or(Error::NotPositiveDefinite("R"))?;
    let inv = linalg::inverse_spd(r).ok_or(Error::NotPositiveDefinite("R"))?;
    Ok((inv, chol))
}

impl FiniteModel {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        r: DMatrix<f64>,
        prior: DVector<f64>,
        horizon: f64,
    ) -> Result<Self> {
        let d = a.nrows();
        validate_generator(&a).map_err(Error::InvalidGenerator)?;
        if h.nrows() != d {
            return Err(Error::dim("H must have one row per state"));
        }
        let m = h.ncols();
        if r.nrows() != m || r.ncols() != m {
            return Err(Error::dim("R must be m x m"));
        }
        if prior.len() != d {
            return Err(Error::dim("prior must have d entries"));
        }
        let prior = DVector::from_vec(project_to_simplex(prior.as_slice())?);
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::param("T", "horizon must be positive"));
        }
        let (r_inv, r_chol) = check_noise_cov(&r)?;
        Ok(FiniteModel {
            a,
            h,
            r,
            prior,
            horizon,
            r_inv,
            r_chol,
        })
    }

    /// Two-state symmetric chain with rate 1, `h = (1, 0)`, `R = 1`,
    /// uniform prior and unit horizon.
    pub fn canonical() -> Self {
        FiniteModel::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_vec(alloc::vec![0.5, 0.5]),
            1.0,
        )
        .expect("canonical model is valid")
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.h.ncols()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }
    /// Lower Cholesky factor of `R`.
    pub fn r_chol(&self) -> &DMatrix<f64> {
        &self.r_chol
    }
    pub fn prior(&self) -> &DVector<f64> {
        &self.prior
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn with_observation(&self, h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        FiniteModel::new(self.a.clone(), h, r, self.prior.clone(), self.horizon)
    }

    pub fn with_prior(&self, prior: DVector<f64>) -> Result<Self> {
        FiniteModel::new(self.a.clone(), self.h.clone(), self.r.clone(), prior, self.horizon)
    }

    pub fn with_generator(&self, a: DMatrix<f64>) -> Result<Self> {
        FiniteModel::new(a, self.h.clone(), self.r.clone(), self.prior.clone(), self.horizon)
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        FiniteModel::new(self.a.clone(), self.h.clone(), self.r.clone(), self.prior.clone(), horizon)
    }
}

impl TryFrom<FiniteModelDoc> for FiniteModel {
    type Error = Error;
    fn try_from(doc: FiniteModelDoc) -> Result<Self> {
        if doc.A.nrows() != doc.d || doc.A.ncols() != doc.d {
            return Err(Error::dim("A must be d x d"));
        }
        FiniteModel::new(doc.A, doc.H, doc.R, doc.prior, doc.T)
    }
}

impl From<FiniteModel> for FiniteModelDoc {
    fn from(m: FiniteModel) -> Self {
        FiniteModelDoc {
            d: m.d(),
            A: m.a,
            H: m.h,
            R: m.r,
            prior: m.prior,
            T: m.horizon,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearGaussianDoc {
    #[serde(with = "rowmajor")]
    pub A: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub H: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub Q: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub R: DMatrix<f64>,
    #[serde(with = "vector")]
    pub m0: DVector<f64>,
    #[serde(with = "rowmajor")]
    pub Sigma0: DMatrix<f64>,
    pub T: f64,
}

/// `dX = AX dt + σ dB`, `dZ = HX dt + dW`, `X_0 ~ N(m0, Σ0)`, with
/// `Q = σσᵀ` and `H` of shape `m x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinearGaussianDoc", into = "LinearGaussianDoc")]
pub struct LinearGaussianModel {
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    m0: DVector<f64>,
    sigma0: DMatrix<f64>,
    horizon: f64,
    r_inv: DMatrix<f64>,
    r_chol: DMatrix<f64>,
    q_sqrt: DMatrix<f64>,
    sigma0_sqrt: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        m0: DVector<f64>,
        sigma0: DMatrix<f64>,
        horizon: f64,
    ) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d {
            return Err(Error::dim("A must be square"));
        }
        if h.ncols() != d {
            return Err(Error::dim("H must be m x d"));
        }
        let m = h.nrows();
        if r.nrows() != m || r.ncols() != m {
            return Err(Error::dim("R must be m x m"));
        }
        if q.nrows() != d || q.ncols() != d || sigma0.nrows() != d || sigma0.ncols() != d {
            return Err(Error::dim("Q and Sigma0 must be d x d"));
        }
        if m0.len() != d {
            return Err(Error::dim("m0 must have d entries"));
        }
        for (name, mat) in [("Q", &q), ("Sigma0", &sigma0)] {
            if !linalg::is_symmetric(mat, 1e-12) || linalg::min_eigenvalue(mat) < -1e-12 * mat.amax().max(1.0) {
                return Err(Error::NotPositiveSemidefinite(name));
            }
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::param("T", "horizon must be positive"));
        }
        let (r_inv, r_chol) = check_noise_cov(&r)?;
        let q_sqrt = linalg::psd_sqrt(&q);
        let sigma0_sqrt = linalg::psd_sqrt(&sigma0);
        Ok(LinearGaussianModel {
            a,
            h,
            q,
            r,
            m0,
            sigma0,
            horizon,
            r_inv,
            r_chol,
            q_sqrt,
            sigma0_sqrt,
        })
    }

    /// Scalar model `dX = a X dt + sqrt(q) dB`, `dZ = h X dt + dW`.
    pub fn scalar(a: f64, h: f64, q: f64, r: f64, m0: f64, s0: f64, horizon: f64) -> Result<Self> {
        let one = |x: f64| DMatrix::from_element(1, 1, x);
        LinearGaussianModel::new(one(a), one(h), one(q), one(r), DVector::from_element(1, m0), one(s0), horizon)
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.h.nrows()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }
    pub fn r_chol(&self) -> &DMatrix<f64> {
        &self.r_chol
    }
    pub fn m0(&self) -> &DVector<f64> {
        &self.m0
    }
    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    /// Symmetric square root of `Q`, used as the noise loading `σ`.
    pub fn q_sqrt(&self) -> &DMatrix<f64> {
        &self.q_sqrt
    }
    pub fn sigma0_sqrt(&self) -> &DMatrix<f64> {
        &self.sigma0_sqrt
    }

    pub fn with_observation(&self, h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        LinearGaussianModel::new(
            self.a.clone(),
            h,
            self.q.clone(),
            r,
            self.m0.clone(),
            self.sigma0.clone(),
            self.horizon,
        )
    }
}

impl TryFrom<LinearGaussianDoc> for LinearGaussianModel {
    type Error = Error;
    fn try_from(doc: LinearGaussianDoc) -> Result<Self> {
        LinearGaussianModel::new(doc.A, doc.H, doc.Q, doc.R, doc.m0, doc.Sigma0, doc.T)
    }
}

impl From<LinearGaussianModel> for LinearGaussianDoc {
    fn from(m: LinearGaussianModel) -> Self {
        LinearGaussianDoc {
            A: m.a,
            H: m.h,
            Q: m.q,
            R: m.r,
            m0: m.m0,
            Sigma0: m.sigma0,
            T: m.horizon,
        }
    }
}

/// Closed-form scalar functions used by [`Diffusion1DModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarFn {
    Constant { value: f64 },
    Affine { slope: f64, intercept: f64 },
    /// `c[0] + c[1] x + c[2] x² + ...`
    Polynomial { coeffs: Vec<f64> },
    Sin { amplitude: f64, frequency: f64, phase: f64 },
}

impl ScalarFn {
    pub fn constant(value: f64) -> Self {
        ScalarFn::Constant { value }
    }

    pub fn linear(slope: f64) -> Self {
        ScalarFn::Affine { slope, intercept: 0.0 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Constant { value } => *value,
            ScalarFn::Affine { slope, intercept } => slope * x + intercept,
            ScalarFn::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
            ScalarFn::Sin {
                amplitude,
                frequency,
                phase,
            } => amplitude * (frequency * x + phase).sin(),
        }
    }
}

/// Prior for [`Diffusion1DModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorDensity {
    Gaussian { mean: f64, std: f64 },
    Uniform,
    /// All mass at the grid node nearest to `x`.
    PointMass { x: f64 },
}

impl PriorDensity {
    /// Density on `[lo, hi]`; `None` for a point mass.
    pub fn density(&self, x: f64, lo: f64, hi: f64) -> Option<f64> {
        match self {
            PriorDensity::Gaussian { mean, std } => {
                let z = (x - mean) / std;
                Some((-0.5 * z * z).exp() / (std * (2.0 * core::f64::consts::PI).sqrt()))
            }
            PriorDensity::Uniform => Some(if x >= lo && x <= hi { 1.0 / (hi - lo) } else { 0.0 }),
            PriorDensity::PointMass { .. } => None,
        }
    }
}

/// One-dimensional diffusion `dX = a(X) dt + σ(X) dB` observed through
/// `dZ = h(X) dt + dW`, truncated to `domain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diffusion1DModel {
    pub drift: ScalarFn,
    pub sigma: ScalarFn,
    pub obs: Vec<ScalarFn>,
    #[serde(rename = "R", with = "rowmajor")]
    pub r: DMatrix<f64>,
    pub prior: PriorDensity,
    pub domain: [f64; 2],
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Ellipticity bound: `σ(x) ≥ epsilon` on the domain.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-6
}

impl Diffusion1DModel {
    /// Checks ellipticity on `n_check` points and that the prior integrates
    /// to one (Simpson rule) within `1e-3`.
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.domain;
        if !(hi > lo) {
            return Err(Error::param("domain", "need x_lo < x_hi"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be positive"));
        }
        let m = self.obs.len();
        if m == 0 || self.r.nrows() != m || self.r.ncols() != m {
            return Err(Error::dim("R must be m x m with m = number of observation functions"));
        }
        check_noise_cov(&self.r)?;
        if !(self.horizon > 0.0) {
            return Err(Error::param("T", "horizon must be positive"));
        }
        let n_check = 2001;
        let h = (hi - lo) / (n_check - 1) as f64;
        let mut integral = 0.0;
        for i in 0..n_check {
            let x = lo + h * i as f64;
            if !(self.sigma.eval(x).abs() >= self.epsilon) {
                return Err(Error::InvalidParameter {
                    name: "sigma",
                    reason: alloc::format!("ellipticity fails at x = {x}"),
                });
            }
            if let Some(p) = self.prior.density(x, lo, hi) {
                if p < 0.0 {
                    return Err(Error::param("prior", "density must be nonnegative"));
                }
                let w = if i == 0 || i == n_check - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                integral += w * p;
            }
        }
        if !matches!(self.prior, PriorDensity::PointMass { .. }) {
            integral *= h / 3.0;
            if (integral - 1.0).abs() > 1e-3 {
                return Err(Error::InvalidParameter {
                    name: "prior",
                    reason: alloc::format!("density integrates to {integral} on the domain"),
                });
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        alloc::format!("1-D diffusion on [{}, {}]", self.domain[0], self.domain[1])
    }

    pub fn r_chol(&self) -> Result<DMatrix<f64>> {
        check_noise_cov(&self.r).map(|(_, l)| l)
    }

    /// The linear-Gaussian model with the same law when the drift and the
    /// observation functions are linear, `σ` is constant and the prior is
    /// Gaussian. The domain truncation is ignored.
    pub fn as_linear_gaussian(&self) -> Option<LinearGaussianModel> {
        let linear = |f: &ScalarFn| match f {
            ScalarFn::Affine { slope, intercept } if *intercept == 0.0 => Some(*slope),
            ScalarFn::Constant { value } if *value == 0.0 => Some(0.0),
            ScalarFn::Polynomial { coeffs } if coeffs.len() <= 2 && coeffs.first().is_none_or(|c| *c == 0.0) => {
                Some(coeffs.get(1).copied().unwrap_or(0.0))
            }
            _ => None,
        };
        let a = linear(&self.drift)?;
        let ScalarFn::Constant { value: sigma } = self.sigma else {
            return None;
        };
        let PriorDensity::Gaussian { mean, std } = self.prior else {
            return None;
        };
        let h: Vec<f64> = self.obs.iter().map(linear).collect::<Option<_>>()?;
        LinearGaussianModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_column_slice(h.len(), 1, &h),
            DMatrix::from_element(1, 1, sigma * sigma),
            self.r.clone(),
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, std * std),
            self.horizon,
        )
        .ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn canonical_model_is_valid() {
        let m = FiniteModel::canonical();
        assert_eq!(m.d(), 2);
        assert_eq!(m.m(), 1);
        assert_eq!(m.r_inv()[(0, 0)], 1.0);
    }

    #[test]
    fn rejects_degenerate_noise() {
        let m = FiniteModel::canonical();
        let err = m.with_observation(m.h().clone(), DMatrix::zeros(1, 1)).unwrap_err();
        assert_eq!(err, Error::NotPositiveDefinite("R"));
    }

    #[test]
    fn prior_is_renormalized_only_near_the_simplex() {
        let m = FiniteModel::canonical();
        let p = m.with_prior(DVector::from_vec(vec![0.5 + 5e-10, 0.5])).unwrap();
        assert!((p.prior().sum() - 1.0).abs() < 1e-15);
        assert!(m.with_prior(DVector::from_vec(vec![0.6, 0.5])).is_err());
        assert!(m.with_prior(DVector::from_vec(vec![1.1, -0.1])).is_err());
    }

    #[test]
    fn rejects_invalid_generator_and_horizon() {
        let m = FiniteModel::canonical();
        assert!(m.with_generator(DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -1.0])).is_err());
        assert!(m.with_horizon(0.0).is_err());
    }

    #[test]
    fn linear_gaussian_validation() {
        assert!(LinearGaussianModel::scalar(-1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0).is_ok());
        assert!(LinearGaussianModel::scalar(-1.0, 1.0, -1.0, 1.0, 0.0, 1.0, 1.0).is_err());
        assert!(LinearGaussianModel::scalar(-1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn scalar_fn_evaluation() {
        let p = ScalarFn::Polynomial { coeffs: vec![1.0, -2.0, 3.0] };
        assert_eq!(p.eval(2.0), 1.0 - 4.0 + 12.0);
        assert_eq!(ScalarFn::linear(-1.0).eval(3.0), -3.0);
    }

    #[test]
    fn diffusion_validation_checks_ellipticity_and_prior_mass() {
        let mut model = Diffusion1DModel {
            drift: ScalarFn::linear(-1.0),
            sigma: ScalarFn::constant(1.0),
            obs: vec![ScalarFn::linear(1.0)],
            r: DMatrix::from_element(1, 1, 1.0),
            prior: PriorDensity::Gaussian { mean: 0.0, std: 1.0 },
            domain: [-6.0, 6.0],
            horizon: 1.0,
            epsilon: 1e-3,
        };
        assert!(model.validate().is_ok());
        model.sigma = ScalarFn::linear(1.0);
        assert!(model.validate().is_err());
        model.sigma = ScalarFn::constant(1.0);
        model.domain = [-1.0, 1.0];
        assert!(model.validate().is_err());
    }
}
