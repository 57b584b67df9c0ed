use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
#[allow(unused_imports)]
use num_traits::Float;

/// Uniform grid `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    #[serde(rename = "T")]
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::param("T", "horizon must be positive"));
        }
        if n_steps == 0 {
            return Err(Error::param("n_steps", "need at least one step"));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    /// Grid with step closest to `dt`.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        let n = (horizon / dt).round() as usize;
        Self::new(horizon, n.max(1))
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.n_steps as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.t(k)).collect()
    }

    /// Grid with `factor` times fewer steps (same horizon).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::param("factor", "must divide the number of steps"));
        }
        Self::new(self.horizon, self.n_steps / factor)
    }

    pub fn refine(&self, factor: usize) -> Result<Self> {
        Self::new(self.horizon, self.n_steps * factor.max(1))
    }

    /// Grids agree when horizon and step count are identical.
    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps && (self.horizon - other.horizon).abs() <= 1e-12 * self.horizon
    }
}

/// A sequence of equally sized vectors stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecPath {
    dim: usize,
    data: Vec<f64>,
}

impl VecPath {
    pub fn zeros(len: usize, dim: usize) -> Self {
        VecPath {
            dim,
            data: vec![0.0; len * dim],
        }
    }

    pub fn with_capacity(len: usize, dim: usize) -> Self {
        VecPath {
            dim,
            data: Vec::with_capacity(len * dim),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim == 0 || data.len().is_multiple_of(dim));
        VecPath { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn get_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn push(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.dim);
        self.data.extend_from_slice(v);
    }

    pub fn last(&self) -> &[f64] {
        self.get(self.len() - 1)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

/// A sequence of equally shaped row-major matrices stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatPath {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatPath {
    pub fn zeros(len: usize, rows: usize, cols: usize) -> Self {
        MatPath {
            rows,
            cols,
            data: vec![0.0; len * rows * cols],
        }
    }

    pub fn with_capacity(len: usize, rows: usize, cols: usize) -> Self {
        MatPath {
            rows,
            cols,
            data: Vec::with_capacity(len * rows * cols),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        let sz = self.rows * self.cols;
        if sz == 0 {
            0
        } else {
            self.data.len() / sz
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        let sz = self.rows * self.cols;
        &self.data[k * sz..(k + 1) * sz]
    }

    pub fn get_mut(&mut self, k: usize) -> &mut [f64] {
        let sz = self.rows * self.cols;
        &mut self.data[k * sz..(k + 1) * sz]
    }

    pub fn matrix(&self, k: usize) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, self.get(k))
    }

    pub fn push(&mut self, m: &[f64]) {
        debug_assert_eq!(m.len(), self.rows * self.cols);
        self.data.extend_from_slice(m);
    }

    pub fn last(&self) -> &[f64] {
        self.get(self.len() - 1)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.rows * self.cols)
    }

    /// Owned row-major matrices, one per node.
    pub fn iter_rows(&self) -> Vec<Vec<f64>> {
        self.iter().map(|m| m.to_vec()).collect()
    }
}
