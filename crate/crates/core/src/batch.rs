use alloc::vec;
use alloc::vec::Vec;

use rand_distr::StandardNormal;

use crate::error::{input_err, Result};

/// A set of points in `R^dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(input_err!("batch dimension must be positive"));
        }
        if data.len() % dim != 0 {
            return Err(input_err!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            ));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize, len: usize) -> Self {
        assert!(dim > 0, "batch dimension must be positive");
        Self { dim, data: vec![0.0; dim * len] }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(dim * rows.len());
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(input_err!("row of length {} in a {dim}-d batch", row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    /// Standard normal draws, row by row.
    pub fn standard_normal<R: rand::Rng + ?Sized>(dim: usize, len: usize, rng: &mut R) -> Self {
        let data = (0..dim * len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> core::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.rows() {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Sample covariance (normalized by `len - 1`), row-major `dim x dim`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let m = self.mean();
        let mut c = vec![0.0; d * d];
        for row in self.rows() {
            for i in 0..d {
                let di = row[i] - m[i];
                for j in 0..d {
                    c[i * d + j] += di * (row[j] - m[j]);
                }
            }
        }
        let n = (self.len().max(2) - 1) as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }
}

/// Anything that can draw i.i.d. points from a data distribution.
pub trait DataSource {
    fn dim(&self) -> usize;

    fn sample_into(&self, rng: &mut crate::Rng, out: &mut [f64]);

    fn sample_batch(&self, count: usize, rng: &mut crate::Rng) -> Batch {
        let mut b = Batch::zeros(self.dim(), count);
        for i in 0..count {
            self.sample_into(rng, b.row_mut(i));
        }
        b
    }
}
