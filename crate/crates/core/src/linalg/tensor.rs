use crate::error::{Error, Result};

use super::Matrix;

/// Third-order tensor laid out `[sample][output][weight]`.
///
/// Horizontal slice `i` is the `d2 x d` Jacobian of sample `i`; lateral slice
/// `j` is the `n x d` matrix collecting output `j` over all samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    n: usize,
    d2: usize,
    d: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(n: usize, d2: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d2 * d {
            return Err(Error::shape("Tensor3::new", n * d2 * d, data.len()));
        }
        Ok(Self { n, d2, d, data })
    }

    pub fn zeros(n: usize, d2: usize, d: usize) -> Self {
        Self {
            n,
            d2,
            d,
            data: vec![0.0; n * d2 * d],
        }
    }

    /// Number of samples (horizontal slices).
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Output dimension.
    #[inline]
    pub fn d2(&self) -> usize {
        self.d2
    }

    /// Parameter dimension.
    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.d2, self.d)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d2 + j) * self.d + k]
    }

    /// Raw horizontal slice `i` (row-major `d2 x d`).
    #[inline]
    pub fn slice(&self, i: usize) -> &[f64] {
        let s = self.d2 * self.d;
        &self.data[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn slice_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.d2 * self.d;
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn horizontal_slice(&self, i: usize) -> Matrix {
        Matrix::new(self.d2, self.d, self.slice(i).to_vec()).expect("slice shape")
    }

    pub fn lateral_slice(&self, j: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.n * self.d);
        for i in 0..self.n {
            let off = (i * self.d2 + j) * self.d;
            data.extend_from_slice(&self.data[off..off + self.d]);
        }
        Matrix::new(self.n, self.d, data).expect("slice shape")
    }

    /// Builds a tensor whose horizontal slice `i` is `self.slice(perm[i])`.
    pub fn permute_slices(&self, perm: &[usize]) -> Result<Tensor3> {
        if perm.len() != self.n {
            return Err(Error::shape("permute_slices", self.n, perm.len()));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.slice(p));
        }
        Ok(Tensor3 {
            n: self.n,
            d2: self.d2,
            d: self.d,
            data,
        })
    }
}
