use std::cmp::Ordering;

use crate::error::{Error, Result};

use super::Tensor3;

/// Compressed tensor holding only the retained coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor3 {
    dims: (usize, usize, usize),
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseTensor3 {
    /// `indices` must be strictly increasing and inside the tensor.
    pub fn new(dims: (usize, usize, usize), indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        let total = dims.0 * dims.1 * dims.2;
        if indices.len() != values.len() {
            return Err(Error::shape(
                "SparseTensor3::new",
                indices.len(),
                values.len(),
            ));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "sparse indices must be strictly increasing".into(),
            ));
        }
        if indices.last().is_some_and(|&i| i as usize >= total) {
            return Err(Error::InvalidArgument(
                "sparse index out of range".into(),
            ));
        }
        Ok(Self {
            dims,
            indices,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn kept(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn densify(&self) -> Tensor3 {
        let (n, d2, d) = self.dims;
        let mut t = Tensor3::zeros(n, d2, d);
        let data = t.data_mut();
        for (i, v) in self.entries() {
            data[i] = v;
        }
        t
    }

    /// Bytes for values (f64) plus 32-bit indices.
    pub fn payload_bytes(&self) -> u64 {
        12 * self.kept() as u64
    }
}

/// Number of entries kept at `sparsity` out of `total`: ⌈(1−s)·total⌉.
pub(crate) fn kept_count(total: usize, sparsity: f64) -> usize {
    let x = (1.0 - sparsity) * total as f64;
    // shave representation error so that e.g. (1 − 0.9)·1000 gives 100, not 101
    let k = (x - x * 1e-12).ceil() as usize;
    k.min(total)
}

/// Keeps the `⌈(1−sparsity)·len⌉` entries of largest magnitude across the
/// whole tensor; ties go to the lower flat index.
pub fn topk_sparsify(t: &Tensor3, sparsity: f64) -> Result<SparseTensor3> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity must lie in [0,1), got {sparsity}"
        )));
    }
    let data = t.data();
    if data.len() > u32::MAX as usize {
        return Err(Error::InvalidArgument(
            "tensor too large for 32-bit sparse indices".into(),
        ));
    }
    let k = kept_count(data.len(), sparsity);
    let mut idx: Vec<u32> = (0..data.len() as u32).collect();
    if k < data.len() && k > 0 {
        let by_magnitude = |a: &u32, b: &u32| {
            let (va, vb) = (data[*a as usize].abs(), data[*b as usize].abs());
            vb.partial_cmp(&va)
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(b))
        };
        idx.select_nth_unstable_by(k - 1, by_magnitude);
        idx.truncate(k);
        idx.sort_unstable();
    } else {
        idx.truncate(k);
    }
    let values = idx.iter().map(|&i| data[i as usize]).collect();
    Ok(SparseTensor3 {
        dims: t.dims(),
        indices: idx,
        values,
    })
}
