//! Dense 64-bit linear algebra: matrices, third-order Jacobian tensors, a
//! Jacobi symmetric eigensolver and top-k magnitude sparsification.

mod eig;
pub(crate) mod matrix;
pub(crate) mod sparse;
mod tensor;

pub(crate) use eig::check_symmetric;
pub use eig::{sym_eig, sym_expm_apply, Cholesky, SymEig};
pub use matrix::{frobenius_inner, Matrix};
pub use sparse::{topk_sparsify, SparseTensor3};
pub use tensor::Tensor3;

/// Relative asymmetry tolerated by routines that require symmetric input.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
