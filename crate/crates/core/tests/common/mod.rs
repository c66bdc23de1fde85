#![allow(dead_code)]

use ntkfed::data::{make_synthetic, unit_normalize};
use ntkfed::linalg::{Matrix, Tensor3};
use ntkfed::model::{Batch, ModelConfig, ModelWeights};
use ntkfed::ntk::{self, GlobalState};
use ntkfed::{fed, rng};
use rand::Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed);
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

pub fn random_tensor(n: usize, d2: usize, d: usize, seed: u64) -> Tensor3 {
    let mut r = rng::stream(seed);
    Tensor3::new(n, d2, d, (0..n * d2 * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Unit-norm inputs with ±1 targets.
pub fn theory_batch(samples: usize, d1: usize, seed: u64) -> Batch {
    let ds = unit_normalize(&make_synthetic(samples, d1, 2, seed).unwrap()).unwrap();
    let y = Matrix::from_fn(samples, 1, |i, _| if ds.labels[i] == 0 { -1.0 } else { 1.0 });
    Batch::new(ds.x, y).unwrap()
}

pub fn state_for(cfg: &ModelConfig, w: &ModelWeights, b: &Batch, eta: f64) -> GlobalState {
    let u = fed::client_update(cfg, w, b, 0).unwrap();
    let mut st = ntk::assemble_global(vec![u], eta).unwrap();
    st.ensure_kernel();
    st
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Naive triple loop.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}

/// `t` steps of gradient descent on `f_lin(w) = f0 + J·(w − w0)` with the
/// halved-MSE loss, written out loop by loop.
pub fn linearized_gd(st: &GlobalState, w0: &[f64], t: usize) -> Vec<f64> {
    let (n, d2, d) = st.jacobian.dims();
    let mut w = w0.to_vec();
    for _ in 0..t {
        let mut grad = vec![0.0; d];
        for i in 0..n {
            for j in 0..d2 {
                let row = &st.jacobian.slice(i)[j * d..(j + 1) * d];
                let mut f = st.initial_outputs[(i, j)];
                for k in 0..d {
                    f += row[k] * (w[k] - w0[k]);
                }
                let r = f - st.labels[(i, j)];
                for k in 0..d {
                    grad[k] += r * row[k] / (n * d2) as f64;
                }
            }
        }
        for k in 0..d {
            w[k] -= st.eta * grad[k];
        }
    }
    w
}
