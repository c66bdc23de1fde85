//! Two-layer ReLU networks and their per-sample Jacobians.
//!
//! Two variants share one code path:
//!
//! * `Experiment`: `f(x) = W2·relu(W1·x + b1) + b2`, all four blocks trainable.
//! * `Theory`: `f(x) = (1/√n)·Σ_r c_r·relu(v_rᵀx)` with scalar output, trainable
//!   first layer and fixed output signs `c_r ∈ {−1, +1}`.
//!
//! Jacobians are formed by one backward pass per output component. The ReLU
//! derivative at exactly zero is taken as zero.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matrix::{gemm_raw, GemmOperand};
use crate::linalg::{Matrix, Tensor3};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Experiment,
    Theory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub variant: Variant,
}

/// A named block of the flattened weight vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub offset: usize,
    pub shape: (usize, usize),
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flattened trainable weights plus, for the theory variant, the frozen
/// output signs which live outside the trainable vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    params: Vec<f64>,
    layout: Vec<Segment>,
    output_signs: Vec<f64>,
}

impl ModelWeights {
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    /// Fixed `c_r` of the theory variant; empty for the experiment variant.
    pub fn output_signs(&self) -> &[f64] {
        &self.output_signs
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.range()])
    }

    /// Same layout and frozen parts, new trainable vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<ModelWeights> {
        if params.len() != self.params.len() {
            return Err(Error::shape("with_params", self.params.len(), params.len()));
        }
        Ok(ModelWeights {
            params,
            layout: self.layout.clone(),
            output_signs: self.output_signs.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.params.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Inputs and targets of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

impl Batch {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::shape("Batch::new", x.rows(), y.rows()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
        }
    }
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

impl ModelConfig {
    pub fn experiment(input_dim: usize, hidden: usize, output_dim: usize) -> Result<Self> {
        let cfg = Self {
            input_dim,
            hidden,
            output_dim,
            variant: Variant::Experiment,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn theory(input_dim: usize, hidden: usize) -> Result<Self> {
        let cfg = Self {
            input_dim,
            hidden,
            output_dim: 1,
            variant: Variant::Theory,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument(
                "model dimensions must be at least 1".into(),
            ));
        }
        if self.variant == Variant::Theory && self.output_dim != 1 {
            return Err(Error::InvalidArgument(
                "theory variant has a scalar output".into(),
            ));
        }
        Ok(())
    }

    /// Same architecture on a different input dimension.
    pub fn with_input_dim(&self, input_dim: usize) -> Result<Self> {
        let cfg = Self { input_dim, ..*self };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout(&self) -> Vec<Segment> {
        let (d1, n, d2) = (self.input_dim, self.hidden, self.output_dim);
        match self.variant {
            Variant::Theory => vec![Segment {
                name: "v",
                offset: 0,
                shape: (n, d1),
            }],
            Variant::Experiment => vec![
                Segment {
                    name: "w1",
                    offset: 0,
                    shape: (n, d1),
                },
                Segment {
                    name: "b1",
                    offset: n * d1,
                    shape: (n, 1),
                },
                Segment {
                    name: "w2",
                    offset: n * d1 + n,
                    shape: (d2, n),
                },
                Segment {
                    name: "b2",
                    offset: n * d1 + n + d2 * n,
                    shape: (d2, 1),
                },
            ],
        }
    }

    /// Trainable parameter count `d`.
    pub fn param_count(&self) -> usize {
        let (d1, n, d2) = (self.input_dim, self.hidden, self.output_dim);
        match self.variant {
            Variant::Theory => n * d1,
            Variant::Experiment => n * d1 + n + d2 * n + d2,
        }
    }

    /// Experiment: layers ~ N(0, 1/fan_in), zero biases. Theory: `v_r ~ N(0, I)`,
    /// `c_r` uniform on {−1, +1}.
    pub fn init_weights(&self, seed: u64) -> ModelWeights {
        let mut rng = rng::stream(seed);
        let (d1, n, d2) = (self.input_dim, self.hidden, self.output_dim);
        let mut params = vec![0.0; self.param_count()];
        let mut output_signs = Vec::new();
        match self.variant {
            Variant::Theory => {
                for p in params.iter_mut() {
                    *p = StandardNormal.sample(&mut rng);
                }
                output_signs = (0..n)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
            }
            Variant::Experiment => {
                let l1 = Normal::new(0.0, (1.0 / d1 as f64).sqrt()).expect("finite std");
                let l2 = Normal::new(0.0, (1.0 / n as f64).sqrt()).expect("finite std");
                for p in &mut params[..n * d1] {
                    *p = l1.sample(&mut rng);
                }
                let w2 = n * d1 + n;
                for p in &mut params[w2..w2 + d2 * n] {
                    *p = l2.sample(&mut rng);
                }
            }
        }
        ModelWeights {
            params,
            layout: self.layout(),
            output_signs,
        }
    }

    fn check_weights(&self, w: &ModelWeights) -> Result<()> {
        if w.params.len() != self.param_count() {
            return Err(Error::shape(
                "model weights",
                self.param_count(),
                w.params.len(),
            ));
        }
        if self.variant == Variant::Theory && w.output_signs.len() != self.hidden {
            return Err(Error::shape(
                "output signs",
                self.hidden,
                w.output_signs.len(),
            ));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::shape("model input", self.input_dim, x.cols()));
        }
        Ok(())
    }

    /// Hidden pre-activations `X·W1ᵀ (+ b1)`, `N x n`.
    fn pre_activations(&self, w: &ModelWeights, x: &Matrix) -> Matrix {
        let (d1, n) = (self.input_dim, self.hidden);
        let mut h = Matrix::zeros(x.rows(), n);
        gemm_raw(
            x.rows(),
            d1,
            n,
            GemmOperand::normal(x),
            GemmOperand::raw_transposed(&w.params[..n * d1], d1),
            h.data_mut(),
            n,
            false,
        );
        if self.variant == Variant::Experiment {
            let b1 = &w.params[n * d1..n * d1 + n];
            for i in 0..x.rows() {
                for (hv, b) in h.row_mut(i).iter_mut().zip(b1) {
                    *hv += b;
                }
            }
        }
        h
    }

    /// Network outputs, `N x d2`.
    pub fn forward(&self, w: &ModelWeights, x: &Matrix) -> Result<Matrix> {
        self.check_weights(w)?;
        self.check_inputs(x)?;
        let mut a = self.pre_activations(w, x);
        a.data_mut().iter_mut().for_each(|z| *z = relu(*z));
        Ok(self.readout(w, &a))
    }

    fn readout(&self, w: &ModelWeights, a: &Matrix) -> Matrix {
        let (d1, n, d2) = (self.input_dim, self.hidden, self.output_dim);
        match self.variant {
            Variant::Theory => {
                let s = 1.0 / (n as f64).sqrt();
                let out = (0..a.rows())
                    .map(|i| {
                        let dot: f64 = a.row(i).iter().zip(&w.output_signs).map(|(h, c)| h * c).sum();
                        s * dot
                    })
                    .collect();
                Matrix::column(out)
            }
            Variant::Experiment => {
                let w2_off = n * d1 + n;
                let mut out = Matrix::zeros(a.rows(), d2);
                gemm_raw(
                    a.rows(),
                    n,
                    d2,
                    GemmOperand::normal(a),
                    GemmOperand::raw_transposed(&w.params[w2_off..w2_off + d2 * n], n),
                    out.data_mut(),
                    d2,
                    false,
                );
                let b2 = &w.params[w2_off + d2 * n..];
                for i in 0..a.rows() {
                    for (o, b) in out.row_mut(i).iter_mut().zip(b2) {
                        *o += b;
                    }
                }
                out
            }
        }
    }

    /// Writes the `d2 x d` Jacobian of `f(x)` w.r.t. the trainable weights into `out`.
    fn jacobian_into(&self, w: &ModelWeights, x: &[f64], out: &mut [f64]) {
        let (d1, n, d2) = (self.input_dim, self.hidden, self.output_dim);
        let d = self.param_count();
        debug_assert_eq!(out.len(), d2 * d);
        let v = &w.params[..n * d1];
        match self.variant {
            Variant::Theory => {
                let s = 1.0 / (n as f64).sqrt();
                for r in 0..n {
                    let h: f64 = v[r * d1..(r + 1) * d1].iter().zip(x).map(|(a, b)| a * b).sum();
                    let coef = if h > 0.0 { s * w.output_signs[r] } else { 0.0 };
                    for (o, xi) in out[r * d1..(r + 1) * d1].iter_mut().zip(x) {
                        *o = coef * xi;
                    }
                }
            }
            Variant::Experiment => {
                let b1 = &w.params[n * d1..n * d1 + n];
                let w2_off = n * d1 + n;
                let w2 = &w.params[w2_off..w2_off + d2 * n];
                let mut act = vec![0.0; n];
                let mut active = vec![false; n];
                for r in 0..n {
                    let h: f64 = v[r * d1..(r + 1) * d1]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + b1[r];
                    active[r] = h > 0.0;
                    act[r] = relu(h);
                }
                for (j, row) in out.chunks_exact_mut(d).enumerate() {
                    let (w1_part, rest) = row.split_at_mut(n * d1);
                    let (b1_part, rest) = rest.split_at_mut(n);
                    let (w2_part, b2_part) = rest.split_at_mut(d2 * n);
                    for r in 0..n {
                        let coef = if active[r] { w2[j * n + r] } else { 0.0 };
                        b1_part[r] = coef;
                        for (o, xi) in w1_part[r * d1..(r + 1) * d1].iter_mut().zip(x) {
                            *o = coef * xi;
                        }
                    }
                    w2_part.fill(0.0);
                    w2_part[j * n..(j + 1) * n].copy_from_slice(&act);
                    b2_part.fill(0.0);
                    b2_part[j] = 1.0;
                }
            }
        }
    }

    /// `d2 x d` Jacobian of the output at a single input.
    pub fn per_sample_jacobian(&self, w: &ModelWeights, x: &[f64]) -> Result<Matrix> {
        self.check_weights(w)?;
        if x.len() != self.input_dim {
            return Err(Error::shape("per_sample_jacobian", self.input_dim, x.len()));
        }
        let mut out = Matrix::zeros(self.output_dim, self.param_count());
        self.jacobian_into(w, x, out.data_mut());
        Ok(out)
    }

    /// Stacks per-sample Jacobians into an `N x d2 x d` tensor, in row order.
    pub fn batch_jacobian(&self, w: &ModelWeights, x: &Matrix) -> Result<Tensor3> {
        self.check_weights(w)?;
        self.check_inputs(x)?;
        let (d2, d) = (self.output_dim, self.param_count());
        let mut t = Tensor3::zeros(x.rows(), d2, d);
        if d2 * d > 0 {
            t.data_mut()
                .par_chunks_mut(d2 * d)
                .enumerate()
                .for_each(|(i, slice)| self.jacobian_into(w, x.row(i), slice));
        }
        Ok(t)
    }

    /// Gradient of the halved-MSE loss, `(1/(N·d2))·Σ_i J(x_i)ᵀ(f(x_i) − y_i)`.
    pub fn batch_gradient(&self, w: &ModelWeights, batch: &Batch) -> Result<Vec<f64>> {
        self.check_weights(w)?;
        self.check_inputs(&batch.x)?;
        let (d1, n, d2) = (self.input_dim, self.hidden, self.output_dim);
        if batch.y.shape() != (batch.len(), d2) {
            return Err(Error::shape(
                "batch targets",
                format!("{}x{}", batch.len(), d2),
                format!("{}x{}", batch.y.rows(), batch.y.cols()),
            ));
        }
        let rows = batch.len();
        let mut grad = vec![0.0; self.param_count()];
        if rows == 0 {
            return Ok(grad);
        }
        let h = self.pre_activations(w, &batch.x);
        let mut a = h.clone();
        a.data_mut().iter_mut().for_each(|z| *z = relu(*z));
        let mut err = self.readout(w, &a).sub(&batch.y)?;
        err.scale(1.0 / (rows * d2) as f64);

        // dL/dh, N x n
        let mut delta = Matrix::zeros(rows, n);
        match self.variant {
            Variant::Theory => {
                let s = 1.0 / (n as f64).sqrt();
                for i in 0..rows {
                    let e = err[(i, 0)];
                    for r in 0..n {
                        delta[(i, r)] = s * e * w.output_signs[r];
                    }
                }
            }
            Variant::Experiment => {
                let w2_off = n * d1 + n;
                let w2 = &w.params[w2_off..w2_off + d2 * n];
                gemm_raw(
                    rows,
                    d2,
                    n,
                    GemmOperand::normal(&err),
                    GemmOperand::raw(w2, n),
                    delta.data_mut(),
                    n,
                    false,
                );
                // dW2 = errᵀ·A, db2 = colsum(err)
                gemm_raw(
                    d2,
                    rows,
                    n,
                    GemmOperand::transposed(&err),
                    GemmOperand::normal(&a),
                    &mut grad[w2_off..w2_off + d2 * n],
                    n,
                    false,
                );
                let gb2 = &mut grad[w2_off + d2 * n..];
                for i in 0..rows {
                    for (g, e) in gb2.iter_mut().zip(err.row(i)) {
                        *g += e;
                    }
                }
            }
        }
        for (dv, hv) in delta.data_mut().iter_mut().zip(h.data()) {
            if *hv <= 0.0 {
                *dv = 0.0;
            }
        }
        gemm_raw(
            n,
            rows,
            d1,
            GemmOperand::transposed(&delta),
            GemmOperand::normal(&batch.x),
            &mut grad[..n * d1],
            d1,
            false,
        );
        if self.variant == Variant::Experiment {
            let gb1 = &mut grad[n * d1..n * d1 + n];
            for i in 0..rows {
                for (g, dv) in gb1.iter_mut().zip(delta.row(i)) {
                    *g += dv;
                }
            }
        }
        Ok(grad)
    }
}

/// Halved MSE averaged over samples and outputs:
/// `(1/N)·Σ_i (1/d2)·Σ_j ½(ŷ_ij − y_ij)²`.
pub fn loss(pred: &Matrix, y: &Matrix) -> Result<f64> {
    if pred.shape() != y.shape() {
        return Err(Error::shape(
            "loss",
            format!("{}x{}", y.rows(), y.cols()),
            format!("{}x{}", pred.rows(), pred.cols()),
        ));
    }
    if pred.data().is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * sq / pred.data().len() as f64)
}
