use crate::error::{Error, Result};

use super::{Matrix, SYMMETRY_TOLERANCE};

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix: `m = V·diag(values)·Vᵀ`.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix,
}

impl SymEig {
    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(f64::NAN)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(f64::NAN)
    }

    /// `V·diag(g(λ))·Vᵀ·v`.
    pub fn apply_fn(&self, v: &Matrix, g: impl Fn(f64) -> f64) -> Result<Matrix> {
        let mut coeffs = self.vectors.t_matmul(v)?;
        for (i, &lambda) in self.values.iter().enumerate() {
            let s = g(lambda);
            coeffs.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        self.vectors.matmul(&coeffs)
    }
}

pub(crate) fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::NonFinite("symmetric matrix input"));
    }
    let dev = m.asymmetry().ok_or_else(|| {
        Error::shape("symmetric matrix", "square", format!("{}x{}", m.rows(), m.cols()))
    })?;
    if dev > SYMMETRY_TOLERANCE * m.max_abs() {
        return Err(Error::NotSymmetric { deviation: dev });
    }
    Ok(())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    check_symmetric(m)?;
    let n = m.rows();
    // work on the exactly symmetrized copy
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= f64::EPSILON * 1e-2 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[(p, p)], a[(q, q)]);
                // skip rotations below round-off relative to the diagonal
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// `A ← JᵀAJ`, `V ← VJ` for the plane rotation on (p, q).
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let (akp, akq) = (a[(k, p)], a[(k, q)]);
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// `e^{−c·h}·v` for symmetric `h`.
pub fn sym_expm_apply(h: &Matrix, c: f64, v: &Matrix) -> Result<Matrix> {
    if h.rows() != v.rows() {
        return Err(Error::shape("sym_expm_apply", h.rows(), v.rows()));
    }
    if c == 0.0 {
        check_symmetric(h)?;
        return Ok(v.clone());
    }
    sym_eig(h)?.apply_fn(v, |lambda| (-c * lambda).exp())
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(m: &Matrix) -> Result<Self> {
        let n = m.rows();
        if m.cols() != n {
            return Err(Error::shape("cholesky", "square", format!("{}x{}", n, m.cols())));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::InvalidArgument(
                    "matrix is not positive definite".into(),
                ));
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                let (ri, rj) = (l.row(i), l.row(j));
                for k in 0..j {
                    s -= ri[k] * rj[k];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    /// Solves `m·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.l.rows();
        for i in 0..n {
            let row = self.l.row(i);
            let mut s = b[i];
            for k in 0..i {
                s -= row[k] * b[k];
            }
            b[i] = s / row[i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for (k, bk) in b.iter().enumerate().skip(i + 1) {
                s -= self.l[(k, i)] * bk;
            }
            b[i] = s / self.l[(i, i)];
        }
    }
}
