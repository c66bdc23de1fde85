//! Numerical checks of the convergence theory on finite networks: kernel
//! spectrum, residual decay against its envelope, the FedAvg decay monitor,
//! the NTK-vs-GD weight gap and activation-pattern flips.

use std::f64::consts::PI;
use std::io::Write;

use crate::error::{Error, Result};
use crate::fed::{self, fmt_float, RoundMetrics};
use crate::linalg::{check_symmetric, sym_eig, Cholesky, Matrix};
use crate::model::{Batch, ModelConfig, ModelWeights, Variant};
use crate::ntk::{self, GlobalState};

/// Largest kernel handled by the full eigendecomposition.
const DENSE_SPECTRUM_LIMIT: usize = 512;
const MAX_ITERATIONS: usize = 5000;
/// Confidence level `δ` of the probabilistic bounds.
pub const DELTA: f64 = 0.05;
/// Minimum eigenvalue `α` of the input covariance at initialization.
pub const ALPHA: f64 = 1.0;
/// Relative slack for round-off when comparing residuals with envelopes.
const ENVELOPE_SLACK: f64 = 1e-9;

/// `(λ_min, λ_max)` of a symmetric matrix.
pub fn kernel_spectrum(theta: &Matrix) -> Result<(f64, f64)> {
    check_symmetric(theta)?;
    let n = theta.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty kernel".into()));
    }
    if n <= DENSE_SPECTRUM_LIMIT {
        let e = sym_eig(theta)?;
        return Ok((e.min(), e.max()));
    }
    let lambda_max = power_iteration(n, |v, out| matvec(theta, v, out));
    // inverse iteration on Θ + sI, with s raised until the factorization succeeds
    let mut shift = 1e-12 * lambda_max.abs().max(f64::MIN_POSITIVE);
    let chol = loop {
        let shifted = Matrix::from_fn(n, n, |i, j| theta[(i, j)] + if i == j { shift } else { 0.0 });
        match Cholesky::factor(&shifted) {
            Ok(c) => break c,
            Err(_) if shift < 1e3 * lambda_max.abs() => shift *= 10.0,
            Err(e) => return Err(e),
        }
    };
    let v = dominant_vector(n, |v, out| {
        out.copy_from_slice(v);
        chol.solve_in_place(out);
    });
    let mut tv = vec![0.0; n];
    matvec(theta, &v, &mut tv);
    let lambda_min = dot(&v, &tv);
    Ok((lambda_min, lambda_max))
}

fn matvec(m: &Matrix, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), v);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Unit vector along the dominant eigendirection of a symmetric PSD operator.
fn dominant_vector(n: usize, op: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
    // deterministic start with no special alignment to structured kernels
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 101) as f64 / 101.0).collect();
    normalize(&mut v);
    let mut w = vec![0.0; n];
    let mut prev = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        op(&v, &mut w);
        let rq = dot(&v, &w);
        if normalize(&mut w) == 0.0 {
            return v;
        }
        std::mem::swap(&mut v, &mut w);
        if (rq - prev).abs() <= 1e-14 * rq.abs() {
            break;
        }
        prev = rq;
    }
    v
}

fn power_iteration(n: usize, op: impl Fn(&[f64], &mut [f64])) -> f64 {
    let v = dominant_vector(n, &op);
    let mut w = vec![0.0; n];
    op(&v, &mut w);
    dot(&v, &w)
}

#[derive(Clone, Debug)]
pub struct DecayReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eta: f64,
    pub n: usize,
    /// `‖f⁽ᵗ⁾ − Y‖²` for `t = 0..=t_max`.
    pub residuals: Vec<f64>,
    /// `(1 − η·λ_min/N)^{2t}·‖f⁽⁰⁾ − Y‖²`, the asserted envelope.
    pub envelope: Vec<f64>,
    /// `(1 − η·λ_min/(2N))^t·‖f⁽⁰⁾ − Y‖²`, reported alongside.
    pub theorem_envelope: Vec<f64>,
    /// Steps where the residual exceeds `envelope`.
    pub violations: Vec<usize>,
    /// `η ≤ N/λ_max`; the envelope is only guaranteed when this holds.
    pub applicable: bool,
}

/// Runs the function recursion to `t_max` and compares every step with the
/// decay envelope built from the empirical kernel's `λ_min`.
pub fn check_decay(state: &mut GlobalState, t_max: usize) -> Result<DecayReport> {
    state.ensure_kernel();
    let (lambda_min, lambda_max) = kernel_spectrum(state.kernel()?)?;
    let n = state.n();
    let eta = state.eta;
    let evo = ntk::evolve_function(state, &[t_max])?;
    let r0 = evo.residual_history[0];
    let lmin = lambda_min.max(0.0);
    let rate = 1.0 - eta * lmin / n as f64;
    let rate_half = 1.0 - eta * lmin / (2.0 * n as f64);
    let envelope: Vec<f64> = (0..=t_max).map(|t| rate.powi(2 * t as i32) * r0).collect();
    let theorem_envelope: Vec<f64> = (0..=t_max).map(|t| rate_half.powi(t as i32) * r0).collect();
    // f − Y loses about ε·‖f‖ per step to rounding, so the residual norm
    // carries an absolute error growing linearly in t
    let scale = state.labels.frobenius_norm().max(state.initial_outputs.frobenius_norm());
    let violations = evo
        .residual_history
        .iter()
        .zip(&envelope)
        .enumerate()
        .filter(|(t, (r, e))| {
            let rounding = 4.0 * (*t + 1) as f64 * f64::EPSILON * scale;
            r.sqrt() > e.sqrt() * (1.0 + ENVELOPE_SLACK) + rounding
        })
        .map(|(t, _)| t)
        .collect();
    Ok(DecayReport {
        lambda_min,
        lambda_max,
        eta,
        n,
        residuals: evo.residual_history,
        envelope,
        theorem_envelope,
        violations,
        applicable: eta <= n as f64 / lambda_max,
    })
}

/// One round of the FedAvg decay monitor.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMonitorRow {
    pub round: usize,
    /// Squared-residual ratio after/before; `None` when the start residual is 0.
    pub ratio: Option<f64>,
    /// `1 − η·τ·λ/(2·N_k·M_k)`; `None` without a kernel eigenvalue.
    pub envelope: Option<f64>,
}

/// Side-by-side empirical ratio and envelope per round. `lambdas[i]` is the
/// kernel eigenvalue surrogate for round `trace[i]`.
pub fn fedavg_decay_monitor(
    trace: &[RoundMetrics],
    eta: f64,
    tau: usize,
    samples_per_round: &[usize],
    lambdas: &[Option<f64>],
) -> Vec<DecayMonitorRow> {
    trace
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let ratio = (m.residual_before > 0.0).then(|| m.residual_after / m.residual_before);
            let mk = m.cohort.len().max(1) as f64;
            let envelope = match (lambdas.get(i).copied().flatten(), samples_per_round.get(i)) {
                (Some(l), Some(&nk)) if nk > 0 => {
                    Some(fedavg_envelope(eta, tau, l, nk, mk as usize))
                }
                _ => None,
            };
            DecayMonitorRow {
                round: m.round,
                ratio,
                envelope,
            }
        })
        .collect()
}

pub fn fedavg_envelope(eta: f64, tau: usize, lambda: f64, n_k: usize, m_k: usize) -> f64 {
    1.0 - eta * tau as f64 * lambda / (2.0 * n_k as f64 * m_k as f64)
}

/// Squared-residual ratios after one NTK-FL round and one FedAvg round from
/// the same weights on the same cohort.
#[derive(Clone, Copy, Debug)]
pub struct PairedDecay {
    pub ntk_ratio: f64,
    pub fedavg_ratio: f64,
}

pub fn paired_round_decay(
    model: &ModelConfig,
    w: &ModelWeights,
    data: &fed::FedData,
    cohort: &[usize],
    cfg: &fed::RoundConfig,
) -> Result<PairedDecay> {
    let (_, ntk) = fed::ntkfl_round_on(model, w, data, cohort, cfg, 1)?;
    let (_, avg) = fed::fedavg_round_on(model, w, data, cohort, cfg, 1)?;
    Ok(PairedDecay {
        ntk_ratio: ntk.residual_after / ntk.residual_before,
        fedavg_ratio: avg.residual_after / avg.residual_before,
    })
}

#[derive(Clone, Debug)]
pub struct GapReport {
    pub t_grid: Vec<usize>,
    /// `‖w_ntk(t) − w_gd(t)‖₁`.
    pub gap: Vec<f64>,
    pub bound: Vec<f64>,
    /// `max_i |r_i⁽ᵘ⁾|` of the function evolution, `u = 0..=max(t_grid)`.
    pub gamma: Vec<f64>,
}

fn require_theory_unit_inputs(cfg: &ModelConfig, x: &Matrix) -> Result<()> {
    if cfg.variant != Variant::Theory {
        return Err(Error::InvalidArgument("analysis requires the theory variant".into()));
    }
    for i in 0..x.rows() {
        let norm = dot(x.row(i), x.row(i)).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "input row {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Compares closed-form NTK weights with explicit full-batch gradient descent
/// on the real network, both started at `w0` with learning rate `eta`.
pub fn ntk_gd_gap(
    cfg: &ModelConfig,
    w0: &ModelWeights,
    batch: &Batch,
    eta: f64,
    t_grid: &[usize],
) -> Result<GapReport> {
    require_theory_unit_inputs(cfg, &batch.x)?;
    if t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("t grid must be strictly increasing".into()));
    }
    let update = fed::client_update(cfg, w0, batch, 0)?;
    let mut state = ntk::assemble_global(vec![update], eta)?;
    state.ensure_kernel();
    let evo = ntk::evolve_function(&state, t_grid)?;

    let coef = 2.0 * (2.0 * (cfg.hidden * cfg.input_dim) as f64).sqrt() * eta / (PI.sqrt() * DELTA * ALPHA);
    let gamma = evo.max_abs_residual.clone();
    let mut gap = Vec::with_capacity(t_grid.len());
    let mut bound = Vec::with_capacity(t_grid.len());
    let mut gd = w0.clone();
    let mut params = w0.params().to_vec();
    let mut steps = 0;
    for &t in t_grid {
        while steps < t {
            let g = cfg.batch_gradient(&gd, batch)?;
            for (p, gi) in params.iter_mut().zip(&g) {
                *p -= eta * gi;
            }
            gd = w0.with_params(params.clone())?;
            fed::check_divergence(&gd, "gradient descent")?;
            steps += 1;
        }
        let r = evo.residual_at(t).expect("grid point recorded");
        let w_ntk = ntk::evolve_weights(&state, r, w0)?;
        gap.push(
            w_ntk
                .params()
                .iter()
                .zip(gd.params())
                .map(|(a, b)| (a - b).abs())
                .sum(),
        );
        let sum = gamma.iter().take(t).skip(1).fold(0.0, |a, b| a + b);
        bound.push(coef * sum);
    }
    Ok(GapReport {
        t_grid: t_grid.to_vec(),
        gap,
        bound,
        gamma,
    })
}

#[derive(Clone, Debug)]
pub struct FlipReport {
    /// Neurons whose activation indicator changed, per sample.
    pub counts: Vec<usize>,
    pub max: usize,
    /// `√(2/π)·n·R/(δ·α)`.
    pub bound: f64,
}

/// Counts neurons `r` with `1[⟨v_r, x_i⟩ ≥ 0]` differing between the two
/// weight sets. Every neuron must have moved by at most `radius`.
pub fn activation_flips(
    cfg: &ModelConfig,
    w_ref: &ModelWeights,
    w_new: &ModelWeights,
    x: &Matrix,
    radius: f64,
) -> Result<FlipReport> {
    require_theory_unit_inputs(cfg, x)?;
    let (n, d1) = (cfg.hidden, cfg.input_dim);
    if w_ref.len() != n * d1 || w_new.len() != n * d1 {
        return Err(Error::shape("activation_flips", n * d1, w_new.len()));
    }
    let (a, b) = (w_ref.params(), w_new.params());
    for r in 0..n {
        let dist = a[r * d1..(r + 1) * d1]
            .iter()
            .zip(&b[r * d1..(r + 1) * d1])
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        if dist > radius {
            return Err(Error::InvalidArgument(format!(
                "neuron {r} moved {dist}, outside the ball of radius {radius}"
            )));
        }
    }
    let counts: Vec<usize> = (0..x.rows())
        .map(|i| {
            let xi = x.row(i);
            (0..n)
                .filter(|&r| {
                    let before = dot(&a[r * d1..(r + 1) * d1], xi) >= 0.0;
                    let after = dot(&b[r * d1..(r + 1) * d1], xi) >= 0.0;
                    before != after
                })
                .count()
        })
        .collect();
    Ok(FlipReport {
        max: counts.iter().copied().max().unwrap_or(0),
        counts,
        bound: (2.0 / PI).sqrt() * n as f64 * radius / (DELTA * ALPHA),
    })
}

pub fn write_decay_csv(report: &DecayReport, mut out: impl Write) -> Result<()> {
    writeln!(out, "t,residual_sq,envelope,theorem_envelope,violation")?;
    for (t, r) in report.residuals.iter().enumerate() {
        writeln!(
            out,
            "{t},{},{},{},{}",
            fmt_float(*r),
            fmt_float(report.envelope[t]),
            fmt_float(report.theorem_envelope[t]),
            u8::from(report.violations.contains(&t))
        )?;
    }
    Ok(())
}

pub fn write_gap_csv(report: &GapReport, mut out: impl Write) -> Result<()> {
    writeln!(out, "t,gap_l1,bound")?;
    for ((t, g), b) in report.t_grid.iter().zip(&report.gap).zip(&report.bound) {
        writeln!(out, "{t},{},{}", fmt_float(*g), fmt_float(*b))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Tensor3;

    #[test]
    fn spectrum_examples() {
        assert_eq!(kernel_spectrum(&Matrix::identity(3)).unwrap(), (1.0, 1.0));
        let d = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let (lo, hi) = kernel_spectrum(&d).unwrap();
        assert!((lo - 1.0).abs() < 1e-14 && (hi - 2.0).abs() < 1e-14);
        let bad = Matrix::from_rows(&[[1.0, 0.5], [0.0, 2.0]]).unwrap();
        assert!(kernel_spectrum(&bad).is_err());
    }

    #[test]
    fn iterative_spectrum_on_large_diagonal() {
        let n = 600;
        let m = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 + i as f64 / 10.0 } else { 0.0 });
        let (lo, hi) = kernel_spectrum(&m).unwrap();
        assert!((lo - 1.0).abs() < 1e-6, "{lo}");
        assert!((hi - 60.9).abs() < 1e-6 * 60.9, "{hi}");
    }

    fn scalar_state(f0: f64, eta: f64) -> GlobalState {
        GlobalState {
            jacobian: Tensor3::new(1, 1, 1, vec![1.0]).unwrap(),
            labels: Matrix::from_rows(&[[0.0]]).unwrap(),
            initial_outputs: Matrix::from_rows(&[[f0]]).unwrap(),
            kernel: None,
            eta,
            provenance: vec![(0, 0)],
        }
    }

    #[test]
    fn decay_fixed_point_and_annihilation() {
        let r = check_decay(&mut scalar_state(0.0, 0.5), 10).unwrap();
        assert!(r.residuals.iter().all(|&x| x == 0.0));
        assert!(r.violations.is_empty());
        let r = check_decay(&mut scalar_state(1.0, 1.0), 3).unwrap();
        assert_eq!(r.residuals, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(r.violations.is_empty() && r.applicable);
    }

    #[test]
    fn envelope_reduction() {
        assert_eq!(fedavg_envelope(0.1, 1, 2.0, 4, 1), 1.0 - 0.1 * 2.0 / 8.0);
    }

    #[test]
    fn flips_identical_and_forced() {
        let cfg = ModelConfig::theory(2, 1).unwrap();
        let w = cfg.init_weights(0).with_params(vec![1.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let r = activation_flips(&cfg, &w, &w, &x, 0.0).unwrap();
        assert_eq!(r.counts, vec![0]);
        let flipped = w.with_params(vec![-1.0, 0.0]).unwrap();
        assert_eq!(activation_flips(&cfg, &w, &flipped, &x, 2.0).unwrap().max, 1);
        assert!(activation_flips(&cfg, &w, &flipped, &x, 1.0).is_err());
    }
}
