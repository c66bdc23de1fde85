//! Property checks run by `ntkfed verify`.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use ntkfed::analysis;
use ntkfed::cp::{self, CpConfig, ProjectionKind};
use ntkfed::data::{make_synthetic, unit_normalize, PartitionSpec};
use ntkfed::fed::{self, FedData, RoundConfig, Scheme};
use ntkfed::linalg::{sym_eig, Matrix, Tensor3};
use ntkfed::model::{Batch, ModelConfig, ModelWeights};
use ntkfed::ntk::{self, GlobalState};
use ntkfed::rng::{derive_seed, stream_for};
use ntkfed::labels;
use rand::Rng;

use crate::config::ExperimentConfig;

pub const CHECKS: &[&str] = &[
    "jacobian",
    "kernel",
    "evolution",
    "shuffle",
    "cp-degenerate",
    "decay",
    "gap",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, worst: f64, tol: f64, what: &str) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: worst <= tol,
        detail: format!("{what} {worst:.3e} (tolerance {tol:.0e})"),
    }
}

/// Runs the named checks (all when `only` is `None`).
pub fn run_checks(cfg: &ExperimentConfig, only: Option<&str>) -> Result<Vec<CheckOutcome>> {
    if let Some(name) = only {
        anyhow::ensure!(
            CHECKS.contains(&name),
            "unknown check {name:?}; expected one of {}",
            CHECKS.join(", ")
        );
    }
    let seed = derive_seed(cfg.seed, labels!["verify"]);
    let mut out = Vec::new();
    for &name in CHECKS {
        if only.is_some_and(|o| o != name) {
            continue;
        }
        let result = match name {
            "jacobian" => check_jacobian(seed),
            "kernel" => check_kernel(seed, cfg.analysis.inject_kernel_asymmetry),
            "evolution" => check_evolution(seed),
            "shuffle" => check_shuffle(seed),
            "cp-degenerate" => check_cp_degenerate(seed),
            "decay" => check_decay(seed, cfg.analysis.decay_steps),
            "gap" => check_gap(seed, &cfg.analysis.gap_grid),
            _ => unreachable!("listed in CHECKS"),
        };
        out.push(result.unwrap_or_else(|e| CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e:#}"),
        }));
    }
    Ok(out)
}

pub fn write_report(outcomes: &[CheckOutcome], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    writeln!(f, "check,status,detail")?;
    for o in outcomes {
        let status = if o.passed { "pass" } else { "fail" };
        writeln!(f, "{},{status},\"{}\"", o.name, o.detail.replace('"', "'"))?;
    }
    Ok(())
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = stream_for(seed, labels!["matrix"]);
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

/// Central differences of the network output against the analytic Jacobian.
fn check_jacobian(seed: u64) -> Result<CheckOutcome> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..4u64 {
        let s = derive_seed(seed, labels!["jacobian", case]);
        let cfg = if case % 2 == 0 {
            ModelConfig::experiment(3, 5, 2)?
        } else {
            ModelConfig::theory(4, 6)?
        };
        let w = cfg.init_weights(s);
        let x = random_matrix(1, cfg.input_dim, s);
        let j = cfg.per_sample_jacobian(&w, x.row(0))?;
        for p in 0..w.len() {
            let mut plus = w.params().to_vec();
            let mut minus = plus.clone();
            plus[p] += h;
            minus[p] -= h;
            let fp = cfg.forward(&w.with_params(plus)?, &x)?;
            let fm = cfg.forward(&w.with_params(minus)?, &x)?;
            for k in 0..cfg.output_dim {
                let fd = (fp[(0, k)] - fm[(0, k)]) / (2.0 * h);
                let err = (fd - j[(k, p)]).abs() / j[(k, p)].abs().max(1.0);
                worst = worst.max(err);
            }
        }
    }
    Ok(outcome("jacobian", worst, 1e-5, "max relative error"))
}

fn random_tensor(n: usize, d2: usize, d: usize, seed: u64) -> Tensor3 {
    let mut r = stream_for(seed, labels!["tensor"]);
    Tensor3::new(n, d2, d, (0..n * d2 * d).map(|_| r.random_range(-1.0..1.0)).collect())
        .expect("consistent size")
}

fn check_kernel(seed: u64, inject_asymmetry: bool) -> Result<CheckOutcome> {
    let j = random_tensor(24, 3, 17, seed);
    let mut theta = ntk::build_kernel(&j);
    if inject_asymmetry {
        theta[(0, 1)] += 1e-3;
    }
    let asym = theta.asymmetry().unwrap_or(f64::INFINITY);
    if asym > 1e-12 {
        return Ok(CheckOutcome {
            name: "kernel",
            passed: false,
            detail: format!("kernel asymmetry {asym:.3e} exceeds 1e-12"),
        });
    }
    let n = theta.rows();
    let lmin = sym_eig(&theta)?.min();
    if lmin < -1e-8 * theta.trace() / n as f64 {
        return Ok(CheckOutcome {
            name: "kernel",
            passed: false,
            detail: format!("negative eigenvalue {lmin:.3e}"),
        });
    }
    let perm: Vec<usize> = (0..n).rev().collect();
    let permuted = ntk::build_kernel(&j.permute_slices(&perm)?);
    let mismatch = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| permuted[(a, b)] != theta[(perm[a], perm[b])])
        .count();
    Ok(CheckOutcome {
        name: "kernel",
        passed: mismatch == 0,
        detail: format!("symmetric, lambda_min {lmin:.3e}, {mismatch} permutation mismatches"),
    })
}

fn theory_batch(samples: usize, d1: usize, seed: u64) -> Result<Batch> {
    let ds = unit_normalize(&make_synthetic(samples, d1, 2, seed)?)?;
    let y = Matrix::from_fn(samples, 1, |i, _| if ds.labels[i] == 0 { -1.0 } else { 1.0 });
    Ok(Batch::new(ds.x, y)?)
}

fn theory_state(cfg: &ModelConfig, w: &ModelWeights, b: &Batch, eta: f64) -> Result<GlobalState> {
    let u = fed::client_update(cfg, w, b, 0)?;
    let mut st = ntk::assemble_global(vec![u], eta)?;
    st.ensure_kernel();
    Ok(st)
}

/// Closed-form weights against gradient descent on the linearized model.
fn check_evolution(seed: u64) -> Result<CheckOutcome> {
    let cfg = ModelConfig::theory(5, 64)?;
    let w = cfg.init_weights(seed);
    let b = theory_batch(16, 5, seed)?;
    let st = theory_state(&cfg, &w, &b, 0.5)?;
    let (n, d) = (st.n(), w.len());
    let grid = [1, 10, 100];
    let evo = ntk::evolve_function(&st, &grid)?;
    let mut lin = w.params().to_vec();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    for &t in &grid {
        while done < t {
            // f_lin(w) = f0 + J·(w − w0)
            let mut grad = vec![0.0; d];
            for i in 0..n {
                let ji = st.jacobian.slice(i);
                let delta: f64 = ji.iter().zip(&lin).zip(w.params()).map(|((j, a), b)| j * (a - b)).sum();
                let r = st.initial_outputs[(i, 0)] + delta - st.labels[(i, 0)];
                for (g, j) in grad.iter_mut().zip(ji) {
                    *g += r * j / n as f64;
                }
            }
            for (p, g) in lin.iter_mut().zip(&grad) {
                *p -= st.eta * g;
            }
            done += 1;
        }
        let wt = ntk::evolve_weights(&st, evo.residual_at(t).expect("recorded"), &w)?;
        for (a, b) in wt.params().iter().zip(&lin) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(outcome("evolution", worst, 1e-10, "max weight deviation"))
}

fn small_federation(seed: u64) -> Result<(ModelConfig, ModelWeights, FedData)> {
    let ds = make_synthetic(60, 6, 3, seed)?;
    let part = PartitionSpec::contiguous(ds.len(), 3);
    let data = FedData::from_partition(&ds, &part, Some(ds.clone()));
    let model = ModelConfig::experiment(6, 8, 3)?;
    let w = model.init_weights(seed);
    Ok((model, w, data))
}

fn check_shuffle(seed: u64) -> Result<CheckOutcome> {
    let (model, w, data) = small_federation(seed)?;
    let mut updates = Vec::new();
    for m in 0..data.num_clients() {
        updates.push(fed::client_update(&model, &w, &data.clients[m], m)?);
    }
    let mut st = ntk::assemble_global(updates, 0.5)?;
    st.ensure_kernel();
    let evo = ntk::evolve_function(&st, &[50])?;
    let base = ntk::evolve_weights(&st, evo.residual_at(50).expect("recorded"), &w)?;
    let mut worst: f64 = 0.0;
    for trial in 0..5u64 {
        let plan = cp::ShufflePlan::random(st.n(), derive_seed(seed, labels!["shuffle", trial]));
        let sh = cp::apply_shuffle(&st, &plan)?;
        let e = ntk::evolve_function(&sh, &[50])?;
        let ws = ntk::evolve_weights(&sh, e.residual_at(50).expect("recorded"), &w)?;
        for (a, b) in ws.params().iter().zip(base.params()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(outcome("shuffle", worst, 1e-12, "max weight difference"))
}

fn check_cp_degenerate(seed: u64) -> Result<CheckOutcome> {
    let (model, w, data) = small_federation(seed)?;
    let rc = RoundConfig {
        clients_per_round: 2,
        t_grid: vec![10, 20, 40],
        eta: 0.5,
        seed,
        scheme: Scheme::CpNtkfl,
        ..RoundConfig::default()
    };
    let cp_cfg = CpConfig {
        beta: 1.0,
        d1_proj: model.input_dim,
        sparsity: 0.0,
        projection: ProjectionKind::Coordinate,
        ..CpConfig::default()
    };
    let cohort = [0, 2];
    let (a, _) = fed::ntkfl_round_on(&model, &w, &data, &cohort, &rc, 1)?;
    let (b, _) = cp::cp_round_on(&model, &w, &data, &cohort, &rc, &cp_cfg, 1)?;
    let worst = a
        .params()
        .iter()
        .zip(b.params())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(outcome("cp-degenerate", worst, 1e-12, "max weight difference"))
}

fn check_decay(seed: u64, steps: usize) -> Result<CheckOutcome> {
    let cfg = ModelConfig::theory(10, 2048)?;
    let w = cfg.init_weights(seed);
    let b = theory_batch(16, 10, seed)?;
    let mut st = theory_state(&cfg, &w, &b, 1.0)?;
    let (_, lmax) = analysis::kernel_spectrum(st.kernel()?)?;
    st.eta = st.n() as f64 / (2.0 * lmax);
    let r = analysis::check_decay(&mut st, steps)?;
    Ok(CheckOutcome {
        name: "decay",
        passed: r.applicable && r.violations.is_empty(),
        detail: format!("{} violations over {steps} steps", r.violations.len()),
    })
}

fn check_gap(seed: u64, grid: &[usize]) -> Result<CheckOutcome> {
    let cfg = ModelConfig::theory(10, 1024)?;
    let w = cfg.init_weights(seed);
    let b = theory_batch(32, 10, seed)?;
    let r = analysis::ntk_gd_gap(&cfg, &w, &b, 1.0, grid)?;
    let over = r.gap.iter().zip(&r.bound).filter(|(g, b)| g > b).count();
    let zero_ok = grid.first() != Some(&0) || r.gap[0] == 0.0;
    Ok(CheckOutcome {
        name: "gap",
        passed: over == 0 && zero_ok,
        detail: format!("{over} grid points above the bound"),
    })
}
