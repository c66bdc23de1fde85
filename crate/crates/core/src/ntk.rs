//! Server-side NTK machinery.
//!
//! The canonical dynamics are the discrete recursion
//!
//! ```text
//! f⁽ᵘ⁺¹⁾ = f⁽ᵘ⁾ − (η/N)·Θ·(f⁽ᵘ⁾ − Y),      f⁽⁰⁾ = f0
//! R(t)   = (η/(N·d2))·Σ_{u<t} (Y − f⁽ᵘ⁾)
//! w(t)   = w_k + Σ_j J_{:j:}ᵀ·R(t)_{:j}
//! ```
//!
//! which is gradient descent on the linearized model unrolled in closed form.
//! The matrix exponential is only used as a test oracle.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::matrix::{gemm_raw, GemmOperand};
use crate::linalg::{Matrix, SparseTensor3, Tensor3};
use crate::model::{self, Batch, ModelConfig, ModelWeights};

/// Kernel rows per block in [`build_kernel`]. Fixed so that results do not
/// depend on the thread count.
const KERNEL_BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum JacobianPayload {
    Dense(Tensor3),
    Sparse(SparseTensor3),
}

impl JacobianPayload {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            JacobianPayload::Dense(t) => t.dims(),
            JacobianPayload::Sparse(s) => s.dims(),
        }
    }

    pub fn to_dense(&self) -> Tensor3 {
        match self {
            JacobianPayload::Dense(t) => t.clone(),
            JacobianPayload::Sparse(s) => s.densify(),
        }
    }

    pub fn into_dense(self) -> Tensor3 {
        match self {
            JacobianPayload::Dense(t) => t,
            JacobianPayload::Sparse(s) => s.densify(),
        }
    }
}

/// One client's upload for a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub jacobian: JacobianPayload,
    /// `N_m x d2` targets.
    pub labels: Matrix,
    /// `N_m x d2` outputs at the broadcast weights.
    pub initial_outputs: Matrix,
}

impl ClientUpdate {
    pub fn new(
        client_id: usize,
        jacobian: JacobianPayload,
        labels: Matrix,
        initial_outputs: Matrix,
    ) -> Result<Self> {
        let (n, d2, _) = jacobian.dims();
        for (what, m) in [("labels", &labels), ("initial outputs", &initial_outputs)] {
            if m.shape() != (n, d2) {
                return Err(Error::shape(
                    "ClientUpdate",
                    format!("{what} {n}x{d2}"),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        Ok(Self {
            client_id,
            jacobian,
            labels,
            initial_outputs,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.rows()
    }

    /// Uncompressed upload size: Jacobian plus labels and initial outputs.
    pub fn dense_bytes(&self) -> u64 {
        let (n, d2, d) = self.jacobian.dims();
        8 * (n * d2 * d + 2 * n * d2) as u64
    }
}

/// The cohort's stacked uploads as seen by the aggregation server.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub jacobian: Tensor3,
    pub labels: Matrix,
    pub initial_outputs: Matrix,
    pub kernel: Option<Matrix>,
    pub eta: f64,
    /// `(client id, local row)` for every global row.
    pub provenance: Vec<(usize, usize)>,
}

impl GlobalState {
    /// `N_k`.
    pub fn n(&self) -> usize {
        self.jacobian.n()
    }

    pub fn d2(&self) -> usize {
        self.jacobian.d2()
    }

    pub fn ensure_kernel(&mut self) -> &Matrix {
        if self.kernel.is_none() {
            self.kernel = Some(build_kernel(&self.jacobian));
        }
        self.kernel.as_ref().expect("kernel just built")
    }

    pub fn kernel(&self) -> Result<&Matrix> {
        self.kernel
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("kernel has not been built".into()))
    }

    /// Residual `f0 − Y`.
    pub fn initial_residual(&self) -> Matrix {
        self.initial_outputs
            .sub(&self.labels)
            .expect("state shapes agree")
    }
}

/// Stacks client uploads in client order, then local order. Sparse Jacobians
/// are densified.
pub fn assemble_global(updates: Vec<ClientUpdate>, eta: f64) -> Result<GlobalState> {
    let first = updates
        .first()
        .ok_or_else(|| Error::InvalidArgument("no client updates to assemble".into()))?;
    let (_, d2, d) = first.jacobian.dims();
    for u in &updates {
        let (_, ud2, ud) = u.jacobian.dims();
        if (ud2, ud) != (d2, d) {
            return Err(Error::shape(
                "assemble_global",
                format!("d2={d2}, d={d}"),
                format!("d2={ud2}, d={ud} from client {}", u.client_id),
            ));
        }
    }
    let total: usize = updates.iter().map(ClientUpdate::n_samples).sum();
    let mut provenance = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total * d2);
    let mut outputs = Vec::with_capacity(total * d2);

    if updates.len() == 1 {
        let u = updates.into_iter().next().expect("one update");
        provenance.extend((0..u.n_samples()).map(|i| (u.client_id, i)));
        return Ok(GlobalState {
            jacobian: u.jacobian.into_dense(),
            labels: u.labels,
            initial_outputs: u.initial_outputs,
            kernel: None,
            eta,
            provenance,
        });
    }

    let mut data = Vec::with_capacity(total * d2 * d);
    for u in updates {
        provenance.extend((0..u.n_samples()).map(|i| (u.client_id, i)));
        labels.extend_from_slice(u.labels.data());
        outputs.extend_from_slice(u.initial_outputs.data());
        match u.jacobian {
            JacobianPayload::Dense(t) => data.extend_from_slice(t.data()),
            JacobianPayload::Sparse(s) => {
                let start = data.len();
                data.resize(start + s.dims().0 * d2 * d, 0.0);
                for (i, v) in s.entries() {
                    data[start + i] = v;
                }
            }
        }
    }
    Ok(GlobalState {
        jacobian: Tensor3::new(total, d2, d, data)?,
        labels: Matrix::new(total, d2, labels)?,
        initial_outputs: Matrix::new(total, d2, outputs)?,
        kernel: None,
        eta,
        provenance,
    })
}

/// Empirical NTK: `Θ_ij = (1/d2)·⟨J_i, J_j⟩_F` over horizontal slices.
///
/// Computed blockwise on the upper triangle and mirrored, so the result is
/// exactly symmetric.
pub fn build_kernel(j: &Tensor3) -> Matrix {
    let (n, d2, d) = j.dims();
    let width = d2 * d;
    let mut theta = Matrix::zeros(n, n);
    if n == 0 {
        return theta;
    }
    let blocks = n.div_ceil(KERNEL_BLOCK);
    let pairs: Vec<(usize, usize)> = (0..blocks)
        .flat_map(|a| (a..blocks).map(move |b| (a, b)))
        .collect();
    let data = j.data();
    let span = |b: usize| (b * KERNEL_BLOCK, ((b + 1) * KERNEL_BLOCK).min(n));
    let tiles: Vec<(usize, usize, Vec<f64>)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (r0, r1) = span(a);
            let (c0, c1) = span(b);
            let mut tile = vec![0.0; (r1 - r0) * (c1 - c0)];
            gemm_raw(
                r1 - r0,
                width,
                c1 - c0,
                GemmOperand::raw(&data[r0 * width..], width),
                GemmOperand::raw_transposed(&data[c0 * width..], width),
                &mut tile,
                c1 - c0,
                false,
            );
            (a, b, tile)
        })
        .collect();
    let scale = 1.0 / d2 as f64;
    for (a, b, tile) in tiles {
        let (r0, r1) = span(a);
        let (c0, c1) = span(b);
        let w = c1 - c0;
        for r in r0..r1 {
            for c in c0..c1 {
                if a == b && c < r {
                    continue;
                }
                let v = scale * tile[(r - r0) * w + (c - c0)];
                theta[(r, c)] = v;
                theta[(c, r)] = v;
            }
        }
    }
    theta
}

/// Function-space trajectory recorded at selected steps.
#[derive(Clone, Debug)]
pub struct FunctionEvolution {
    pub checkpoints: Vec<usize>,
    /// `f⁽ᵗ⁾` at each checkpoint.
    pub outputs: Vec<Matrix>,
    /// `R(t)` at each checkpoint.
    pub residuals: Vec<Matrix>,
    /// `‖f⁽ᵗ⁾ − Y‖²_F` for every `t = 0..=t_max`.
    pub residual_history: Vec<f64>,
    /// `max_i |Y − f⁽ᵗ⁾|` for every `t = 0..=t_max`.
    pub max_abs_residual: Vec<f64>,
}

impl FunctionEvolution {
    pub fn t_max(&self) -> usize {
        self.residual_history.len() - 1
    }

    fn position(&self, t: usize) -> Option<usize> {
        self.checkpoints.iter().position(|&c| c == t)
    }

    pub fn outputs_at(&self, t: usize) -> Option<&Matrix> {
        self.position(t).map(|p| &self.outputs[p])
    }

    pub fn residual_at(&self, t: usize) -> Option<&Matrix> {
        self.position(t).map(|p| &self.residuals[p])
    }
}

/// Runs the discrete function recursion up to the largest checkpoint.
pub fn evolve_function(state: &GlobalState, checkpoints: &[usize]) -> Result<FunctionEvolution> {
    let theta = state.kernel()?;
    let (n, d2) = (state.n(), state.d2());
    if !(state.eta > 0.0 && state.eta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            state.eta
        )));
    }
    let mut cps = checkpoints.to_vec();
    cps.sort_unstable();
    cps.dedup();
    let t_max = cps.last().copied().unwrap_or(0);
    let step = state.eta / n as f64;
    let r_scale = state.eta / (n * d2) as f64;

    let mut f = state.initial_outputs.clone();
    let mut err = state.initial_residual();
    // Σ_{u<t} (Y − f⁽ᵘ⁾), unscaled
    let mut acc = Matrix::zeros(n, d2);
    let mut push = Matrix::zeros(n, d2);
    let mut evo = FunctionEvolution {
        checkpoints: cps.clone(),
        outputs: Vec::with_capacity(cps.len()),
        residuals: Vec::with_capacity(cps.len()),
        residual_history: Vec::with_capacity(t_max + 1),
        max_abs_residual: Vec::with_capacity(t_max + 1),
    };
    let mut next_cp = 0;
    for t in 0..=t_max {
        evo.residual_history.push(err.frobenius_norm_sq());
        evo.max_abs_residual.push(err.max_abs());
        if next_cp < cps.len() && cps[next_cp] == t {
            evo.outputs.push(f.clone());
            evo.residuals.push(acc.scaled(r_scale));
            next_cp += 1;
        }
        if t == t_max {
            break;
        }
        acc.axpy(-1.0, &err)?;
        gemm_raw(
            n,
            n,
            d2,
            GemmOperand::normal(theta),
            GemmOperand::normal(&err),
            push.data_mut(),
            d2,
            false,
        );
        f.axpy(-step, &push)?;
        if !f.is_finite() {
            return Err(Error::Divergence(format!(
                "function evolution overflowed at step {} (eta {} too large?)",
                t + 1,
                state.eta
            )));
        }
        err = f.sub(&state.labels)?;
    }
    Ok(evo)
}

/// `w_k + Σ_j J_{:j:}ᵀ·R_{:j}`.
pub fn evolve_weights(state: &GlobalState, r: &Matrix, w_k: &ModelWeights) -> Result<ModelWeights> {
    Ok(evolve_weights_many(state, &[r], w_k)?
        .pop()
        .expect("one residual in, one weight vector out"))
}

/// [`evolve_weights`] for several residual matrices with one product
/// `[vec R₁; …; vec R_G]·J`.
pub fn evolve_weights_many(
    state: &GlobalState,
    rs: &[&Matrix],
    w_k: &ModelWeights,
) -> Result<Vec<ModelWeights>> {
    let (n, d2, d) = state.jacobian.dims();
    for r in rs {
        if r.shape() != (n, d2) {
            return Err(Error::shape(
                "evolve_weights",
                format!("R {n}x{d2}"),
                format!("{}x{}", r.rows(), r.cols()),
            ));
        }
    }
    if w_k.len() != d {
        return Err(Error::shape("evolve_weights", d, w_k.len()));
    }
    let g = rs.len();
    let mut coeffs = Vec::with_capacity(g * n * d2);
    for r in rs {
        coeffs.extend_from_slice(r.data());
    }
    let mut out = Vec::with_capacity(g * d);
    for _ in 0..g {
        out.extend_from_slice(w_k.params());
    }
    gemm_raw(
        g,
        n * d2,
        d,
        GemmOperand::raw(&coeffs, n * d2),
        GemmOperand::raw(state.jacobian.data(), d),
        &mut out,
        d,
        true,
    );
    out.chunks_exact(d)
        .map(|w| w_k.with_params(w.to_vec()))
        .collect()
}

/// What the candidate weights are scored on.
#[derive(Clone, Copy, Debug)]
pub enum Evaluation<'a> {
    /// Loss on the cohort's own training data (evaluated client-side).
    TrainLoss(&'a Batch),
    /// Loss on a server-held validation split.
    Validation(&'a Batch),
}

impl<'a> Evaluation<'a> {
    pub fn batch(&self) -> &'a Batch {
        match *self {
            Evaluation::TrainLoss(b) | Evaluation::Validation(b) => b,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvolutionResult {
    pub t_grid: Vec<usize>,
    /// Loss of the real network at `w(t)` for every grid point.
    pub losses: Vec<f64>,
    pub chosen_t: usize,
    pub w_next: ModelWeights,
    /// `‖f⁽ᵗ⁾ − Y‖²` for `t = 0..=max(grid)`.
    pub residual_history: Vec<f64>,
}

/// Picks the step count whose materialized weights give the smallest loss of
/// the actual network; ties go to the smaller step count.
pub fn select_t(
    state: &GlobalState,
    w_k: &ModelWeights,
    grid: &[usize],
    cfg: &ModelConfig,
    eval: Evaluation<'_>,
) -> Result<EvolutionResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty step grid".into()));
    }
    if grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "step grid must be strictly increasing positive integers".into(),
        ));
    }
    let evo = evolve_function(state, grid)?;
    let batch = eval.batch();
    let rs: Vec<&Matrix> = grid
        .iter()
        .map(|&t| evo.residual_at(t).expect("grid point recorded"))
        .collect();
    let candidates = evolve_weights_many(state, &rs, w_k)?;
    let mut losses = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, ModelWeights)> = None;
    for (&t, w) in grid.iter().zip(candidates) {
        let l = model::loss(&cfg.forward(&w, &batch.x)?, &batch.y)?;
        losses.push(l);
        if l.is_finite() && best.as_ref().is_none_or(|(_, bl, _)| l < *bl) {
            best = Some((t, l, w));
        }
    }
    let (chosen_t, _, w_next) = best.ok_or_else(|| {
        Error::Divergence("no grid point produced a finite loss".into())
    })?;
    Ok(EvolutionResult {
        t_grid: grid.to_vec(),
        losses,
        chosen_t,
        w_next,
        residual_history: evo.residual_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_tensor(n: usize, d2: usize, d: usize, seed: u64) -> Tensor3 {
        let mut r = rng::stream(seed);
        Tensor3::new(n, d2, d, (0..n * d2 * d).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn update(id: usize, t: Tensor3, seed: u64) -> ClientUpdate {
        let (n, d2, _) = t.dims();
        let mut r = rng::stream(seed);
        let y = Matrix::from_fn(n, d2, |_, _| r.random_range(-1.0..1.0));
        let f = Matrix::from_fn(n, d2, |_, _| r.random_range(-1.0..1.0));
        ClientUpdate::new(id, JacobianPayload::Dense(t), y, f).unwrap()
    }

    fn scalar_state(theta: f64, y: f64, f0: f64, eta: f64) -> GlobalState {
        GlobalState {
            jacobian: Tensor3::new(1, 1, 1, vec![theta.sqrt()]).unwrap(),
            labels: Matrix::from_rows(&[[y]]).unwrap(),
            initial_outputs: Matrix::from_rows(&[[f0]]).unwrap(),
            kernel: Some(Matrix::from_rows(&[[theta]]).unwrap()),
            eta,
            provenance: vec![(0, 0)],
        }
    }

    #[test]
    fn kernel_small_examples() {
        let t = Tensor3::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(build_kernel(&t).data(), &[5.0]);
        let t = Tensor3::new(2, 1, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(build_kernel(&t).data(), &[5.0; 4]);
    }

    #[test]
    fn kernel_matches_double_loop() {
        let t = random_tensor(6, 3, 7, 1);
        let k = build_kernel(&t);
        for i in 0..6 {
            for j in 0..6 {
                let o = crate::linalg::frobenius_inner(&t.horizontal_slice(i), &t.horizontal_slice(j))
                    .unwrap()
                    / 3.0;
                assert!((k[(i, j)] - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_spans_several_blocks() {
        let t = random_tensor(150, 2, 5, 2);
        let k = build_kernel(&t);
        assert_eq!(k.asymmetry(), Some(0.0));
        let o = crate::linalg::frobenius_inner(&t.horizontal_slice(3), &t.horizontal_slice(140))
            .unwrap()
            / 2.0;
        assert!((k[(3, 140)] - o).abs() < 1e-12);
    }

    #[test]
    fn assemble_orders_clients_then_rows() {
        let a = update(4, random_tensor(2, 2, 3, 1), 10);
        let b = update(9, random_tensor(3, 2, 3, 2), 11);
        let s = assemble_global(vec![a.clone(), b.clone()], 0.1).unwrap();
        assert_eq!(s.n(), 5);
        let JacobianPayload::Dense(bj) = &b.jacobian else { unreachable!() };
        assert_eq!(s.jacobian.slice(2), bj.slice(0));
        assert_eq!(s.labels.row(2), b.labels.row(0));
        assert_eq!(s.provenance[2], (9, 0));
        assert_eq!(s.provenance[1], (4, 1));
        // naive copy oracle
        let JacobianPayload::Dense(aj) = &a.jacobian else { unreachable!() };
        for i in 0..5 {
            let src = if i < 2 { aj.slice(i) } else { bj.slice(i - 2) };
            assert_eq!(s.jacobian.slice(i), src);
        }
    }

    #[test]
    fn assemble_singleton_is_identity() {
        let a = update(1, random_tensor(3, 2, 4, 3), 12);
        let s = assemble_global(vec![a.clone()], 0.1).unwrap();
        assert_eq!(s.jacobian, a.jacobian.to_dense());
        assert_eq!(s.labels, a.labels);
        assert_eq!(s.initial_outputs, a.initial_outputs);
    }

    #[test]
    fn assemble_rejects_mismatch_and_empty() {
        let a = update(0, random_tensor(2, 2, 3, 1), 1);
        let b = update(1, random_tensor(2, 2, 4, 1), 1);
        assert!(assemble_global(vec![a, b], 0.1).is_err());
        assert!(assemble_global(vec![], 0.1).is_err());
    }

    #[test]
    fn assemble_densifies_sparse_uploads() {
        let t = random_tensor(2, 1, 4, 5);
        let sp = crate::linalg::topk_sparsify(&t, 0.5).unwrap();
        let mut a = update(0, t, 2);
        a.jacobian = JacobianPayload::Sparse(sp.clone());
        let b = update(1, random_tensor(1, 1, 4, 6), 3);
        let s = assemble_global(vec![a, b], 0.1).unwrap();
        assert_eq!(&s.jacobian.data()[..8], sp.densify().data());
    }

    #[test]
    fn scalar_recursion() {
        let s = scalar_state(1.0, 0.0, 1.0, 0.5);
        let e = evolve_function(&s, &[0, 1]).unwrap();
        assert_eq!(e.outputs_at(0).unwrap()[(0, 0)], 1.0);
        assert_eq!(e.residual_at(0).unwrap()[(0, 0)], 0.0);
        assert_eq!(e.outputs_at(1).unwrap()[(0, 0)], 0.5);
        assert_eq!(e.residual_at(1).unwrap()[(0, 0)], -0.5);
    }

    #[test]
    fn divergence_is_reported() {
        let s = scalar_state(1.0, 0.0, 1.0, 1e6);
        assert!(matches!(evolve_function(&s, &[200]), Err(Error::Divergence(_))));
    }

    #[test]
    fn zero_residual_or_jacobian_keeps_weights() {
        let cfg = ModelConfig::theory(3, 4).unwrap();
        let w = cfg.init_weights(1);
        let mut s = assemble_global(vec![update(0, random_tensor(2, 1, 12, 1), 2)], 0.1).unwrap();
        s.ensure_kernel();
        assert_eq!(evolve_weights(&s, &Matrix::zeros(2, 1), &w).unwrap(), w);
        s.jacobian = Tensor3::zeros(2, 1, 12);
        let r = Matrix::from_rows(&[[0.3], [-1.0]]).unwrap();
        assert_eq!(evolve_weights(&s, &r, &w).unwrap(), w);
        assert!(evolve_weights(&s, &Matrix::zeros(3, 1), &w).is_err());
    }

    #[test]
    fn grid_validation() {
        let cfg = ModelConfig::theory(1, 1).unwrap();
        let w = cfg.init_weights(0);
        let s = scalar_state(1.0, 0.0, 1.0, 0.5);
        let b = Batch::new(Matrix::zeros(1, 1), Matrix::zeros(1, 1)).unwrap();
        for g in [&[][..], &[0][..], &[3, 2][..], &[2, 2][..]] {
            assert!(select_t(&s, &w, g, &cfg, Evaluation::TrainLoss(&b)).is_err());
        }
    }
}
