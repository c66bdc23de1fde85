//! Communication-efficient and privacy-oriented NTK-FL: client subsampling,
//! seeded Gaussian input projection, top-k Jacobian compression and a
//! shuffling server that permutes samples before kernel construction.
//!
//! Seed distribution through the key server is simulated in-process; the
//! access log records which parties obtained the projection seed.

use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{partition::subsample_list, Dataset};
use crate::error::{Error, Result};
use crate::fed::{self, FedData, RoundConfig, RoundMetrics, Scheme};
use crate::linalg::sparse::kept_count;
use crate::linalg::{topk_sparsify, Matrix};
use crate::model::{Batch, ModelConfig, ModelWeights};
use crate::ntk::{self, ClientUpdate, GlobalState, JacobianPayload};
use crate::rng;

/// Fixed per-upload header of a compressed update.
pub const COMPRESSED_HEADER_BYTES: u64 = 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionKind {
    /// I.i.d. standard normal entries drawn from the seed.
    #[default]
    Gaussian,
    /// First `d1_proj` columns of the identity; seedless.
    Coordinate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShuffleLevel {
    /// Permute every sample of the cohort.
    #[default]
    Sample,
    /// Permute whole client blocks, keeping their internal order.
    Client,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpConfig {
    pub beta: f64,
    pub d1_proj: usize,
    pub sparsity: f64,
    pub projection: ProjectionKind,
    pub shuffle: ShuffleLevel,
}

impl Default for CpConfig {
    fn default() -> Self {
        Self {
            beta: 0.4,
            d1_proj: 100,
            sparsity: 0.5,
            projection: ProjectionKind::Gaussian,
            shuffle: ShuffleLevel::Sample,
        }
    }
}

impl CpConfig {
    pub fn validate(&self, d1: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cp.beta must lie in (0,1], got {}",
                self.beta
            )));
        }
        if self.d1_proj == 0 || self.d1_proj > d1 {
            return Err(Error::InvalidArgument(format!(
                "cp.d1_proj must lie in [1, {d1}], got {}",
                self.d1_proj
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidArgument(format!(
                "cp.sparsity must lie in [0,1), got {}",
                self.sparsity
            )));
        }
        Ok(())
    }
}

/// A `d1 x d1_proj` input projection, regenerated from its seed on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSpec {
    pub seed: u64,
    pub d1: usize,
    pub d1_proj: usize,
    pub kind: ProjectionKind,
}

impl ProjectionSpec {
    pub fn coordinate(d1: usize, d1_proj: usize) -> Result<Self> {
        check_projection_dims(d1, d1_proj)?;
        Ok(Self {
            seed: 0,
            d1,
            d1_proj,
            kind: ProjectionKind::Coordinate,
        })
    }

    pub fn matrix(&self) -> Matrix {
        match self.kind {
            ProjectionKind::Coordinate => {
                Matrix::from_fn(self.d1, self.d1_proj, |i, j| if i == j { 1.0 } else { 0.0 })
            }
            ProjectionKind::Gaussian => {
                let mut r = rng::stream(self.seed);
                let data = (0..self.d1 * self.d1_proj)
                    .map(|_| StandardNormal.sample(&mut r))
                    .collect();
                Matrix::new(self.d1, self.d1_proj, data).expect("projection shape")
            }
        }
    }
}

fn check_projection_dims(d1: usize, d1_proj: usize) -> Result<()> {
    if d1_proj == 0 || d1_proj > d1 {
        return Err(Error::InvalidArgument(format!(
            "projected dimension must lie in [1, {d1}], got {d1_proj}"
        )));
    }
    Ok(())
}

pub fn gen_projection(seed: u64, d1: usize, d1_proj: usize) -> Result<ProjectionSpec> {
    check_projection_dims(d1, d1_proj)?;
    Ok(ProjectionSpec {
        seed,
        d1,
        d1_proj,
        kind: ProjectionKind::Gaussian,
    })
}

/// `Z = X·P`.
pub fn project_inputs(x: &Matrix, spec: &ProjectionSpec) -> Result<Matrix> {
    if x.cols() != spec.d1 {
        return Err(Error::shape("project_inputs", spec.d1, x.cols()));
    }
    match spec.kind {
        ProjectionKind::Coordinate => Ok(Matrix::from_fn(x.rows(), spec.d1_proj, |i, j| {
            x[(i, j)]
        })),
        ProjectionKind::Gaussian => x.matmul(&spec.matrix()),
    }
}

/// Permutation applied by the shuffling server: new row `i` is old row `perm[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShufflePlan {
    pub perm: Vec<usize>,
    pub seed: u64,
}

impl ShufflePlan {
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            seed: 0,
        }
    }

    pub fn from_perm(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument("shuffle plan is not a permutation".into()));
            }
        }
        Ok(Self { perm, seed: 0 })
    }

    pub fn random(n: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed));
        Self { perm, seed }
    }

    /// Permutes contiguous client blocks of the given sizes.
    pub fn client_level(sizes: &[usize], seed: u64) -> Self {
        let mut starts = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in sizes {
            starts.push(acc);
            acc += s;
        }
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.shuffle(&mut rng::stream(seed));
        let perm = order
            .iter()
            .flat_map(|&c| starts[c]..starts[c] + sizes[c])
            .collect();
        Self { perm, seed }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// Permutes slices of `J`, rows of `Y` and `f0`, and the provenance in step;
/// a built kernel becomes `PΘPᵀ`.
pub fn apply_shuffle(state: &GlobalState, plan: &ShufflePlan) -> Result<GlobalState> {
    let n = state.n();
    if plan.len() != n {
        return Err(Error::shape("apply_shuffle", n, plan.len()));
    }
    let p = &plan.perm;
    Ok(GlobalState {
        jacobian: state.jacobian.permute_slices(p)?,
        labels: state.labels.select_rows(p),
        initial_outputs: state.initial_outputs.select_rows(p),
        kernel: state
            .kernel
            .as_ref()
            .map(|k| Matrix::from_fn(n, n, |i, j| k[(p[i], p[j])])),
        eta: state.eta,
        provenance: p.iter().map(|&i| state.provenance[i]).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Party {
    Client(usize),
    ShufflingServer,
    AggregationServer,
}

/// Holds the projection seed and logs every party it was handed to.
#[derive(Debug)]
pub struct KeyServer {
    seed: u64,
    log: Mutex<Vec<Party>>,
}

impl KeyServer {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Stands in for encrypting the seed under the party's public key.
    pub fn deliver(&self, to: Party) -> u64 {
        self.log.lock().expect("log lock").push(to);
        self.seed
    }

    pub fn access_log(&self) -> Vec<Party> {
        self.log.lock().expect("log lock").clone()
    }
}

/// Top-k compresses the Jacobian. Returns the update and its upload size:
/// 12 bytes per kept entry (value + 32-bit index), a fixed header, and the
/// dense labels and initial outputs.
pub fn compress_update(u: &ClientUpdate, sparsity: f64) -> Result<(ClientUpdate, u64)> {
    let dense = match &u.jacobian {
        JacobianPayload::Dense(t) => std::borrow::Cow::Borrowed(t),
        JacobianPayload::Sparse(s) => std::borrow::Cow::Owned(s.densify()),
    };
    let sparse = topk_sparsify(&dense, sparsity)?;
    let bytes = sparse.payload_bytes()
        + COMPRESSED_HEADER_BYTES
        + 16 * (u.n_samples() * u.labels.cols()) as u64;
    let compressed = ClientUpdate {
        client_id: u.client_id,
        jacobian: JacobianPayload::Sparse(sparse),
        labels: u.labels.clone(),
        initial_outputs: u.initial_outputs.clone(),
    };
    Ok((compressed, bytes))
}

pub fn comm_cost_fedavg(clients: usize, d: usize) -> u64 {
    8 * (clients * d) as u64
}

pub fn comm_cost_ntkfl(sizes: &[usize], d2: usize, d: usize) -> u64 {
    sizes
        .iter()
        .map(|&n| 8 * (n * d2 * d + 2 * n * d2) as u64)
        .sum()
}

/// `sizes` are the subsampled cohort sizes and `d` the projected model's
/// parameter count.
pub fn comm_cost_cp(sizes: &[usize], d2: usize, d: usize, sparsity: f64) -> u64 {
    sizes
        .iter()
        .map(|&n| {
            12 * kept_count(n * d2 * d, sparsity) as u64
                + COMPRESSED_HEADER_BYTES
                + 16 * (n * d2) as u64
        })
        .sum()
}

/// Uplink bytes of one round. `d` is the weight dimension of the model the
/// clients differentiate. Centralized training has no federated uplink.
pub fn comm_cost(scheme: Scheme, sizes: &[usize], d2: usize, d: usize, sparsity: f64) -> u64 {
    match scheme {
        Scheme::Fedavg => comm_cost_fedavg(sizes.len(), d),
        Scheme::Ntkfl => comm_cost_ntkfl(sizes, d2, d),
        Scheme::CpNtkfl => comm_cost_cp(sizes, d2, d, sparsity),
        Scheme::Centralized => 0,
    }
}

/// Seed of the projection shared by all clients for the whole run.
pub fn projection_seed(master: u64) -> u64 {
    rng::derive_seed(master, labels!["cp", "projection"])
}

/// The projection used by a CP run with master seed `master`.
pub fn projection_for(master: u64, d1: usize, cp: &CpConfig) -> Result<ProjectionSpec> {
    match cp.projection {
        ProjectionKind::Gaussian => gen_projection(projection_seed(master), d1, cp.d1_proj),
        ProjectionKind::Coordinate => ProjectionSpec::coordinate(d1, cp.d1_proj),
    }
}

pub fn project_dataset(ds: &Dataset, spec: &ProjectionSpec) -> Result<Dataset> {
    Dataset::new(project_inputs(&ds.x, spec)?, ds.labels.clone(), ds.classes)
}

/// One CP-NTK-FL round on an explicit cohort. `model` takes projected inputs;
/// `data` holds raw client inputs.
pub fn cp_round_on(
    model: &ModelConfig,
    w: &ModelWeights,
    data: &FedData,
    cohort: &[usize],
    cfg: &RoundConfig,
    cp: &CpConfig,
    round: usize,
) -> Result<(ModelWeights, RoundMetrics)> {
    let keys = KeyServer::new(projection_seed(cfg.seed));
    cp_round_with_keys(model, w, data, cohort, cfg, cp, round, &keys)
}

/// [`cp_round_on`] with a caller-supplied key server, whose log can be
/// inspected afterwards.
#[allow(clippy::too_many_arguments)]
pub fn cp_round_with_keys(
    model: &ModelConfig,
    w: &ModelWeights,
    data: &FedData,
    cohort: &[usize],
    cfg: &RoundConfig,
    cp: &CpConfig,
    round: usize,
    keys: &KeyServer,
) -> Result<(ModelWeights, RoundMetrics)> {
    let d1 = data
        .clients
        .first()
        .map(|b| b.x.cols())
        .ok_or_else(|| Error::InvalidArgument("no clients".into()))?;
    cp.validate(d1)?;
    if model.input_dim != cp.d1_proj {
        return Err(Error::shape("cp model input", cp.d1_proj, model.input_dim));
    }
    if cohort.is_empty() {
        return Err(Error::InvalidArgument("empty cohort".into()));
    }
    let base_spec = projection_for(cfg.seed, d1, cp)?;
    let mut updates = Vec::with_capacity(cohort.len());
    let mut projected = Vec::with_capacity(cohort.len());
    let mut uplink = 0;
    for &m in cohort {
        let rho = keys.deliver(Party::Client(m));
        let spec = &ProjectionSpec {
            seed: rho,
            ..base_spec.clone()
        };
        let local = &data.clients[m];
        let all: Vec<usize> = (0..local.len()).collect();
        let sub_seed = rng::derive_seed(cfg.seed, labels!["cp", round, "client", m, "subsample"]);
        let kept = subsample_list(&all, cp.beta, sub_seed);
        let sub = local.select(&kept);
        let pb = Batch::new(project_inputs(&sub.x, spec)?, sub.y)?;
        let u = fed::client_update(model, w, &pb, m)?;
        let (c, bytes) = compress_update(&u, cp.sparsity)?;
        drop(u);
        uplink += bytes;
        updates.push(c);
        projected.push(pb);
    }
    // evaluation happens on the client side, which holds the seed
    let spec = base_spec;

    // shuffling server, then aggregation server
    let sizes: Vec<usize> = updates.iter().map(ClientUpdate::n_samples).collect();
    let state = ntk::assemble_global(updates, cfg.eta)?;
    let shuffle_seed = rng::derive_seed(cfg.seed, labels!["cp", round, "shuffle"]);
    let plan = match cp.shuffle {
        ShuffleLevel::Sample => ShufflePlan::random(state.n(), shuffle_seed),
        ShuffleLevel::Client => ShufflePlan::client_level(&sizes, shuffle_seed),
    };
    let mut state = apply_shuffle(&state, &plan)?;

    let cohort_batch = fed::pool(projected.iter())?;
    let validation = match &data.validation {
        Some(v) => Some(Batch::new(project_inputs(&v.x, &spec)?, v.y.clone())?),
        None => None,
    };
    let (evo, lambda_min) =
        fed::server_update(&mut state, model, w, cfg, &cohort_batch, validation.as_ref())?;
    drop(state);

    let test = match &data.test {
        Some(t) => Some(project_dataset(t, &spec)?),
        None => None,
    };
    let residual_before = w_residual(model, w, &cohort_batch)?;
    let pred = model.forward(&evo.w_next, &cohort_batch.x)?;
    let (test_acc, test_loss) = match &test {
        Some(t) => {
            let (a, l) = fed::evaluate(model, &evo.w_next, t)?;
            (Some(a), Some(l))
        }
        None => (None, None),
    };
    let metrics = RoundMetrics {
        round,
        scheme: Scheme::CpNtkfl,
        chosen: evo.chosen_t,
        train_loss: crate::model::loss(&pred, &cohort_batch.y)?,
        test_acc,
        test_loss,
        uplink_bytes: uplink,
        lambda_min,
        residual_before,
        residual_after: pred.sub(&cohort_batch.y)?.frobenius_norm_sq(),
        cohort: cohort.to_vec(),
        wall_ms: 0,
    };
    Ok((evo.w_next, metrics))
}

fn w_residual(model: &ModelConfig, w: &ModelWeights, b: &Batch) -> Result<f64> {
    Ok(model.forward(w, &b.x)?.sub(&b.y)?.frobenius_norm_sq())
}

pub fn run_round_cp_ntkfl(
    model: &ModelConfig,
    w: &ModelWeights,
    data: &FedData,
    cfg: &RoundConfig,
    cp: &CpConfig,
    round: usize,
) -> Result<(ModelWeights, RoundMetrics)> {
    let cohort = fed::sample_clients(data.num_clients(), cfg.clients_per_round, cfg.seed, round)?;
    cp_round_on(model, w, data, &cohort, cfg, cp, round)
}
