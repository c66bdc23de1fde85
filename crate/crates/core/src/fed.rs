//! Round drivers: NTK-FL, FedAvg, centralized training, client sampling and
//! evaluation.

use std::io::Write;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::cp::{self, CpConfig};
use crate::data::{Dataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{self, Batch, ModelConfig, ModelWeights};
use crate::ntk::{self, ClientUpdate, Evaluation, GlobalState, JacobianPayload};
use crate::rng;

/// Weights whose magnitude exceeds this are treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Ntkfl,
    Fedavg,
    Centralized,
    CpNtkfl,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ntkfl => "ntkfl",
            Scheme::Fedavg => "fedavg",
            Scheme::Centralized => "centralized",
            Scheme::CpNtkfl => "cp-ntkfl",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How FedAvg combines client models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Uniform,
    SampleWeighted,
}

/// Data used to score the step-count grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    #[default]
    TrainLoss,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub clients_per_round: usize,
    pub rounds: usize,
    /// Learning rate of the evolved (and centralized) gradient descent.
    pub eta: f64,
    pub t_grid: Vec<usize>,
    /// FedAvg local iterations.
    pub tau: usize,
    pub batch_size: usize,
    /// FedAvg client learning rate; `eta` when unset.
    pub local_lr: Option<f64>,
    /// Full-batch steps per round for the centralized baseline.
    pub centralized_steps: usize,
    pub aggregation: Aggregation,
    pub selection: SelectionMode,
    /// Compute `λ_min(Θ)` every NTK round.
    pub record_spectrum: bool,
    /// Record wall-clock time; off keeps metrics byte-reproducible.
    pub record_wall_time: bool,
    pub seed: u64,
    pub scheme: Scheme,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            clients_per_round: 10,
            rounds: 40,
            eta: 0.1,
            t_grid: (1..=20).map(|i| 100 * i).collect(),
            tau: 10,
            batch_size: 200,
            local_lr: None,
            centralized_steps: 100,
            aggregation: Aggregation::Uniform,
            selection: SelectionMode::TrainLoss,
            record_spectrum: false,
            record_wall_time: false,
            seed: 0,
            scheme: Scheme::Ntkfl,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self, total_clients: usize) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > total_clients {
            return Err(Error::InvalidArgument(format!(
                "clients per round must lie in [1, {total_clients}], got {}",
                self.clients_per_round
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be positive, got {}", self.eta)));
        }
        if let Some(lr) = self.local_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("local_lr must be positive, got {lr}")));
            }
        }
        if self.scheme == Scheme::Fedavg && self.tau == 0 {
            return Err(Error::InvalidArgument("tau must be at least 1 for fedavg".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if matches!(self.scheme, Scheme::Ntkfl | Scheme::CpNtkfl)
            && (self.t_grid.is_empty()
                || self.t_grid[0] == 0
                || self.t_grid.windows(2).any(|w| w[0] >= w[1]))
        {
            return Err(Error::InvalidArgument(
                "t_grid must be strictly increasing positive integers".into(),
            ));
        }
        Ok(())
    }

    fn local_lr(&self) -> f64 {
        self.local_lr.unwrap_or(self.eta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub scheme: Scheme,
    /// Chosen step count (NTK schemes), `τ` (FedAvg) or step count (centralized).
    pub chosen: usize,
    /// Loss of the new weights on the round's cohort data.
    pub train_loss: f64,
    pub test_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub uplink_bytes: u64,
    pub lambda_min: Option<f64>,
    /// `‖f(w_k; X) − Y‖²` on the cohort before and after the round.
    pub residual_before: f64,
    pub residual_after: f64,
    pub cohort: Vec<usize>,
    pub wall_ms: u64,
}

/// Per-client training data plus optional evaluation sets.
#[derive(Clone, Debug)]
pub struct FedData {
    pub clients: Vec<Batch>,
    pub test: Option<Dataset>,
    pub validation: Option<Batch>,
}

impl FedData {
    /// One-hot client batches according to `part`.
    pub fn from_partition(train: &Dataset, part: &PartitionSpec, test: Option<Dataset>) -> Self {
        let clients = part
            .clients
            .iter()
            .map(|idx| train.subset(idx).to_batch())
            .collect();
        Self {
            clients,
            test,
            validation: None,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Cohort data in cohort order, then local order.
    pub fn pooled(&self, cohort: &[usize]) -> Result<Batch> {
        pool(cohort.iter().map(|&m| &self.clients[m]))
    }
}

pub(crate) fn pool<'a>(parts: impl Iterator<Item = &'a Batch>) -> Result<Batch> {
    let parts: Vec<&Batch> = parts.collect();
    let xs: Vec<&Matrix> = parts.iter().map(|b| &b.x).collect();
    let ys: Vec<&Matrix> = parts.iter().map(|b| &b.y).collect();
    Batch::new(Matrix::vstack(&xs)?, Matrix::vstack(&ys)?)
}

/// Uniform sample of `k` of `total` clients without replacement, sorted.
pub fn sample_clients(total: usize, k: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if k > total {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {total} clients"
        )));
    }
    let mut r = rng::stream_for(seed, labels!["clients", round]);
    let mut ids = index::sample(&mut r, total, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Accuracy (argmax, ties to the lowest class) and loss on `test`.
pub fn evaluate(model: &ModelConfig, w: &ModelWeights, test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let pred = model.forward(w, &test.x)?;
    let y = test.one_hot();
    let loss = if y.shape() == pred.shape() {
        model::loss(&pred, &y)?
    } else {
        f64::NAN
    };
    let correct = (0..pred.rows())
        .filter(|&i| argmax(pred.row(i)) == test.labels[i])
        .count();
    Ok((correct as f64 / test.len() as f64, loss))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn check_divergence(w: &ModelWeights, what: &str) -> Result<()> {
    if !w.is_finite() || w.max_abs() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence(format!(
            "{what}: weights left the range |w| <= {DIVERGENCE_LIMIT:e}"
        )));
    }
    Ok(())
}

fn residual_sq(model: &ModelConfig, w: &ModelWeights, b: &Batch) -> Result<f64> {
    Ok(model.forward(w, &b.x)?.sub(&b.y)?.frobenius_norm_sq())
}

/// Client side of an NTK round: Jacobian, labels and outputs at `w`.
pub fn client_update(model: &ModelConfig, w: &ModelWeights, batch: &Batch, client_id: usize) -> Result<ClientUpdate> {
    let j = model.batch_jacobian(w, &batch.x)?;
    let f0 = model.forward(w, &batch.x)?;
    ClientUpdate::new(client_id, JacobianPayload::Dense(j), batch.y.clone(), f0)
}

/// Server side: kernel, step-count selection and the new weights.
pub(crate) fn server_update(
    state: &mut GlobalState,
    model: &ModelConfig,
    w: &ModelWeights,
    cfg: &RoundConfig,
    cohort: &Batch,
    validation: Option<&Batch>,
) -> Result<(ntk::EvolutionResult, Option<f64>)> {
    state.ensure_kernel();
    let lambda_min = if cfg.record_spectrum {
        Some(analysis::kernel_spectrum(state.kernel()?)?.0)
    } else {
        None
    };
    let eval = match cfg.selection {
        SelectionMode::TrainLoss => Evaluation::TrainLoss(cohort),
        SelectionMode::Validation => Evaluation::Validation(validation.ok_or_else(|| {
            Error::InvalidArgument("validation selection requires a validation split".into())
        })?),
    };
    let evo = ntk::select_t(state, w, &cfg.t_grid, model, eval)?;
    check_divergence(&evo.w_next, "ntk evolution")?;
    Ok((evo, lambda_min))
}

fn finish_metrics(
    model: &ModelConfig,
    w_old: &ModelWeights,
    w_new: &ModelWeights,
    cohort_batch: &Batch,
    test: Option<&Dataset>,
    base: RoundMetrics,
) -> Result<RoundMetrics> {
    let residual_before = residual_sq(model, w_old, cohort_batch)?;
    let pred = model.forward(w_new, &cohort_batch.x)?;
    let residual_after = pred.sub(&cohort_batch.y)?.frobenius_norm_sq();
    let train_loss = model::loss(&pred, &cohort_batch.y)?;
    let (test_acc, test_loss) = match test {
        Some(t) => {
            let (a, l) = evaluate(model, w_new, t)?;
            (Some(a), Some(l))
        }
        None => (None, None),
    };
    Ok(RoundMetrics {
        train_loss,
        test_acc,
        test_loss,
        residual_before,
        residual_after,
        ..base
    })
}

fn blank_metrics(round: usize, scheme: Scheme, cohort: Vec<usize>) -> RoundMetrics {
    RoundMetrics {
        round,
        scheme,
        chosen: 0,
        train_loss: f64::NAN,
        test_acc: None,
        test_loss: None,
        uplink_bytes: 0,
        lambda_min: None,
        residual_before: f64::NAN,
        residual_after: f64::NAN,
        cohort,
        wall_ms: 0,
    }
}

/// One NTK-FL round on an explicit cohort.
pub fn ntkfl_round_on(
    model: &ModelConfig,
    w: &ModelWeights,
    data: &FedData,
    cohort: &[usize],
    cfg: &RoundConfig,
    round: usize,
) -> Result<(ModelWeights, RoundMetrics)> {
    let mut updates = Vec::with_capacity(cohort.len());
    let mut uplink = 0;
    for &m in cohort {
        let u = client_update(model, w, &data.clients[m], m)?;
        uplink += u.dense_bytes();
        updates.push(u);
    }
    let mut state = ntk::assemble_global(updates, cfg.eta)?;
    let cohort_batch = data.pooled(cohort)?;
    let (evo, lambda_min) =
        server_update(&mut state, model, w, cfg, &cohort_batch, data.validation.as_ref())?;
    drop(state);
    let base = RoundMetrics {
        chosen: evo.chosen_t,
        uplink_bytes: uplink,
        lambda_min,
        ..blank_metrics(round, Scheme::Ntkfl, cohort.to_vec())
    };
    let metrics = finish_metrics(model, w, &evo.w_next, &cohort_batch, data.test.as_ref(), base)?;
    Ok((evo.w_next, metrics))
}

pub fn run_round_ntkfl(
    model: &ModelConfig,
    w: &ModelWeights,
    data: &FedData,
    cfg: &RoundConfig,
    round: usize,
) -> Result<(ModelWeights, RoundMetrics)> {
    let cohort = sample_clients(data.num_clients(), cfg.clients_per_round, cfg.seed, round)?;
    ntkfl_round_on(model, w, data, &cohort, cfg, round)
}

/// `steps` plain gradient-descent steps on `batch`.
pub fn gradient_descent(
    model: &ModelConfig,
    w: &ModelWeights,
    batch: &Batch,
    lr: f64,
    steps: usize,
) -> Result<ModelWeights> {
    let mut params = w.params().to_vec();
    let mut cur = w.clone();
    for _ in 0..steps {
        let g = model.batch_gradient(&cur, batch)?;
        for (p, gi) in params.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
        cur = w.with_params(params.clone())?;
        check_divergence(&cur, "gradient descent")?;
    }
    Ok(cur)
}

/// `τ` mini-batch steps. Batches walk cyclically through a seeded permutation;
/// a batch size covering the whole client uses all rows in their stored order.
pub fn local_sgd(
    model: &ModelConfig,
    w: &ModelWeights,
    batch: &Batch,
    lr: f64,
    tau: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ModelWeights> {
    let n = batch.len();
    if n == 0 || batch_size >= n {
        return gradient_descent(model, w, batch, lr, tau);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed));
    let mut params = w.params().to_vec();
    let mut cur = w.clone();
    let mut pos = 0;
    let mut idx = Vec::with_capacity(batch_size);
    for _ in 0..tau {
        idx.clear();
        for _ in 0..batch_size {
            idx.push(order[pos]);
            pos = (pos + 1) % n;
        }
        let g = model.batch_gradient(&cur, &batch.select(&idx))?;
        for (p, gi) in params.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
        cur = w.with_params(params.clone())?;
        check_divergence(&cur, "local sgd")?;
    }
    Ok(cur)
}

/// One FedAvg round on an explicit cohort.
pub fn fedavg_round_on(
    model: &ModelConfig,
    w: &ModelWeights,
    data: &FedData,
    cohort: &[usize],
    cfg: &RoundConfig,
    round: usize,
) -> Result<(ModelWeights, RoundMetrics)> {
    if cfg.tau == 0 {
        return Err(Error::InvalidArgument("tau must be at least 1".into()));
    }
    if cohort.is_empty() {
        return Err(Error::InvalidArgument("empty cohort".into()));
    }
    let locals: Vec<ModelWeights> = cohort
        .par_iter()
        .map(|&m| {
            let seed = rng::derive_seed(cfg.seed, labels!["fedavg", round, "client", m]);
            local_sgd(model, w, &data.clients[m], cfg.local_lr(), cfg.tau, cfg.batch_size, seed)
        })
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = match cfg.aggregation {
        Aggregation::Uniform => vec![1.0 / cohort.len() as f64; cohort.len()],
        Aggregation::SampleWeighted => {
            let total: usize = cohort.iter().map(|&m| data.clients[m].len()).sum();
            cohort
                .iter()
                .map(|&m| data.clients[m].len() as f64 / total as f64)
                .collect()
        }
    };
    let mut avg = vec![0.0; w.len()];
    for (local, a) in locals.iter().zip(&weights) {
        for (s, p) in avg.iter_mut().zip(local.params()) {
            *s += a * p;
        }
    }
    let w_next = w.with_params(avg)?;
    check_divergence(&w_next, "fedavg aggregation")?;
    let cohort_batch = data.pooled(cohort)?;
    let base = RoundMetrics {
        chosen: cfg.tau,
        uplink_bytes: cp::comm_cost_fedavg(cohort.len(), w.len()),
        ..blank_metrics(round, Scheme::Fedavg, cohort.to_vec())
    };
    let metrics = finish_metrics(model, w, &w_next, &cohort_batch, data.test.as_ref(), base)?;
    Ok((w_next, metrics))
}

pub fn run_round_fedavg(
    model: &ModelConfig,
    w: &ModelWeights,
    data: &FedData,
    cfg: &RoundConfig,
    round: usize,
) -> Result<(ModelWeights, RoundMetrics)> {
    let cohort = sample_clients(data.num_clients(), cfg.clients_per_round, cfg.seed, round)?;
    fedavg_round_on(model, w, data, &cohort, cfg, round)
}

/// Full-batch gradient descent on the pooled cohort data.
pub fn run_centralized(
    model: &ModelConfig,
    w: &ModelWeights,
    data: &FedData,
    cfg: &RoundConfig,
    round: usize,
) -> Result<(ModelWeights, RoundMetrics)> {
    let cohort = sample_clients(data.num_clients(), cfg.clients_per_round, cfg.seed, round)?;
    let pooled = data.pooled(&cohort)?;
    let w_next = gradient_descent(model, w, &pooled, cfg.eta, cfg.centralized_steps)?;
    let base = RoundMetrics {
        chosen: cfg.centralized_steps,
        ..blank_metrics(round, Scheme::Centralized, cohort)
    };
    let metrics = finish_metrics(model, w, &w_next, &pooled, data.test.as_ref(), base)?;
    Ok((w_next, metrics))
}

/// Column order of the metrics CSV.
pub const METRICS_HEADER: &str =
    "round,scheme,chosen_t_or_tau,train_loss,test_acc,uplink_bytes,lambda_min,wall_ms";

/// Writes [`RoundMetrics`] rows; floats carry 17 significant digits.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{}",
            m.round,
            m.scheme,
            m.chosen,
            fmt_float(m.train_loss),
            m.test_acc.map(fmt_float).unwrap_or_default(),
            m.uplink_bytes,
            m.lambda_min.map(fmt_float).unwrap_or_default(),
            m.wall_ms
        )?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Final weights and the per-round records of a multi-round run.
#[derive(Clone, Debug)]
pub struct Trace {
    pub weights: ModelWeights,
    pub metrics: Vec<RoundMetrics>,
}

/// Runs `cfg.rounds` rounds of `cfg.scheme` from `w0`. `sink` sees each record
/// as soon as its round completes, so a later divergence leaves earlier rows
/// intact.
pub fn run_simulation(
    model: &ModelConfig,
    w0: &ModelWeights,
    data: &FedData,
    cfg: &RoundConfig,
    cp_cfg: Option<&CpConfig>,
    mut sink: impl FnMut(&RoundMetrics) -> Result<()>,
) -> Result<Trace> {
    cfg.validate(data.num_clients())?;
    if cfg.scheme == Scheme::CpNtkfl && cp_cfg.is_none() {
        return Err(Error::InvalidArgument("cp-ntkfl requires cp parameters".into()));
    }
    let mut w = w0.clone();
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let (w_next, mut m) = match cfg.scheme {
            Scheme::Ntkfl => run_round_ntkfl(model, &w, data, cfg, round)?,
            Scheme::Fedavg => run_round_fedavg(model, &w, data, cfg, round)?,
            Scheme::Centralized => run_centralized(model, &w, data, cfg, round)?,
            Scheme::CpNtkfl => {
                cp::run_round_cp_ntkfl(model, &w, data, cfg, cp_cfg.expect("checked"), round)?
            }
        };
        if cfg.record_wall_time {
            m.wall_ms = start.elapsed().as_millis() as u64;
        }
        sink(&m)?;
        metrics.push(m);
        w = w_next;
    }
    Ok(Trace { weights: w, metrics })
}
