use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Assignment of dataset rows to clients; lists are disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionSpec {
    pub clients: Vec<Vec<usize>>,
}

impl PartitionSpec {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, m: usize) -> &[usize] {
        &self.clients[m]
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// Consecutive equal-size chunks of `0..n` (IID, unshuffled).
    pub fn contiguous(n: usize, clients: usize) -> Self {
        let clients = clients.max(1);
        let mut out = Vec::with_capacity(clients);
        let mut start = 0;
        for m in 0..clients {
            let len = n / clients + usize::from(m < n % clients);
            out.push((start..start + len).collect());
            start += len;
        }
        Self { clients: out }
    }
}

/// Largest-remainder rounding of `weights · total` to integers summing to `total`.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Non-IID split: client `m` draws class proportions `q_m ~ Dir(α)` and fills a
/// quota of ⌊N/M⌋ (the first `N mod M` clients take one more) from per-class
/// pools without replacement. Demand on an exhausted class spills to the class
/// with the most remaining samples.
pub fn dirichlet_partition(ds: &Dataset, clients: usize, alpha: f64, seed: u64) -> Result<PartitionSpec> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "Dirichlet concentration must be positive, got {alpha}"
        )));
    }
    let c = ds.classes;
    let mut pool_rng = rng::stream_for(seed, crate::labels!["partition", "pools"]);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for p in pools.iter_mut() {
        p.shuffle(&mut pool_rng);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = ds.len();
    let mut out = Vec::with_capacity(clients);
    for m in 0..clients {
        let quota = n / clients + usize::from(m < n % clients);
        let mut r = rng::stream_for(seed, crate::labels!["partition", "client", m]);
        let mut q: Vec<f64> = (0..c).map(|_| gamma.sample(&mut r)).collect();
        let total: f64 = q.iter().sum();
        if total.is_nan() || total <= 0.0 {
            // every gamma draw underflowed; put all mass on one class
            q.iter_mut().for_each(|v| *v = 0.0);
            q[r.random_range(0..c)] = 1.0;
        }
        let targets = apportion(&q, quota);
        let mut mine = Vec::with_capacity(quota);
        let mut deficit = 0;
        for (class, &want) in targets.iter().enumerate() {
            let take = want.min(pools[class].len());
            let at = pools[class].len() - take;
            mine.extend(pools[class].drain(at..));
            deficit += want - take;
        }
        while deficit > 0 {
            let Some(richest) = (0..c)
                .filter(|&k| !pools[k].is_empty())
                .max_by(|&a, &b| pools[a].len().cmp(&pools[b].len()).then(b.cmp(&a)))
            else {
                break;
            };
            mine.push(pools[richest].pop().expect("non-empty pool"));
            deficit -= 1;
        }
        mine.sort_unstable();
        out.push(mine);
    }
    Ok(PartitionSpec { clients: out })
}

/// Keeps `max(1, ⌊β·N_m⌋)` uniformly drawn indices per client, in their
/// original relative order.
pub fn subsample(part: &PartitionSpec, beta: f64, seed: u64) -> Result<PartitionSpec> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling rate must lie in (0,1], got {beta}"
        )));
    }
    let clients = part
        .clients
        .iter()
        .enumerate()
        .map(|(m, list)| subsample_list(list, beta, rng::derive_seed(seed, crate::labels!["subsample", m])))
        .collect();
    Ok(PartitionSpec { clients })
}

pub(crate) fn subsample_list(list: &[usize], beta: f64, seed: u64) -> Vec<usize> {
    if beta >= 1.0 || list.is_empty() {
        return list.to_vec();
    }
    let keep = ((beta * list.len() as f64).floor() as usize).max(1);
    let mut r = rng::stream(seed);
    let mut pos = index::sample(&mut r, list.len(), keep).into_vec();
    pos.sort_unstable();
    pos.into_iter().map(|p| list[p]).collect()
}
