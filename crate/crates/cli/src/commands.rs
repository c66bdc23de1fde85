//! Subcommand implementations. Each writes its outputs under `out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ntkfed::cp;
use ntkfed::fed::{self, MetricsWriter, RoundMetrics, Scheme, Trace};
use ntkfed::model::{ModelConfig, ModelWeights};

use crate::config::ExperimentConfig;
use crate::experiment::{prepare, Experiment};
use crate::weights::write_weights;

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let path = out.join(name);
    let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes `partition.csv`: one row per client with its class histogram.
pub fn cmd_partition(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let exp = prepare(cfg)?;
    let mut w = create(out, "partition.csv")?;
    let classes = exp.train.classes;
    let header: Vec<String> = (0..classes).map(|c| format!("class_{c}")).collect();
    writeln!(w, "client,samples,{}", header.join(","))?;
    for (m, idx) in exp.partition.clients.iter().enumerate() {
        let hist = exp.train.class_histogram(idx);
        let cells: Vec<String> = hist.iter().map(usize::to_string).collect();
        writeln!(w, "{m},{},{}", idx.len(), cells.join(","))?;
    }
    w.flush()?;
    Ok(out.join("partition.csv"))
}

/// Model and starting weights for `scheme`.
fn model_for(exp: &Experiment, cfg: &ExperimentConfig, scheme: Scheme) -> Result<(ModelConfig, ModelWeights)> {
    if scheme == Scheme::CpNtkfl {
        exp.cp_model(cfg)
    } else {
        Ok((exp.model, exp.initial_weights(cfg)))
    }
}

fn simulate(
    exp: &Experiment,
    cfg: &ExperimentConfig,
    scheme: Scheme,
    tau: Option<usize>,
    mut sink: impl FnMut(&RoundMetrics) -> Result<()>,
) -> Result<Trace> {
    let (model, w0) = model_for(exp, cfg, scheme)?;
    let mut rc = cfg.round_config(scheme);
    if let Some(t) = tau {
        rc.tau = t;
    }
    fed::run_simulation(&model, &w0, &exp.data, &rc, Some(&cfg.cp), |m| {
        sink(m).map_err(|e| ntkfed::Error::Format(e.to_string()))
    })
    .map_err(Into::into)
}

/// Runs the configured scheme, streaming `metrics.csv` and writing
/// `weights.bin` at the end. Rows of completed rounds survive a divergence.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Trace> {
    let exp = prepare(cfg)?;
    let mut writer = MetricsWriter::new(create(out, "metrics.csv")?)?;
    let trace = simulate(&exp, cfg, cfg.scheme, None, |m| Ok(writer.write(m)?))?;
    write_weights(&out.join("weights.bin"), trace.weights.params())?;
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub scheme: Scheme,
    pub tau: Option<usize>,
    /// First round with test accuracy at or above the target.
    pub rounds_to_target: Option<usize>,
    /// Uplink up to and including that round, or over the whole run.
    pub uplink_mb: f64,
    pub final_acc: f64,
}

pub fn rounds_to_target(metrics: &[RoundMetrics], target: f64) -> Option<usize> {
    metrics
        .iter()
        .find(|m| m.test_acc.is_some_and(|a| a >= target))
        .map(|m| m.round)
}

fn compare_row(scheme: Scheme, tau: Option<usize>, trace: &Trace, target: f64) -> CompareRow {
    let reached = rounds_to_target(&trace.metrics, target);
    let upto = reached.unwrap_or(trace.metrics.len());
    let bytes: u64 = trace.metrics.iter().take(upto).map(|m| m.uplink_bytes).sum();
    CompareRow {
        scheme,
        tau,
        rounds_to_target: reached,
        uplink_mb: bytes as f64 / 1e6,
        final_acc: trace
            .metrics
            .last()
            .and_then(|m| m.test_acc)
            .unwrap_or(f64::NAN),
    }
}

/// Best FedAvg run: fewest rounds to target, then higher final accuracy.
fn better(a: &CompareRow, b: &CompareRow) -> bool {
    match (a.rounds_to_target, b.rounds_to_target) {
        (Some(x), Some(y)) if x != y => x < y,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        _ => a.final_acc > b.final_acc,
    }
}

/// Rounds-to-target table over the configured schemes; writes `compare.csv`.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CompareRow>> {
    let exp = prepare(cfg)?;
    let target = cfg.compare.target_accuracy;
    let mut rows = Vec::new();
    for &scheme in &cfg.compare.schemes {
        if scheme == Scheme::Fedavg {
            let mut best: Option<CompareRow> = None;
            for &tau in &cfg.compare.tau_grid {
                let trace = simulate(&exp, cfg, scheme, Some(tau), |_| Ok(()))?;
                let row = compare_row(scheme, Some(tau), &trace, target);
                if best.as_ref().is_none_or(|b| better(&row, b)) {
                    best = Some(row);
                }
            }
            rows.extend(best);
        } else {
            let trace = simulate(&exp, cfg, scheme, None, |_| Ok(()))?;
            rows.push(compare_row(scheme, None, &trace, target));
        }
    }
    let mut w = create(out, "compare.csv")?;
    writeln!(w, "scheme,tau,rounds_to_target,uplink_mb,final_acc")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.scheme,
            r.tau.map(|t| t.to_string()).unwrap_or_default(),
            r.rounds_to_target
                .map(|t| t.to_string())
                .unwrap_or_else(|| "not reached".into()),
            fed::fmt_float(r.uplink_mb),
            fed::fmt_float(r.final_acc)
        )?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommRow {
    pub scheme: Scheme,
    pub bytes_per_round: u64,
}

/// Uplink bytes of every scheme for the first round's cohort; writes `comm.csv`.
pub fn cmd_comm_report(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CommRow>> {
    let exp = prepare(cfg)?;
    let rc = cfg.round_config(cfg.scheme);
    let cohort = fed::sample_clients(exp.data.num_clients(), rc.clients_per_round, rc.seed, 1)?;
    let sizes: Vec<usize> = cohort.iter().map(|&m| exp.data.clients[m].len()).collect();
    let cp_sizes: Vec<usize> = sizes
        .iter()
        .map(|&n| ((cfg.cp.beta * n as f64).floor() as usize).max(1).min(n))
        .collect();
    let d2 = exp.model.output_dim;
    let d = exp.model.param_count();
    let (cp_model, _) = exp.cp_model(cfg)?;
    let rows = vec![
        CommRow {
            scheme: Scheme::Fedavg,
            bytes_per_round: cp::comm_cost(Scheme::Fedavg, &sizes, d2, d, 0.0),
        },
        CommRow {
            scheme: Scheme::Ntkfl,
            bytes_per_round: cp::comm_cost(Scheme::Ntkfl, &sizes, d2, d, 0.0),
        },
        CommRow {
            scheme: Scheme::CpNtkfl,
            bytes_per_round: cp::comm_cost(
                Scheme::CpNtkfl,
                &cp_sizes,
                d2,
                cp_model.param_count(),
                cfg.cp.sparsity,
            ),
        },
    ];
    let mut w = create(out, "comm.csv")?;
    writeln!(w, "scheme,bytes_per_round,megabytes_per_round,ratio_to_fedavg")?;
    let base = rows[0].bytes_per_round as f64;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.scheme,
            r.bytes_per_round,
            fed::fmt_float(r.bytes_per_round as f64 / 1e6),
            fed::fmt_float(r.bytes_per_round as f64 / base)
        )?;
    }
    w.flush()?;
    Ok(rows)
}
