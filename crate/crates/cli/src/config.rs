//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ntkfed::cp::CpConfig;
use ntkfed::fed::{Aggregation, RoundConfig, Scheme, SelectionMode};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub rounds: RoundSection,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default)]
    pub cp: CpConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_scheme() -> Scheme {
    Scheme::Ntkfl
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Exactly one of the two sources must be given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxPaths>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub train: usize,
    pub test: usize,
    pub dim: usize,
    pub classes: usize,
    #[serde(default = "one")]
    pub separation: f64,
    #[serde(default = "one")]
    pub noise: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Downsample square images by 2x2 average pooling.
    #[serde(default)]
    pub pool2x2: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    /// Dirichlet concentration; `null` gives an IID split.
    pub alpha: Option<f64>,
    /// Keep a random subset of `clients · samples_per_client` training rows.
    pub samples_per_client: Option<usize>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients: 50,
            alpha: Some(0.5),
            samples_per_client: None,
        }
    }
}

/// Two-layer ReLU network; input and output sizes come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundSection {
    pub clients_per_round: usize,
    pub rounds: usize,
    pub eta: f64,
    pub t_grid: Vec<usize>,
    pub tau: usize,
    pub batch_size: usize,
    pub local_lr: Option<f64>,
    pub centralized_steps: usize,
    pub aggregation: Aggregation,
    pub selection: SelectionMode,
    /// Training rows held back for validation-based step selection.
    pub validation_samples: usize,
    pub record_spectrum: bool,
    pub record_wall_time: bool,
}

impl Default for RoundSection {
    fn default() -> Self {
        let r = RoundConfig::default();
        Self {
            clients_per_round: r.clients_per_round,
            rounds: r.rounds,
            eta: r.eta,
            t_grid: r.t_grid,
            tau: r.tau,
            batch_size: r.batch_size,
            local_lr: r.local_lr,
            centralized_steps: r.centralized_steps,
            aggregation: r.aggregation,
            selection: r.selection,
            validation_samples: 0,
            record_spectrum: r.record_spectrum,
            record_wall_time: r.record_wall_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub schemes: Vec<Scheme>,
    pub target_accuracy: f64,
    /// FedAvg is run once per value and the best run is reported.
    pub tau_grid: Vec<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            schemes: vec![Scheme::Ntkfl, Scheme::Fedavg],
            target_accuracy: 0.75,
            tau_grid: vec![5, 10, 20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub decay_steps: usize,
    pub gap_grid: Vec<usize>,
    /// Test hook: perturb the kernel before the symmetry check.
    pub inject_kernel_asymmetry: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            decay_steps: 2000,
            gap_grid: (0..=10).map(|i| 100 * i).collect(),
            inject_kernel_asymmetry: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.synthetic, &self.dataset.idx) {
            (Some(_), Some(_)) | (None, None) => {
                bail!("dataset must set exactly one of dataset.synthetic and dataset.idx")
            }
            (Some(s), None) => {
                if s.train == 0 || s.test == 0 || s.dim == 0 || s.classes == 0 {
                    bail!("dataset.synthetic sizes must be at least 1");
                }
                if s.train < s.classes {
                    bail!("dataset.synthetic.train must be at least dataset.synthetic.classes");
                }
                if !(s.noise >= 0.0 && s.separation >= 0.0) {
                    bail!("dataset.synthetic.noise and separation must be nonnegative");
                }
            }
            (None, Some(_)) => {}
        }
        if self.partition.clients == 0 {
            bail!("partition.clients must be at least 1");
        }
        if let Some(a) = self.partition.alpha {
            if !(a > 0.0 && a.is_finite()) {
                bail!("partition.alpha must be positive, got {a}");
            }
        }
        if self.partition.samples_per_client == Some(0) {
            bail!("partition.samples_per_client must be at least 1");
        }
        if self.model.hidden == 0 {
            bail!("model.hidden must be at least 1");
        }
        let r = &self.rounds;
        if r.clients_per_round == 0 || r.clients_per_round > self.partition.clients {
            bail!(
                "rounds.clients_per_round must lie in [1, partition.clients = {}]",
                self.partition.clients
            );
        }
        if !(r.eta > 0.0 && r.eta.is_finite()) {
            bail!("rounds.eta must be positive");
        }
        if r.local_lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            bail!("rounds.local_lr must be positive");
        }
        if r.t_grid.is_empty() || r.t_grid[0] == 0 || r.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            bail!("rounds.t_grid must be strictly increasing positive integers");
        }
        if r.tau == 0 {
            bail!("rounds.tau must be at least 1");
        }
        if r.batch_size == 0 {
            bail!("rounds.batch_size must be at least 1");
        }
        if r.selection == SelectionMode::Validation && r.validation_samples == 0 {
            bail!("rounds.selection = validation requires rounds.validation_samples > 0");
        }
        // d1 is only known once the data is loaded
        self.cp
            .validate(usize::MAX)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let c = &self.compare;
        if !(0.0..=1.0).contains(&c.target_accuracy) {
            bail!("compare.target_accuracy must lie in [0,1]");
        }
        if c.tau_grid.contains(&0) {
            bail!("compare.tau_grid entries must be at least 1");
        }
        if self.analysis.gap_grid.windows(2).any(|w| w[0] >= w[1]) {
            bail!("analysis.gap_grid must be strictly increasing");
        }
        Ok(())
    }

    pub fn round_config(&self, scheme: Scheme) -> RoundConfig {
        let r = &self.rounds;
        RoundConfig {
            clients_per_round: r.clients_per_round,
            rounds: r.rounds,
            eta: r.eta,
            t_grid: r.t_grid.clone(),
            tau: r.tau,
            batch_size: r.batch_size,
            local_lr: r.local_lr,
            centralized_steps: r.centralized_steps,
            aggregation: r.aggregation,
            selection: r.selection,
            record_spectrum: r.record_spectrum,
            record_wall_time: r.record_wall_time,
            seed: ntkfed::rng::derive_seed(self.seed, ntkfed::labels!["rounds"]),
            scheme,
        }
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).context("invalid config")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in {}", path.display()))
}
