//! Turns a configuration into data, partition and model.

use anyhow::{Context, Result};
use ntkfed::data::{self, Dataset, PartitionSpec, SyntheticSpec};
use ntkfed::fed::FedData;
use ntkfed::model::{ModelConfig, ModelWeights};
use ntkfed::rng::{self, derive_seed};
use ntkfed::labels;
use rand::seq::{index, SliceRandom};

use crate::config::ExperimentConfig;

pub struct Experiment {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: PartitionSpec,
    pub data: FedData,
    pub model: ModelConfig,
}

impl Experiment {
    pub fn initial_weights(&self, cfg: &ExperimentConfig) -> ModelWeights {
        self.model.init_weights(derive_seed(cfg.seed, labels!["model", "init"]))
    }

    /// Model on projected inputs and its initial weights.
    pub fn cp_model(&self, cfg: &ExperimentConfig) -> Result<(ModelConfig, ModelWeights)> {
        cfg.cp.validate(self.model.input_dim)?;
        let m = self.model.with_input_dim(cfg.cp.d1_proj)?;
        let w = m.init_weights(derive_seed(cfg.seed, labels!["cp", "model", "init"]));
        Ok((m, w))
    }
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    if let Some(s) = &cfg.dataset.synthetic {
        let spec = SyntheticSpec {
            samples: s.train + s.test,
            dim: s.dim,
            classes: s.classes,
            separation: s.separation,
            noise: s.noise,
        };
        let all = spec.generate(derive_seed(cfg.seed, labels!["data"]))?;
        return Ok(all.split_at(s.train));
    }
    let p = cfg.dataset.idx.as_ref().expect("validated: one source");
    let mut train = data::load_idx(&p.train_images, &p.train_labels)
        .context("loading training set")?;
    let mut test = data::load_idx(&p.test_images, &p.test_labels).context("loading test set")?;
    test.classes = test.classes.max(train.classes);
    train.classes = test.classes;
    if p.pool2x2 {
        let side = (train.dim() as f64).sqrt().round() as usize;
        train = data::pool2x2(&train, side)?;
        test = data::pool2x2(&test, side)?;
    }
    Ok((train, test))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Experiment> {
    let (mut train, test) = load_datasets(cfg)?;
    let validation = if cfg.rounds.validation_samples > 0 {
        let keep = train.len().saturating_sub(cfg.rounds.validation_samples);
        let (t, v) = train.split_at(keep);
        train = t;
        Some(v)
    } else {
        None
    };
    if let Some(per) = cfg.partition.samples_per_client {
        let want = per * cfg.partition.clients;
        anyhow::ensure!(
            want <= train.len(),
            "partition asks for {want} samples but the training set has {}",
            train.len()
        );
        let mut r = rng::stream_for(cfg.seed, labels!["subset"]);
        let mut idx = index::sample(&mut r, train.len(), want).into_vec();
        idx.sort_unstable();
        train = train.subset(&idx);
    }
    let partition = match cfg.partition.alpha {
        Some(alpha) => data::dirichlet_partition(
            &train,
            cfg.partition.clients,
            alpha,
            derive_seed(cfg.seed, labels!["partition"]),
        )?,
        None => {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng::stream_for(cfg.seed, labels!["partition"]));
            let chunks = PartitionSpec::contiguous(train.len(), cfg.partition.clients);
            let clients = chunks
                .clients
                .iter()
                .map(|c| {
                    let mut v: Vec<usize> = c.iter().map(|&i| order[i]).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            PartitionSpec { clients }
        }
    };
    let mut data = FedData::from_partition(&train, &partition, Some(test.clone()));
    data.validation = validation.map(|v| v.to_batch());
    let model = ModelConfig::experiment(train.dim(), cfg.model.hidden, train.classes)?;
    Ok(Experiment {
        train,
        test,
        partition,
        data,
        model,
    })
}
