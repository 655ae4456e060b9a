//! Experiment configuration and dataset resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssnas_core::data::{
    ingest_cifar10_binary, load_directory_dataset, plan_for_rho, subsample_to_plan, synth_dataset, Dataset,
    LongTailPlan, SynthSpec,
};
use ssnas_core::finetune::{adapt_dataset, FinetuneConfig};
use ssnas_core::nn::SupernetConfig;
use ssnas_core::search::SearchConfig;
use ssnas_core::seed::derive_seed;
use ssnas_core::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Where images come from. `source` is `synthetic`, `cifar10:<dir>` (the
/// binary batches) or `directory:<dir>` (with `train/` and `test/`
/// subdirectories, each holding `labels.csv` and PNG files).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: String,
    /// Imbalance factor applied to the training split; 1 keeps it as is.
    pub rho: f64,
    /// Synthetic sources only.
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: "synthetic".into(),
            rho: 10.0,
            classes: 10,
            per_class: 104,
            test_per_class: 30,
        }
    }
}

impl DatasetConfig {
    fn transfer_default() -> Self {
        DatasetConfig {
            rho: 4.0,
            classes: 2,
            per_class: 60,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Every component seed is derived from this one.
    pub seed: u64,
    pub dataset: DatasetConfig,
    /// Omitted entirely, this is a 2-class ρ=4 synthetic set. Fields left
    /// out of a partial block fall back to the `dataset` defaults instead.
    pub transfer_dataset: DatasetConfig,
    pub network: SupernetConfig,
    pub search: SearchConfig,
    pub finetune: FinetuneConfig,
    /// Search checkpoint interval in epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
    /// Seeds per loss mode in the ablation.
    pub ablation_runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            dataset: DatasetConfig::default(),
            transfer_dataset: DatasetConfig::transfer_default(),
            network: SupernetConfig::desk(),
            search: SearchConfig::desk(),
            finetune: FinetuneConfig::desk(),
            checkpoint_every: 5,
            ablation_runs: 5,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file; any problem with it is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parameter(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parameter(format!("config {}: {e}", path.display())))?;
        Ok(config)
    }

    /// Applies the top-level seed to every component and validates.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Parameter(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        self.search.seed = derive_seed(self.seed, "search", &[]);
        self.finetune.seed = derive_seed(self.seed, "finetune", &[]);
        self.network.validate()?;
        self.search.validate()?;
        self.finetune.validate()?;
        Ok(self)
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub plan: Option<LongTailPlan>,
}

fn split_source(source: &str) -> Result<(&str, Option<PathBuf>)> {
    match source.split_once(':') {
        None if source == "synthetic" => Ok(("synthetic", None)),
        Some((kind @ ("cifar10" | "directory"), path)) if !path.is_empty() => Ok((kind, Some(PathBuf::from(path)))),
        _ => Err(Error::Parameter(format!(
            "unknown dataset source {source:?} (expected synthetic, cifar10:<dir> or directory:<dir>)"
        ))),
    }
}

/// Train and test splits in the network's input format, with the training
/// split reduced to imbalance `rho`. `role` keeps the search/fine-tune
/// data apart from the transfer data.
pub fn load_splits(data: &DatasetConfig, network: &SupernetConfig, seed: u64, role: &str) -> Result<Splits> {
    let (kind, path) = split_source(&data.source)?;
    let (full, test) = match (kind, path) {
        ("synthetic", _) => {
            let spec = |counts, component: &str| SynthSpec {
                counts,
                side: network.input_side,
                channels: network.input_channels,
                seed: derive_seed(seed, &format!("{role}/{component}"), &[]),
            };
            if data.classes < 2 || data.per_class == 0 || data.test_per_class == 0 {
                return Err(Error::Parameter("synthetic data needs >= 2 classes and nonzero sizes".into()));
            }
            let train = synth_dataset(&spec(vec![data.per_class; data.classes], "train"));
            let test = synth_dataset(&spec(vec![data.test_per_class; data.classes], "test"));
            (train, test)
        }
        ("cifar10", Some(dir)) => {
            let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (ingest_cifar10_binary(&train)?, ingest_cifar10_binary(&[dir.join("test_batch.bin")])?)
        }
        (_, Some(dir)) => (load_directory_dataset(dir.join("train"))?, load_directory_dataset(dir.join("test"))?),
        _ => unreachable!("split_source validated the kind"),
    };
    let (train, plan) = if data.rho > 1.0 {
        let plan = plan_for_rho(&full.class_counts(), data.rho)?;
        let train = subsample_to_plan(&full, &plan, derive_seed(seed, &format!("{role}/long_tail"), &[]))?;
        (train, Some(plan))
    } else if data.rho == 1.0 {
        (full, None)
    } else {
        return Err(Error::Parameter(format!("rho must be >= 1, got {}", data.rho)));
    };
    Ok(Splits {
        train: adapt_dataset(network, &train)?,
        test: adapt_dataset(network, &test)?,
        plan,
    })
}
