//! Experiment files: a federation config plus where the data comes from.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fedptr_core::data::{dirichlet_partition, load_csv_dataset, ClientPartition, Dataset, Mixture};
use fedptr_core::federation::FedConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Gaussian class mixture generated per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fixed mixture seed; when absent the run seed is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            dim: 20,
            separation: 2.0,
            train_per_class: 200,
            test_per_class: 100,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub alpha: f64,
    /// Must agree with `federation.n_clients` when both are given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_clients: Option<usize>,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            alpha: 0.01,
            n_clients: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentFile {
    pub dataset: DatasetSource,
    pub partition: PartitionSpec,
    pub federation: FedConfig,
    pub output_dir: PathBuf,
    /// Used only when `seeds` is empty: runs seeds `federation.seed ..+ repeats`.
    pub repeats: usize,
    pub seeds: Vec<u64>,
    /// Directory relative CSV paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentFile {
    fn default() -> Self {
        ExperimentFile {
            dataset: DatasetSource::default(),
            partition: PartitionSpec::default(),
            federation: FedConfig::default(),
            output_dir: PathBuf::from("runs"),
            repeats: 1,
            seeds: Vec::new(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut file = Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        file.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(file)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ExperimentFile = serde_json::from_str(text).context("bad config")?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate().context("bad config: federation")?;
        ensure!(
            self.partition.alpha > 0.0 && self.partition.alpha.is_finite(),
            "bad config: partition.alpha must be positive, got {}",
            self.partition.alpha
        );
        if let Some(n) = self.partition.n_clients {
            ensure!(
                n == self.federation.n_clients,
                "bad config: partition.n_clients ({n}) disagrees with federation.n_clients ({})",
                self.federation.n_clients
            );
        }
        ensure!(
            self.repeats >= 1 || !self.seeds.is_empty(),
            "bad config: repeats must be at least 1"
        );
        if let DatasetSource::Synthetic(s) = &self.dataset {
            ensure!(s.classes >= 2, "bad config: dataset.synthetic.classes must be at least 2");
            ensure!(s.dim >= 1, "bad config: dataset.synthetic.dim must be at least 1");
            ensure!(
                s.train_per_class >= 1 && s.test_per_class >= 1,
                "bad config: dataset.synthetic needs at least one sample per class"
            );
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repeats as u64).map(|r| self.federation.seed + r).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// The federation config for one seed.
    pub fn fed_config(&self, seed: u64) -> FedConfig {
        FedConfig {
            seed,
            ..self.federation.clone()
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_data(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                let ms = s.seed.unwrap_or(seed);
                let mix = Mixture::new(s.classes, s.dim, s.separation, ms)?;
                Ok((mix.sample(s.train_per_class, ms)?, mix.sample(s.test_per_class, ms + 1000)?))
            }
            DatasetSource::Csv(c) => {
                let train = load_csv_dataset(self.resolve(&c.train))?;
                let test = load_csv_dataset(self.resolve(&c.test))?;
                if train.dim() != test.dim() {
                    bail!("train has {} features but test has {}", train.dim(), test.dim());
                }
                let classes = train.num_classes().max(test.num_classes());
                Ok((with_classes(train, classes)?, with_classes(test, classes)?))
            }
        }
    }

    pub fn prepare(&self, seed: u64) -> Result<Prepared> {
        let (train, test) = self.load_data(seed)?;
        let partition = dirichlet_partition(&train, self.federation.n_clients, self.partition.alpha, seed)?;
        for w in partition.warnings() {
            log::warn!("{w:?}");
        }
        let dataset_sha256 = dataset_hash(&train, &test);
        Ok(Prepared {
            train,
            test,
            partition,
            dataset_sha256,
        })
    }
}

fn with_classes(d: Dataset, classes: usize) -> Result<Dataset> {
    if d.num_classes() == classes {
        return Ok(d);
    }
    Ok(Dataset::new(d.features().to_vec(), d.labels().to_vec(), d.dim(), classes)?)
}

pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: ClientPartition,
    pub dataset_sha256: String,
}

/// SHA-256 over shape, features and labels of both splits.
pub fn dataset_hash(train: &Dataset, test: &Dataset) -> String {
    let mut h = Sha256::new();
    for d in [train, test] {
        for n in [d.len(), d.dim(), d.num_classes()] {
            h.update((n as u64).to_le_bytes());
        }
        for x in d.features() {
            h.update(x.to_le_bytes());
        }
        for &y in d.labels() {
            h.update((y as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Copies of `base` with the dotted JSON field `path` set to each value.
pub fn expand_sweep(base: &ExperimentFile, path: &str, values: &[serde_json::Value]) -> Result<Vec<ExperimentFile>> {
    let root = serde_json::to_value(base)?;
    values
        .iter()
        .map(|v| {
            let mut doc = root.clone();
            let slot = path
                .split('.')
                .try_fold(&mut doc, |node, key| node.get_mut(key))
                .with_context(|| format!("no field {path}"))?;
            *slot = v.clone();
            let mut file: ExperimentFile =
                serde_json::from_value(doc).with_context(|| format!("{path} = {v}"))?;
            file.base_dir = base.base_dir.clone();
            file.validate()?;
            Ok(file)
        })
        .collect()
}
