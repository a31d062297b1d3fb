//! Experiment configuration in TOML.
//!
//! ```toml
//! method = "aka"
//! seed = 0
//! out_dir = "runs/aka"
//!
//! [stream]
//! source = "synthetic"
//! train_domains = 5
//! unseen_domains = 2
//!
//! [train]
//! epochs = 10
//!
//! [loss]
//! lambda_s = 10.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{build_stream, ingest_directory, synthetic_stream, DomainStream, Layout, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::trainer::{Method, TrainConfig};

/// Where the domain stream comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamSpec {
    Synthetic {
        #[serde(default = "default_train_domains")]
        train_domains: usize,
        #[serde(default = "default_unseen_domains")]
        unseen_domains: usize,
        /// Permutation of `0..train_domains`; identity when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        order: Option<Vec<usize>>,
        #[serde(default)]
        synthetic: SyntheticSpec,
    },
    Directories {
        layout: Layout,
        domains: Vec<PathBuf>,
        #[serde(default)]
        unseen: Vec<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        order: Option<Vec<usize>>,
    },
}

fn default_train_domains() -> usize {
    5
}

fn default_unseen_domains() -> usize {
    2
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec::Synthetic {
            train_domains: default_train_domains(),
            unseen_domains: default_unseen_domains(),
            order: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl StreamSpec {
    pub fn order(&self) -> Option<&[usize]> {
        match self {
            StreamSpec::Synthetic { order, .. } | StreamSpec::Directories { order, .. } => order.as_deref(),
        }
    }

    pub fn set_order(&mut self, new_order: Option<Vec<usize>>) {
        match self {
            StreamSpec::Synthetic { order, .. } | StreamSpec::Directories { order, .. } => *order = new_order,
        }
    }

    fn num_domains(&self) -> usize {
        match self {
            StreamSpec::Synthetic { train_domains, .. } => *train_domains,
            StreamSpec::Directories { domains, .. } => domains.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub stream: StreamSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossWeights,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            seed: 0,
            out_dir: default_out_dir(),
            stream: StreamSpec::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Sets the training seed and, for synthetic streams, the data seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let StreamSpec::Synthetic { synthetic, .. } = &mut self.stream {
            synthetic.seed = seed;
        }
    }

    /// Effective trainer settings with the top-level seed and loss weights.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            weights: self.loss,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let config_err = |e: Error| match e {
            Error::Config(m) | Error::Argument(m) => Error::Config(m),
            other => other,
        };
        self.train_config().validate().map_err(config_err)?;
        let n = self.stream.num_domains();
        if n == 0 {
            return Err(Error::Config("stream needs at least one training domain".into()));
        }
        if let Some(order) = self.stream.order() {
            let mut sorted = order.to_vec();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(Error::Config(format!("order {order:?} is not a permutation of 0..{n}")));
            }
        }
        if let StreamSpec::Synthetic { synthetic, .. } = &self.stream {
            synthetic.validate().map_err(config_err)?;
            if synthetic.train_identities < self.train.identities_per_batch {
                return Err(Error::Config(format!(
                    "each domain has {} training identities but batches need P = {}",
                    synthetic.train_identities, self.train.identities_per_batch
                )));
            }
        }
        Ok(())
    }

    /// Materializes the stream; directory sources are read but never modified.
    pub fn build_stream(&self) -> Result<(DomainStream, Vec<String>)> {
        match &self.stream {
            StreamSpec::Synthetic {
                train_domains,
                unseen_domains,
                order,
                synthetic,
            } => Ok((synthetic_stream(synthetic, *train_domains, *unseen_domains, order.as_deref())?, Vec::new())),
            StreamSpec::Directories {
                layout,
                domains,
                unseen,
                order,
            } => {
                let mut warnings = Vec::new();
                let mut load = |paths: &[PathBuf]| -> Result<Vec<_>> {
                    paths
                        .iter()
                        .map(|p| {
                            let ingested = ingest_directory(p, *layout)?;
                            warnings.extend(ingested.warnings);
                            Ok(ingested.dataset)
                        })
                        .collect()
                };
                let train = load(domains)?;
                let held = load(unseen)?;
                for d in &train {
                    if d.num_train_identities() < self.train.identities_per_batch {
                        return Err(Error::Config(format!(
                            "domain {} has {} training identities but batches need P = {}",
                            d.name,
                            d.num_train_identities(),
                            self.train.identities_per_batch
                        )));
                    }
                }
                let default_order: Vec<usize> = (0..train.len()).collect();
                let order = order.as_deref().unwrap_or(&default_order);
                let label = order.iter().map(|&i| train[i].name.clone()).collect::<Vec<_>>().join(">");
                Ok((build_stream(train, order, held, label)?, warnings))
            }
        }
    }
}
