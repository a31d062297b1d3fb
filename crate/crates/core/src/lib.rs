//! Lifelong person re-identification over a stream of disjoint-identity
//! domains, with an accumulated knowledge-graph memory (AKA) and the
//! SFT / LwF / SPD baselines.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph_memory;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, Classifier, FeatureBatch, ModelSnapshot, Parameterized};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, StreamSpec};
pub use data::{DomainDataset, DomainStream, Layout, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use evaluation::{Aggregates, MetricEntry, MetricsReport, RetrievalScores, RetrievalTask, SplitKind};
pub use graph_memory::{GraphMemory, GraphMemoryConfig, JointGraph, KnowledgeGraphState, SimilarityGraph};
pub use losses::LossWeights;
pub use model::{EvalEmbedding, Model};
pub use tensor::Matrix;
pub use trainer::{make_baseline, run_stream, LossRecord, Method, TrainConfig, Trainer};
