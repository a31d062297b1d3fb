//! Self-describing JSON checkpoint container.
//!
//! Tensors are stored by module path (`backbone.layers.0.weight`,
//! `classifier.bias`, `graph.knowledge.vertices`, ...) together with run
//! metadata. Floats use shortest round-trip formatting, so a save/load
//! cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Classifier, Linear, Parameterized};
use crate::error::{Error, Result};
use crate::graph_memory::{EdgeParams, GraphMemory, KnowledgeGraphState};
use crate::model::Model;
use crate::tensor::Matrix;

pub const FORMAT: &str = "lreid-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Domain step `t` the checkpoint was taken after.
    pub step: usize,
    /// Classifier width `C`.
    pub classes: usize,
    /// Embedding width `d`.
    pub dim: usize,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl TensorRecord {
    fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: [m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    fn to_matrix(&self, name: &str) -> Result<Matrix> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::Serde(format!("tensor {name}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: usize, seed: u64, method: &str) -> Self {
        let mut tensors = BTreeMap::new();
        let mut add = |named: Vec<(String, &Matrix)>| {
            for (name, m) in named {
                tensors.insert(name, TensorRecord::from_matrix(m));
            }
        };
        add(model.backbone.named_params());
        add(model.classifier.named_params());
        if let Some(g) = &model.graph {
            add(g.named_params());
        }
        Self {
            format: FORMAT.into(),
            version: VERSION,
            meta: CheckpointMeta {
                step,
                classes: model.classifier.classes(),
                dim: model.backbone.embedding_dim(),
                seed,
                backbone: model.backbone.config().clone(),
                method: method.into(),
            },
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Result<Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Serde(format!("checkpoint is missing tensor {name}")))?
            .to_matrix(name)
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let config = self.meta.backbone.clone();
        let mut layers = Vec::new();
        for i in 0..=config.hidden.len() {
            layers.push(Linear {
                weight: self.tensor(&format!("backbone.layers.{i}.weight"))?,
                bias: self.tensor(&format!("backbone.layers.{i}.bias"))?,
            });
        }
        let backbone = Backbone::from_layers(config, layers)?;
        let classifier = Classifier::from_parts(self.tensor("classifier.weight")?, self.tensor("classifier.bias")?)?;
        if classifier.classes() != self.meta.classes || classifier.embedding_dim() != self.meta.dim {
            return Err(Error::Serde("classifier shape disagrees with metadata".into()));
        }
        let graph = if self.tensors.contains_key("graph.knowledge.vertices") {
            Some(GraphMemory {
                similarity_edge: EdgeParams {
                    weight: self.tensor("graph.similarity.weight")?,
                    bias: self.tensor("graph.similarity.bias")?,
                },
                knowledge: KnowledgeGraphState {
                    vertices: self.tensor("graph.knowledge.vertices")?,
                    edge: EdgeParams {
                        weight: self.tensor("graph.knowledge.weight")?,
                        bias: self.tensor("graph.knowledge.bias")?,
                    },
                    gcn_weight: self.tensor("graph.gcn.weight")?,
                },
            })
        } else {
            None
        };
        Ok(Model {
            backbone,
            classifier,
            graph,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

/// Conventional file name of the checkpoint after domain step `t`.
pub fn step_file_name(step: usize) -> String {
    format!("step_{step}.ckpt")
}
