//! The trainable model `Theta = {theta, phi, psi}` and its retrieval embedding.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Classifier};
use crate::error::Result;
use crate::evaluation::Embedder;
use crate::graph_memory::GraphMemory;
use crate::tensor::Matrix;

/// Representation used for retrieval at test time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalEmbedding {
    /// Backbone features `V^S`.
    #[default]
    Backbone,
    /// Memory-enhanced `F`, computed over consecutive chunks of the split.
    Enhanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub classifier: Classifier,
    pub graph: Option<GraphMemory>,
}

/// Frozen view of a model configured for retrieval.
pub struct RetrievalModel<'a> {
    pub model: &'a Model,
    pub embedding: EvalEmbedding,
    pub chunk: usize,
}

impl Embedder for RetrievalModel<'_> {
    fn embed(&self, inputs: ArrayView2<f64>) -> Result<Matrix> {
        let features = self.model.backbone.extract_features(inputs)?;
        match (self.embedding, &self.model.graph) {
            (EvalEmbedding::Enhanced, Some(graph)) => graph.enhance_in_chunks(features.view(), self.chunk),
            _ => Ok(features),
        }
    }
}
