//! Feature extractor and class-incremental classifier.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, randn, Matrix};

/// Standard deviation for freshly appended classifier columns.
pub const NEW_CLASS_STD: f64 = 0.01;

/// Parameter containers that can be optimized and checkpointed.
pub trait Parameterized {
    /// Parameters with stable names, in optimizer order.
    fn named_params(&self) -> Vec<(String, &Matrix)>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;
}

/// Affine map `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: randn(input, output, std, rng),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Matrix {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    pub fn backward(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> (Matrix, Matrix, Matrix) {
        let d_weight = x.t().dot(&grad_out);
        let d_bias = grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_input = grad_out.dot(&self.weight.t());
        (d_weight, d_bias, d_input)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Embedding width `d`.
    pub embedding_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![128],
            embedding_dim: 64,
        }
    }
}

/// Multilayer perceptron `h(x; theta)`: ReLU hidden layers and a linear
/// output layer producing `d`-dimensional embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<Linear>,
}

/// Activations retained from a training forward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Input of each layer; `inputs[0]` is the raw batch.
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Matrix>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        if config.input_dim == 0 || config.embedding_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::Config(format!("backbone dimensions must be positive: {config:?}")));
        }
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.embedding_dim);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { 1.0 } else { 2.0 };
                Linear::new(w[0], w[1], (gain / w[0] as f64).sqrt(), rng)
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Rebuilds a backbone from stored layers, checking them against `config`.
    pub fn from_layers(config: BackboneConfig, layers: Vec<Linear>) -> Result<Self> {
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.embedding_dim);
        let ok = layers.len() + 1 == widths.len()
            && layers.iter().zip(widths.windows(2)).all(|(l, w)| {
                l.weight.dim() == (w[0], w[1]) && l.bias.dim() == (1, w[1])
            });
        if !ok {
            return Err(Error::Config(format!("layer shapes do not match backbone config {config:?}")));
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    fn check_input(&self, inputs: ArrayView2<f64>) -> Result<()> {
        if inputs.nrows() == 0 {
            return Err(Error::Argument("empty input batch".into()));
        }
        if inputs.ncols() != self.config.input_dim {
            return Err(Error::Config(format!(
                "input width {} does not match backbone input dimension {}",
                inputs.ncols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Evaluation-mode feature extraction.
    pub fn extract_features(&self, inputs: ArrayView2<f64>) -> Result<Matrix> {
        Ok(self.forward_train(inputs)?.0)
    }

    pub fn forward_train(&self, inputs: ArrayView2<f64>) -> Result<(Matrix, BackboneCache)> {
        self.check_input(inputs)?;
        ensure_finite(inputs, "backbone inputs")?;
        let mut cache = BackboneCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len() - 1),
        };
        let mut x = inputs.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(x.view());
            cache.inputs.push(x);
            if i == last {
                x = z;
            } else {
                x = z.mapv(|v| v.max(0.0));
                cache.pre_activations.push(z);
            }
        }
        ensure_finite(x.view(), "backbone features")?;
        Ok((x, cache))
    }

    /// Gradients for every parameter, in [`Parameterized::params_mut`] order.
    pub fn backward(&self, cache: &BackboneCache, grad_features: ArrayView2<f64>) -> Vec<Matrix> {
        let mut grads = vec![Matrix::zeros((0, 0)); 2 * self.layers.len()];
        let mut upstream = grad_features.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                ndarray::Zip::from(&mut upstream)
                    .and(&cache.pre_activations[i])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let (dw, db, dx) = self.layers[i].backward(cache.inputs[i].view(), upstream.view());
            grads[2 * i] = dw;
            grads[2 * i + 1] = db;
            upstream = dx;
        }
        grads
    }
}

impl Parameterized for Backbone {
    fn named_params(&self) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("backbone.layers.{i}.weight"), &l.weight),
                    (format!("backbone.layers.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Linear head `g(.; phi)` whose width grows as domains arrive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    head: Linear,
}

impl Classifier {
    /// Head with zero classes; grow it before the first domain.
    pub fn empty(embedding_dim: usize) -> Self {
        Self {
            head: Linear {
                weight: Array2::zeros((embedding_dim, 0)),
                bias: Array2::zeros((1, 0)),
            },
        }
    }

    pub fn from_parts(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.nrows() != 1 || bias.ncols() != weight.ncols() {
            return Err(Error::Config(format!(
                "classifier bias shape {:?} incompatible with weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self {
            head: Linear { weight, bias },
        })
    }

    pub fn classes(&self) -> usize {
        self.head.weight.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.weight.nrows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.head.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.head.bias
    }

    pub fn classify(&self, features: ArrayView2<f64>) -> Result<Matrix> {
        if features.ncols() != self.embedding_dim() {
            return Err(Error::Config(format!(
                "feature width {} does not match classifier input {}",
                features.ncols(),
                self.embedding_dim()
            )));
        }
        if self.classes() == 0 {
            return Err(Error::Config("classifier has no classes".into()));
        }
        let logits = self.head.forward(features);
        ensure_finite(logits.view(), "logits")?;
        Ok(logits)
    }

    /// Returns `(param grads, d_features)`.
    pub fn backward(&self, features: ArrayView2<f64>, grad_logits: ArrayView2<f64>) -> (Vec<Matrix>, Matrix) {
        let (dw, db, dx) = self.head.backward(features, grad_logits);
        (vec![dw, db], dx)
    }

    /// Appends `new_classes` columns; existing columns are left untouched.
    pub fn grow<R: Rng + ?Sized>(&mut self, new_classes: usize, rng: &mut R) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::Argument("new_classes must be at least 1".into()));
        }
        let d = self.embedding_dim();
        let fresh = randn(d, new_classes, NEW_CLASS_STD, rng);
        self.head.weight = concatenate![Axis(1), self.head.weight, fresh];
        self.head.bias = concatenate![Axis(1), self.head.bias, Array2::zeros((1, new_classes))];
        Ok(())
    }

    /// Logits restricted to the first `n` classes.
    pub fn old_columns(logits: &Matrix, n: usize) -> ArrayView2<'_, f64> {
        logits.slice(s![.., ..n])
    }
}

impl Parameterized for Classifier {
    fn named_params(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("classifier.weight".into(), &self.head.weight),
            ("classifier.bias".into(), &self.head.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.head.weight, &mut self.head.bias]
    }
}

/// Embeddings `V^S` of a mini-batch together with their global labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Argument(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Frozen copy of the model taken at a domain-step boundary.
///
/// Fields are private so a snapshot can only be read after creation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    backbone: Backbone,
    classifier: Classifier,
    vertices: Option<Matrix>,
    step: usize,
}

impl ModelSnapshot {
    pub fn capture(backbone: &Backbone, classifier: &Classifier, step: usize) -> Self {
        Self {
            backbone: backbone.clone(),
            classifier: classifier.clone(),
            vertices: None,
            step,
        }
    }

    /// Attach the knowledge-graph vertex state `V̂^K`.
    pub fn with_vertices(mut self, vertices: Matrix) -> Self {
        self.vertices = Some(vertices);
        self
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn vertices(&self) -> Option<&Matrix> {
        self.vertices.as_ref()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Old-model logits for a raw input batch.
    pub fn logits(&self, inputs: ArrayView2<f64>) -> Result<Matrix> {
        let features = self.backbone.extract_features(inputs)?;
        self.classifier.classify(features.view())
    }

    pub fn checksum(&self) -> u64 {
        let mut parts: Vec<&Matrix> = self.backbone.named_params().into_iter().map(|(_, m)| m).collect();
        parts.extend(self.classifier.named_params().into_iter().map(|(_, m)| m));
        parts.extend(self.vertices.iter());
        parts
            .iter()
            .fold(0u64, |h, m| h.rotate_left(7) ^ crate::tensor::checksum(m.view()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn small_backbone() -> Backbone {
        Backbone::new(
            BackboneConfig {
                input_dim: 5,
                hidden: vec![7],
                embedding_dim: 8,
            },
            &mut rng(),
        )
        .unwrap()
    }

    #[test]
    fn zero_final_layer_gives_zero_features() {
        let mut b = small_backbone();
        let last = b.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let x = randn(3, 5, 1.0, &mut rng());
        let f = b.extract_features(x.view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_inputs_give_identical_rows() {
        let b = small_backbone();
        let row = randn(1, 5, 1.0, &mut rng());
        let x = concatenate![Axis(0), row, row];
        let f = b.extract_features(x.view()).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn output_shape_and_finiteness() {
        let b = small_backbone();
        let x = randn(4, 5, 1.0, &mut rng());
        let f = b.extract_features(x.view()).unwrap();
        assert_eq!(f.shape(), &[4, 8]);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let b = small_backbone();
        let x = randn(2, 4, 1.0, &mut rng());
        assert!(matches!(b.extract_features(x.view()), Err(Error::Config(_))));
        let empty = Array2::<f64>::zeros((0, 5));
        assert!(matches!(b.extract_features(empty.view()), Err(Error::Argument(_))));
    }

    #[test]
    fn non_finite_features_are_numerical_error() {
        let b = small_backbone();
        let x = array![[f64::NAN, 0.0, 0.0, 0.0, 0.0]];
        assert!(matches!(b.extract_features(x.view()), Err(Error::Numerical(_))));
    }

    #[test]
    fn zero_features_zero_bias_give_zero_logits() {
        let mut c = Classifier::empty(3);
        c.grow(4, &mut rng()).unwrap();
        let logits = c.classify(Array2::zeros((2, 3)).view()).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_class_softmax_is_one() {
        let mut c = Classifier::empty(3);
        c.grow(1, &mut rng()).unwrap();
        let logits = c.classify(randn(5, 3, 1.0, &mut rng()).view()).unwrap();
        assert_eq!(logits.ncols(), 1);
        let p = crate::tensor::softmax_rows(logits.view());
        assert!(p.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn logits_match_manual_product() {
        let c = Classifier::from_parts(array![[1.0, 2.0], [3.0, 4.0]], array![[0.0, 0.0]]).unwrap();
        let x = array![[1.0, -1.0], [0.5, 2.0]];
        let logits = c.classify(x.view()).unwrap();
        assert_eq!(logits, array![[1.0 - 3.0, 2.0 - 4.0], [0.5 + 6.0, 1.0 + 8.0]]);
    }

    #[test]
    fn classify_width_mismatch() {
        let mut c = Classifier::empty(3);
        c.grow(2, &mut rng()).unwrap();
        assert!(matches!(c.classify(Array2::zeros((1, 4)).view()), Err(Error::Config(_))));
    }

    #[test]
    fn grow_from_empty_and_preserve_old_columns() {
        let mut r = rng();
        let mut c = Classifier::empty(4);
        c.grow(500, &mut r).unwrap();
        assert_eq!(c.classes(), 500);
        let before = c.clone();
        c.grow(500, &mut r).unwrap();
        assert_eq!(c.classes(), 1000);
        assert_eq!(c.weight().slice(s![.., ..500]), before.weight().view());
        assert_eq!(c.bias().slice(s![.., ..500]), before.bias().view());
        assert!(c.grow(0, &mut r).is_err());
    }

    #[test]
    fn grown_classifier_preserves_old_logits_exactly() {
        let mut r = rng();
        let mut c = Classifier::empty(6);
        c.grow(3, &mut r).unwrap();
        let x = randn(10, 6, 2.0, &mut r);
        let before = c.classify(x.view()).unwrap();
        c.grow(4, &mut r).unwrap();
        assert_eq!(c.classes(), 7);
        let after = c.classify(x.view()).unwrap();
        assert_eq!(Classifier::old_columns(&after, 3), before.view());
    }

    #[test]
    fn snapshot_is_isolated_from_training() {
        let mut b = small_backbone();
        let mut c = Classifier::empty(8);
        c.grow(3, &mut rng()).unwrap();
        let snap = ModelSnapshot::capture(&b, &c, 1);
        let again = ModelSnapshot::capture(&b, &c, 1);
        assert_eq!(snap, again);
        let sum = snap.checksum();
        for p in b.params_mut() {
            p.mapv_inplace(|v| v + 1.0);
        }
        c.params_mut()[0].fill(3.0);
        assert_eq!(snap.checksum(), sum);
        assert_eq!(snap.classifier().classes(), 3);
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        let b = small_backbone();
        let x = randn(3, 5, 1.0, &mut rng());
        let upstream = randn(3, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(99));
        let objective = |bb: &Backbone| (bb.extract_features(x.view()).unwrap() * &upstream).sum();
        let (_, cache) = b.forward_train(x.view()).unwrap();
        let grads = b.backward(&cache, upstream.view());
        let eps = 1e-6;
        for (pi, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let (r, col) = (idx / g.ncols(), idx % g.ncols());
                let mut plus = b.clone();
                plus.params_mut()[pi][[r, col]] += eps;
                let mut minus = b.clone();
                minus.params_mut()[pi][[r, col]] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                assert!((fd - g[[r, col]]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {pi} [{r},{col}]: {fd} vs {}", g[[r, col]]);
            }
        }
    }
}
