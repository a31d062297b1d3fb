//! Sequential domain-incremental training.
//!
//! Gradient routing: the base objective (cross-entropy plus distillation)
//! updates the backbone and classifier; the plasticity and stability terms
//! update only the graph memory, which receives detached backbone features.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Classifier, ModelSnapshot, Parameterized};
use crate::data::{DomainStream, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_task, MetricEntry, MetricsReport, SplitKind};
use crate::graph_memory::{GraphMemory, GraphMemoryConfig};
use crate::losses::{self, LossWeights};
use crate::model::{EvalEmbedding, Model, RetrievalModel};
use crate::optim::{Adam, AdamConfig, StepSchedule};
use crate::tensor::{gather_rows, Matrix};

/// Name of the unseen pool in metrics.
pub const UNSEEN_DOMAIN: &str = "unseen";

/// Method variants compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Sequential fine-tuning: cross-entropy only.
    Sft,
    /// Cross-entropy plus logit distillation.
    Lwf,
    /// Cross-entropy plus similarity-preserving feature distillation.
    Spd,
    /// LwF objective plus the knowledge-graph memory.
    Aka,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sft, Method::Lwf, Method::Spd, Method::Aka];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Lwf => "lwf",
            Method::Spd => "spd",
            Method::Aka => "aka",
        }
    }

    fn uses_logit_distillation(&self) -> bool {
        matches!(self, Method::Lwf | Method::Aka)
    }

    fn uses_graph(&self) -> bool {
        matches!(self, Method::Aka)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sft" => Ok(Method::Sft),
            "lwf" => Ok(Method::Lwf),
            "spd" => Ok(Method::Spd),
            "aka" => Ok(Method::Aka),
            other => Err(Error::Argument(format!("unknown method `{other}` (expected sft, lwf, spd or aka)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Fractions of `epochs` at which the rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<f64>,
    pub lr_factor: f64,
    /// Identities per batch `P`.
    pub identities_per_batch: usize,
    /// Samples per identity `K`.
    pub samples_per_identity: usize,
    /// Defaults to `ceil(train samples / (P K))` when unset.
    pub iterations_per_epoch: Option<usize>,
    #[serde(skip)]
    pub seed: u64,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    /// Knowledge-graph vertex count `N^K`.
    pub num_vertices: usize,
    #[serde(skip)]
    pub weights: LossWeights,
    pub spd_weight: f64,
    /// Skip the graph memory entirely (ablation).
    pub graph_bypass: bool,
    pub eval_embedding: EvalEmbedding,
    pub diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3.5e-4,
            lr_milestones: vec![0.5, 0.7],
            lr_factor: 0.1,
            identities_per_batch: 8,
            samples_per_identity: 4,
            iterations_per_epoch: None,
            seed: 0,
            embedding_dim: 64,
            hidden: vec![128],
            num_vertices: 16,
            weights: LossWeights::default(),
            spd_weight: 100.0,
            graph_bypass: false,
            eval_embedding: EvalEmbedding::Backbone,
            diagnostics: false,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.samples_per_identity
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.identities_per_batch < 2 || self.samples_per_identity < 2 {
            return bad("batches need P >= 2 identities and K >= 2 samples each".into());
        }
        if self.embedding_dim == 0 || self.num_vertices == 0 || self.hidden.contains(&0) {
            return bad("embedding_dim, num_vertices and hidden widths must be positive".into());
        }
        if self.iterations_per_epoch == Some(0) {
            return bad("iterations_per_epoch must be positive".into());
        }
        if !(self.spd_weight.is_finite() && self.spd_weight >= 0.0) {
            return bad("spd_weight must be finite and >= 0".into());
        }
        self.weights.validate()
    }

    fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.lr,
            factor: self.lr_factor,
            milestones: self.lr_milestones.clone(),
        }
    }
}

/// Random-stream ids; each purpose draws from its own ChaCha stream so that
/// enabling one component never perturbs another.
mod streams {
    pub const BACKBONE_INIT: u64 = 1;
    pub const GRAPH_INIT: u64 = 2;
    pub const CLASSIFIER_GROWTH: u64 = 100;
    pub const SAMPLER: u64 = 10_000;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A P x K batch drawn from one training split.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub rows: Vec<usize>,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// Picks `p` distinct identities and `k` samples of each; identities with
/// fewer than `k` samples are drawn with replacement.
pub fn sample_batch<R: Rng + ?Sized>(split: &Split, p: usize, k: usize, rng: &mut R) -> Result<SampledBatch> {
    let groups: Vec<Vec<usize>> = split.by_identity().into_values().collect();
    if groups.len() < p {
        return Err(Error::Argument(format!(
            "batch needs {p} identities but the split has {}",
            groups.len()
        )));
    }
    let mut rows = Vec::with_capacity(p * k);
    for gi in sample_indices(rng, groups.len(), p).into_iter() {
        let members = &groups[gi];
        if members.len() >= k {
            rows.extend(sample_indices(rng, members.len(), k).into_iter().map(|i| members[i]));
        } else {
            rows.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(SampledBatch {
        inputs: gather_rows(split.inputs.view(), &rows),
        labels: rows.iter().map(|&r| split.labels[r]).collect(),
        rows,
    })
}

/// Loss components of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Global iteration counter, starting at 1.
    pub iteration: usize,
    /// Domain step `t`, starting at 1.
    pub domain_step: usize,
    /// Global epoch counter, starting at 1.
    pub epoch: usize,
    pub ce: f64,
    pub kd: f64,
    pub spd: f64,
    pub plasticity: f64,
    pub stability: f64,
    pub total: f64,
}

pub const LOSS_HEADER: &str = "step,epoch,L_c,L_d,L_p,L_s,L_total";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.epoch, self.ce, self.kd, self.plasticity, self.stability, self.total
        )
    }
}

/// Which objective terms contribute gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientTerms {
    pub base: bool,
    pub memory: bool,
}

impl GradientTerms {
    pub const ALL: Self = Self { base: true, memory: true };
    pub const BASE_ONLY: Self = Self { base: true, memory: false };
    pub const MEMORY_ONLY: Self = Self { base: false, memory: true };
}

/// Gradients of one iteration, grouped by parameter owner.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub backbone: Vec<Matrix>,
    pub classifier: Vec<Matrix>,
    pub graph: Option<Vec<Matrix>>,
    pub losses: LossRecord,
    /// Last memory forward pass, kept for diagnostics.
    pub diagnostics: Option<(Matrix, Matrix)>,
}

/// Cross-graph weights and `V^S`/`V̄^S` cosine matrix from one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticDump {
    pub domain_step: usize,
    pub epoch: usize,
    pub cross: Matrix,
    pub cosine: Matrix,
}

/// Summary of one trained domain.
#[derive(Debug, Clone)]
pub struct DomainOutcome {
    pub losses: Vec<LossRecord>,
    pub diagnostics: Vec<DiagnosticDump>,
}

/// Model, optimizer bookkeeping and the previous-step snapshot.
#[derive(Debug, Clone)]
pub struct Trainer {
    method: Method,
    config: TrainConfig,
    model: Model,
    snapshot: Option<ModelSnapshot>,
    completed_steps: usize,
    old_classes: usize,
    iteration: usize,
}

/// Builds a trainer for one of the compared methods.
pub fn make_baseline(variant: &str, config: TrainConfig, input_dim: usize) -> Result<Trainer> {
    Trainer::new(variant.parse()?, config, input_dim)
}

impl Trainer {
    pub fn new(method: Method, config: TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let backbone_config = BackboneConfig {
            input_dim,
            hidden: config.hidden.clone(),
            embedding_dim: config.embedding_dim,
        };
        let backbone = Backbone::new(backbone_config, &mut rng_for(config.seed, streams::BACKBONE_INIT))?;
        let graph = if method.uses_graph() {
            Some(GraphMemory::new(
                GraphMemoryConfig::new(config.num_vertices, config.embedding_dim),
                &mut rng_for(config.seed, streams::GRAPH_INIT),
            )?)
        } else {
            None
        };
        Ok(Self {
            method,
            model: Model {
                backbone,
                classifier: Classifier::empty(config.embedding_dim),
                graph,
            },
            config,
            snapshot: None,
            completed_steps: 0,
            old_classes: 0,
            iteration: 0,
        })
    }

    /// Trainer positioned after domain step `step`, e.g. from a checkpoint.
    pub fn restore(method: Method, config: TrainConfig, model: Model, step: usize) -> Result<Self> {
        config.validate()?;
        if method.uses_graph() && model.graph.is_none() {
            return Err(Error::Config("checkpoint has no graph memory for method aka".into()));
        }
        let mut snapshot = ModelSnapshot::capture(&model.backbone, &model.classifier, step);
        if let Some(g) = &model.graph {
            snapshot = snapshot.with_vertices(g.knowledge.snapshot_vertices());
        }
        Ok(Self {
            method,
            old_classes: model.classifier.classes(),
            model,
            config,
            snapshot: (step > 0).then_some(snapshot),
            completed_steps: step,
            iteration: 0,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn snapshot(&self) -> Option<&ModelSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn completed_steps(&self) -> usize {
        self.completed_steps
    }

    /// Global iteration counter; restored runs set it from their loss log.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn set_iteration(&mut self, iteration: usize) {
        self.iteration = iteration;
    }

    fn graph_active(&self) -> bool {
        self.model.graph.is_some() && !self.config.graph_bypass
    }

    /// Appends the head for a new domain and records the old-class count.
    pub fn begin_domain(&mut self, step: usize, new_classes: usize) -> Result<()> {
        if step != self.completed_steps + 1 {
            return Err(Error::Protocol(format!(
                "domain step {step} requested after {} completed steps",
                self.completed_steps
            )));
        }
        if step > 1 && self.snapshot.is_none() {
            return Err(Error::Protocol(format!("no snapshot available for domain step {step}")));
        }
        self.old_classes = self.model.classifier.classes();
        self.model
            .classifier
            .grow(new_classes, &mut rng_for(self.config.seed, streams::CLASSIFIER_GROWTH + step as u64))
    }

    /// Loss values and routed gradients for one batch.
    pub fn compute_gradients(
        &self,
        inputs: ArrayView2<f64>,
        labels: &[usize],
        terms: GradientTerms,
    ) -> Result<StepGradients> {
        let weights = self.config.weights;
        let model = &self.model;
        let (features, cache) = model.backbone.forward_train(inputs)?;
        let (n, d) = features.dim();
        let logits = model.classifier.classify(features.view())?;
        let ce = losses::cross_entropy(logits.view(), labels)?;
        let mut d_logits = ce.grad.clone();
        let mut d_features = Array2::zeros((n, d));

        let old = self.snapshot.as_ref().filter(|_| self.old_classes > 0);
        let mut kd_value = None;
        if let (true, Some(snap)) = (self.method.uses_logit_distillation(), old) {
            if weights.gamma > 0.0 {
                let old_logits = snap.logits(inputs)?;
                let kd = losses::distillation(logits.view(), old_logits.view(), self.old_classes)?;
                d_logits.scaled_add(weights.gamma, &kd.grad);
                kd_value = Some(kd.value);
            }
        }
        let mut spd_value = 0.0;
        if let (Method::Spd, Some(snap)) = (self.method, old) {
            let old_features = snap.backbone().extract_features(inputs)?;
            let spd = losses::similarity_preserving(features.view(), old_features.view())?;
            d_features.scaled_add(self.config.spd_weight, &spd.grad);
            spd_value = spd.value;
        }
        let (mut classifier_grads, d_from_logits) = model.classifier.backward(features.view(), d_logits.view());
        d_features += &d_from_logits;
        let mut backbone_grads = model.backbone.backward(&cache, d_features.view());
        if !terms.base {
            for g in backbone_grads.iter_mut().chain(classifier_grads.iter_mut()) {
                g.fill(0.0);
            }
        }

        let (mut lp, mut ls) = (0.0, 0.0);
        let mut graph_grads = None;
        let mut diagnostics = None;
        if let (true, Some(graph)) = (self.graph_active(), &model.graph) {
            // Detached copy: nothing computed below reaches the backbone.
            let detached = features.clone();
            let fwd = graph.forward(detached.view())?;
            let aggregated = &fwd.enhanced.aggregated;
            let triplets = losses::mine_triplets(aggregated.view(), labels);
            let plasticity = losses::plasticity_loss(aggregated.view(), &triplets);
            lp = plasticity.value;
            let d_f = plasticity.grad * weights.lambda_p;
            let mut grads = graph.backward(&fwd, d_f.view());
            if let Some(reference) = self.snapshot.as_ref().and_then(ModelSnapshot::vertices) {
                let stability = losses::stability_loss(graph.knowledge.vertices.view(), reference.view())?;
                ls = stability.value;
                grads.vertices.scaled_add(weights.lambda_s, &stability.grad);
            }
            let mut ordered = grads.into_param_order();
            if !terms.memory {
                ordered.iter_mut().for_each(|g| g.fill(0.0));
            }
            graph_grads = Some(ordered);
            if self.config.diagnostics {
                diagnostics = Some((fwd.cross.clone(), fwd.feature_cosine()));
            }
        }

        let mut base = losses::base_loss(ce.value, kd_value, weights.gamma);
        if self.method == Method::Spd {
            base += self.config.spd_weight * spd_value;
        }
        let total = if self.graph_active() {
            losses::total_loss(base, lp, ls, &weights)
        } else {
            base
        };
        Ok(StepGradients {
            backbone: backbone_grads,
            classifier: classifier_grads,
            graph: graph_grads,
            losses: LossRecord {
                iteration: 0,
                domain_step: self.completed_steps + 1,
                epoch: 0,
                ce: ce.value,
                kd: kd_value.unwrap_or(0.0),
                spd: spd_value,
                plasticity: lp,
                stability: ls,
                total,
            },
            diagnostics,
        })
    }

    /// Trains on domain `step` (1-based) and snapshots the model at the end.
    pub fn train_domain(&mut self, step: usize, train: &Split) -> Result<DomainOutcome> {
        let classes = train.identities();
        self.begin_domain(step, classes.len())?;
        let width = self.model.classifier.classes();
        if let Some(&bad) = classes.iter().find(|&&y| y >= width) {
            return Err(Error::Protocol(format!(
                "label {bad} outside the {width} classes known after growth; labels must be assigned in arrival order"
            )));
        }
        let cfg = self.config.clone();
        let iterations = cfg
            .iterations_per_epoch
            .unwrap_or_else(|| train.len().div_ceil(cfg.batch_size()).max(1));
        let schedule = cfg.schedule();
        let mut sampler = rng_for(cfg.seed, streams::SAMPLER + step as u64);
        let mut base_opt = Adam::new(AdamConfig::default());
        let mut graph_opt = Adam::new(AdamConfig::default());
        let mut outcome = DomainOutcome {
            losses: Vec::with_capacity(cfg.epochs * iterations),
            diagnostics: Vec::new(),
        };
        for epoch in 0..cfg.epochs {
            let lr = schedule.lr_at(epoch, cfg.epochs);
            let mut last_diag = None;
            for _ in 0..iterations {
                let batch = sample_batch(train, cfg.identities_per_batch, cfg.samples_per_identity, &mut sampler)?;
                let grads = self.compute_gradients(batch.inputs.view(), &batch.labels, GradientTerms::ALL)?;
                let mut base_params = self.model.backbone.params_mut();
                base_params.extend(self.model.classifier.params_mut());
                let base_grads: Vec<Matrix> = grads.backbone.into_iter().chain(grads.classifier).collect();
                base_opt.step(base_params, &base_grads, lr)?;
                if let (Some(g), Some(graph)) = (grads.graph, self.model.graph.as_mut()) {
                    graph_opt.step(graph.params_mut(), &g, lr)?;
                }
                self.iteration += 1;
                let mut rec = grads.losses;
                rec.iteration = self.iteration;
                rec.epoch = (step - 1) * cfg.epochs + epoch + 1;
                if !rec.total.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss at iteration {}", rec.iteration)));
                }
                outcome.losses.push(rec);
                last_diag = grads.diagnostics;
            }
            if let Some((cross, cosine)) = last_diag {
                outcome.diagnostics.push(DiagnosticDump {
                    domain_step: step,
                    epoch: epoch + 1,
                    cross,
                    cosine,
                });
            }
        }
        let mut snapshot = ModelSnapshot::capture(&self.model.backbone, &self.model.classifier, step);
        if let Some(g) = &self.model.graph {
            snapshot = snapshot.with_vertices(g.knowledge.snapshot_vertices());
        }
        self.snapshot = Some(snapshot);
        self.completed_steps = step;
        Ok(outcome)
    }

    pub fn retrieval_model(&self) -> RetrievalModel<'_> {
        RetrievalModel {
            model: &self.model,
            embedding: self.config.eval_embedding,
            chunk: self.config.batch_size(),
        }
    }

    /// Evaluates every stream domain's test split and the unseen pool.
    pub fn evaluate_stream(&self, stream: &DomainStream, step: usize) -> Result<Vec<MetricEntry>> {
        let embedder = self.retrieval_model();
        let mut tasks: Vec<(String, SplitKind, &Split, &Split)> = stream
            .domains
            .iter()
            .map(|d| (d.name.clone(), SplitKind::Seen, &d.query, &d.gallery))
            .collect();
        if let Some(pool) = &stream.unseen {
            tasks.push((UNSEEN_DOMAIN.to_string(), SplitKind::Unseen, &pool.query, &pool.gallery));
        }
        tasks
            .par_iter()
            .map(|(name, split, query, gallery)| {
                let scores = evaluate_task(query, gallery, &embedder)
                    .map_err(|e| Error::Evaluation(format!("domain {name} at step {step}: {e}")))?;
                Ok(MetricEntry {
                    step,
                    domain: name.clone(),
                    split: *split,
                    map: scores.map,
                    rank1: scores.rank1,
                })
            })
            .collect()
    }
}

/// Callbacks for incremental persistence during a run.
pub trait RunObserver {
    fn on_domain_trained(&mut self, _step: usize, _trainer: &Trainer, _outcome: &DomainOutcome) -> Result<()> {
        Ok(())
    }

    fn on_evaluated(&mut self, _step: usize, _entries: &[MetricEntry]) -> Result<()> {
        Ok(())
    }
}

/// Observer that keeps nothing.
pub struct NoopObserver;

impl RunObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub losses: Vec<LossRecord>,
    /// `train_reads[s][d]`: reads of domain `d`'s training split observed
    /// after step `s + 1` finished.
    pub train_reads: Vec<Vec<usize>>,
    pub trainer: Trainer,
}

/// Trains the stream in order, evaluating after every step. Each domain's
/// training split is released as soon as its step finishes.
pub fn run_stream(stream: DomainStream, trainer: Trainer, observer: &mut dyn RunObserver) -> Result<RunOutcome> {
    let mut stream = stream;
    let mut trainer = trainer;
    let counters: Vec<_> = stream.domains.iter().map(|d| d.train_reads()).collect();
    let start = trainer.completed_steps();
    if start > stream.len() {
        return Err(Error::Protocol(format!(
            "trainer has completed {start} steps but the stream has {} domains",
            stream.len()
        )));
    }
    for d in stream.domains.iter_mut().take(start) {
        d.release_train();
    }
    let mut report = MetricsReport::default();
    let mut all_losses = Vec::new();
    let mut train_reads = Vec::new();
    for t in start + 1..=stream.len() {
        let idx = t - 1;
        let outcome = {
            let train = stream.domains[idx].train()?;
            trainer.train_domain(t, train)?
        };
        stream.domains[idx].release_train();
        observer.on_domain_trained(t, &trainer, &outcome)?;
        all_losses.extend(outcome.losses);
        train_reads.push(counters.iter().map(|c| c.get()).collect());
        let entries = trainer.evaluate_stream(&stream, t)?;
        observer.on_evaluated(t, &entries)?;
        let seen: Vec<f64> = entries.iter().filter(|e| e.split == SplitKind::Seen).map(|e| e.map).collect();
        log::info!(
            "{} step {t}/{}: mean seen mAP {:.4}{}",
            trainer.method(),
            stream.len(),
            seen.iter().sum::<f64>() / seen.len().max(1) as f64,
            entries
                .iter()
                .find(|e| e.split == SplitKind::Unseen)
                .map(|e| format!(", unseen mAP {:.4}", e.map))
                .unwrap_or_default()
        );
        for e in entries {
            report.push(e);
        }
    }
    Ok(RunOutcome {
        report,
        losses: all_losses,
        train_reads,
        trainer,
    })
}
