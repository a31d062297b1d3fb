//! Domain datasets: synthetic identity-cluster domains, on-disk ingestion
//! and the ordered domain stream with globally disjoint labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gather_rows, randn, Matrix};

/// Labelled sample matrix with optional camera ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub cameras: Option<Vec<usize>>,
}

impl Split {
    pub fn new(inputs: Matrix, labels: Vec<usize>, cameras: Option<Vec<usize>>) -> Result<Self> {
        if inputs.nrows() != labels.len() || cameras.as_ref().is_some_and(|c| c.len() != labels.len()) {
            return Err(Error::Argument(format!(
                "split has {} rows, {} labels and {:?} cameras",
                inputs.nrows(),
                labels.len(),
                cameras.as_ref().map(Vec::len)
            )));
        }
        Ok(Self { inputs, labels, cameras })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            inputs: Array2::zeros((0, dim)),
            labels: Vec::new(),
            cameras: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn identities(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Row indices grouped by label, labels ascending.
    pub fn by_identity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            map.entry(y).or_default().push(i);
        }
        map
    }

    pub fn select(&self, rows: &[usize]) -> Split {
        Split {
            inputs: gather_rows(self.inputs.view(), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            cameras: self.cameras.as_ref().map(|c| rows.iter().map(|&r| c[r]).collect()),
        }
    }

    /// Concatenate splits with the same input width.
    pub fn concat(parts: &[&Split]) -> Result<Split> {
        let dim = parts.first().map(|p| p.dim()).unwrap_or(0);
        if parts.iter().any(|p| p.dim() != dim) {
            return Err(Error::Argument("cannot merge splits of different widths".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.inputs.view()).collect();
        let inputs = if views.is_empty() {
            Array2::zeros((0, 0))
        } else {
            concatenate(Axis(0), &views).map_err(|e| Error::Argument(e.to_string()))?
        };
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        let cameras = if parts.iter().all(|p| p.cameras.is_some()) && !parts.is_empty() {
            Some(parts.iter().flat_map(|p| p.cameras.clone().unwrap()).collect())
        } else {
            None
        };
        Ok(Split { inputs, labels, cameras })
    }

    fn map_labels(&mut self, f: impl Fn(usize) -> usize) {
        for y in &mut self.labels {
            *y = f(*y);
        }
    }
}

/// Counter of training-split reads shared with observers.
#[derive(Debug, Clone, Default)]
pub struct AccessCounter(Arc<AtomicUsize>);

impl AccessCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

/// One domain: training split plus disjoint-identity query/gallery splits.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub name: String,
    train: Split,
    pub query: Split,
    pub gallery: Split,
    released: bool,
    reads: AccessCounter,
}

impl PartialEq for DomainDataset {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.train == other.train
            && self.query == other.query
            && self.gallery == other.gallery
            && self.released == other.released
    }
}

impl DomainDataset {
    pub fn new(name: impl Into<String>, train: Split, query: Split, gallery: Split) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            train,
            query,
            gallery,
            released: false,
            reads: AccessCounter::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.train.dim();
        if self.query.dim() != dim || self.gallery.dim() != dim {
            return Err(Error::Argument(format!("domain {}: splits differ in input width", self.name)));
        }
        let train_ids = self.train.identities();
        let test_ids: BTreeSet<usize> = self.query.identities().union(&self.gallery.identities()).copied().collect();
        if let Some(shared) = train_ids.intersection(&test_ids).next() {
            return Err(Error::Argument(format!(
                "domain {}: identity {shared} appears in both train and test splits",
                self.name
            )));
        }
        Ok(())
    }

    /// Training split; every call is counted, and reads after release fail.
    pub fn train(&self) -> Result<&Split> {
        if self.released {
            return Err(Error::Protocol(format!("training data of domain {} was released", self.name)));
        }
        self.reads.bump();
        Ok(&self.train)
    }

    pub fn train_reads(&self) -> AccessCounter {
        self.reads.clone()
    }

    pub fn num_train_identities(&self) -> usize {
        self.train.identities().len()
    }

    pub fn num_train_samples(&self) -> usize {
        self.train.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train.dim().max(self.query.dim())
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    /// Drops the training split; only the test splits remain readable.
    pub fn release_train(&mut self) {
        let dim = self.train.dim();
        self.train = Split::empty(dim);
        self.released = true;
    }

    /// Remaps train labels to `train_offset..` and test labels to
    /// `test_offset..`, each in ascending order of the current labels.
    fn relabel(&mut self, train_offset: usize, test_offset: usize) {
        let train_map: BTreeMap<usize, usize> = self
            .train
            .identities()
            .into_iter()
            .enumerate()
            .map(|(i, y)| (y, train_offset + i))
            .collect();
        let test_ids: BTreeSet<usize> = self.query.identities().union(&self.gallery.identities()).copied().collect();
        let test_map: BTreeMap<usize, usize> =
            test_ids.into_iter().enumerate().map(|(i, y)| (y, test_offset + i)).collect();
        self.train.map_labels(|y| train_map[&y]);
        self.query.map_labels(|y| test_map[&y]);
        self.gallery.map_labels(|y| test_map[&y]);
    }

    pub fn num_test_identities(&self) -> usize {
        self.query.identities().union(&self.gallery.identities()).count()
    }

    /// Writes `train.csv`, `query.csv` and `gallery.csv` into `dir`.
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_split_csv(&dir.join("train.csv"), &self.train)?;
        write_split_csv(&dir.join("query.csv"), &self.query)?;
        write_split_csv(&dir.join("gallery.csv"), &self.gallery)?;
        Ok(())
    }
}

/// Domain-shift operator applied on top of the shared generative process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    /// Strength of the random orthogonal transform; 0 gives the identity.
    pub rotation: f64,
    /// Std of the per-domain offset.
    pub translation: f64,
    /// Per-domain noise multiplier is drawn from `[1, 1 + noise_jitter]`.
    pub noise_jitter: f64,
    /// Number of latent identity factors expressed in each domain, drawn
    /// at random per domain; the rest carry noise only. `None`, or any value
    /// of at least `latent_dim`, expresses all of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors_per_domain: Option<usize>,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            rotation: 0.3,
            translation: 1.0,
            noise_jitter: 0.5,
            factors_per_domain: Some(6),
        }
    }
}

/// Parameters of the synthetic identity-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub train_identities: usize,
    pub test_identities: usize,
    /// Inclusive range of training samples per identity.
    pub samples_per_identity: (usize, usize),
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
    pub input_dim: usize,
    /// Leading dimensions that carry identity information.
    pub latent_dim: usize,
    /// Std of identity centers in the latent space.
    pub separation: f64,
    /// Within-identity noise std.
    pub noise: f64,
    /// Std of identity-free nuisance dimensions.
    pub nuisance: f64,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_identities: 20,
            test_identities: 20,
            samples_per_identity: (12, 12),
            query_per_identity: 2,
            gallery_per_identity: 4,
            input_dim: 32,
            latent_dim: 24,
            separation: 1.0,
            noise: 0.35,
            nuisance: 1.0,
            shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("synthetic spec: {m}")));
        if self.train_identities == 0 || self.test_identities == 0 {
            return bad("identity counts must be positive");
        }
        let (lo, hi) = self.samples_per_identity;
        if lo == 0 || hi < lo {
            return bad("samples_per_identity must be a non-empty range starting at 1 or more");
        }
        if self.query_per_identity == 0 || self.gallery_per_identity == 0 {
            return bad("test identities need at least one query and one gallery sample");
        }
        if self.input_dim == 0 || self.latent_dim == 0 || self.latent_dim > self.input_dim {
            return bad("latent_dim must be in [1, input_dim]");
        }
        if self.shift.factors_per_domain == Some(0) {
            return bad("factors_per_domain must be positive");
        }
        if self.separation.is_nan() || self.separation <= 0.0 {
            return bad("separation must be positive");
        }
        for v in [
            self.noise,
            self.nuisance,
            self.shift.rotation,
            self.shift.translation,
            self.shift.noise_jitter,
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad("noise and shift parameters must be finite and non-negative");
            }
        }
        Ok(())
    }
}

fn domain_rng(seed: u64, domain_index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain_index as u64) << 8) | stream);
    rng
}

/// Orthogonal factor of `I + strength * G / sqrt(n)`, signs fixed so that
/// `strength = 0` yields exactly the identity.
fn domain_rotation<R: Rng + ?Sized>(n: usize, strength: f64, rng: &mut R) -> Matrix {
    let g = randn(n, n, 1.0, rng);
    let scale = strength / (n as f64).sqrt();
    let m = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + scale * g[[i, j]]);
    let qr = m.qr();
    let (q, r) = (qr.q(), qr.r());
    Array2::from_shape_fn((n, n), |(i, j)| {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * sign
    })
}

/// Generative map of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub rotation: Matrix,
    pub offset: Array1<f64>,
    pub noise_scale: f64,
    /// Gain on each identity factor: `sqrt(latent / active)` on the active
    /// factors and 0 elsewhere, so total identity variance is preserved.
    pub factor_gains: Array1<f64>,
}

impl DomainTransform {
    pub fn for_domain(spec: &SyntheticSpec, domain_index: usize) -> Self {
        let mut rng = domain_rng(spec.seed, domain_index, 1);
        let rotation = domain_rotation(spec.input_dim, spec.shift.rotation, &mut rng);
        let offset = randn(1, spec.input_dim, 1.0, &mut rng).row(0).mapv(|v| v * spec.shift.translation);
        let noise_scale = 1.0 + spec.shift.noise_jitter * rng.random::<f64>();
        let latent = spec.latent_dim;
        let factor_gains = match spec.shift.factors_per_domain {
            Some(active) if active < latent => {
                let gain = (latent as f64 / active as f64).sqrt();
                let mut g = Array1::zeros(latent);
                for k in rand::seq::index::sample(&mut rng, latent, active) {
                    g[k] = gain;
                }
                g
            }
            _ => Array1::ones(latent),
        };
        Self {
            rotation,
            offset,
            noise_scale,
            factor_gains,
        }
    }
}

/// Gaussian identity clusters mapped through a domain-specific orthogonal
/// transform and offset. Pure function of `(spec, domain_index)`.
///
/// Local labels: train identities `0..train_identities`, test identities
/// follow them.
pub fn generate_domain(spec: &SyntheticSpec, domain_index: usize) -> Result<DomainDataset> {
    spec.validate()?;
    let transform = DomainTransform::for_domain(spec, domain_index);
    let mut rng = domain_rng(spec.seed, domain_index, 2);
    let (lo, hi) = spec.samples_per_identity;
    let total_ids = spec.train_identities + spec.test_identities;
    let centers = randn(total_ids, spec.latent_dim, spec.separation, &mut rng);

    let draw = |identity: usize, count: usize, rng: &mut ChaCha8Rng| -> Matrix {
        let noise = spec.noise * transform.noise_scale;
        let nuisance = spec.nuisance * transform.noise_scale;
        let mut latent = Array2::zeros((count, spec.input_dim));
        for r in 0..count {
            for k in 0..spec.input_dim {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                latent[[r, k]] = if k < spec.latent_dim {
                    transform.factor_gains[k] * centers[[identity, k]] + noise * z
                } else {
                    nuisance * z
                };
            }
        }
        latent.dot(&transform.rotation.t()) + &transform.offset
    };

    let mut train_parts = Vec::new();
    let mut train_labels = Vec::new();
    for id in 0..spec.train_identities {
        let count = rng.random_range(lo..=hi);
        train_parts.push(draw(id, count, &mut rng));
        train_labels.extend(std::iter::repeat_n(id, count));
    }
    let mut query_parts = Vec::new();
    let mut gallery_parts = Vec::new();
    let mut query_labels = Vec::new();
    let mut gallery_labels = Vec::new();
    for id in spec.train_identities..total_ids {
        query_parts.push(draw(id, spec.query_per_identity, &mut rng));
        query_labels.extend(std::iter::repeat_n(id, spec.query_per_identity));
        gallery_parts.push(draw(id, spec.gallery_per_identity, &mut rng));
        gallery_labels.extend(std::iter::repeat_n(id, spec.gallery_per_identity));
    }
    let stack = |parts: Vec<Matrix>| -> Matrix {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).expect("equal widths")
    };
    DomainDataset::new(
        format!("synthetic-{domain_index}"),
        Split::new(stack(train_parts), train_labels, None)?,
        Split::new(stack(query_parts), query_labels, None)?,
        Split::new(stack(gallery_parts), gallery_labels, None)?,
    )
}

/// Query/gallery pool merged from held-out domains.
#[derive(Debug, Clone, PartialEq)]
pub struct UnseenPool {
    pub sources: Vec<String>,
    pub query: Split,
    pub gallery: Split,
}

/// Ordered training domains plus the unseen evaluation pool.
#[derive(Debug, Clone)]
pub struct DomainStream {
    pub order_label: String,
    pub domains: Vec<DomainDataset>,
    pub unseen: Option<UnseenPool>,
}

impl DomainStream {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Training identity count of every domain in arrival order.
    pub fn class_counts(&self) -> Vec<usize> {
        self.domains.iter().map(DomainDataset::num_train_identities).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.domains.first().map(DomainDataset::input_dim).unwrap_or(0)
    }
}

/// Arranges `domains` in `order` (a permutation of their indices), assigns
/// contiguous global train labels in arrival order, and places all test
/// labels after the last train label. `held_out` domains are merged into
/// the unseen pool.
pub fn build_stream(
    domains: Vec<DomainDataset>,
    order: &[usize],
    held_out: Vec<DomainDataset>,
    order_label: impl Into<String>,
) -> Result<DomainStream> {
    if domains.is_empty() {
        return Err(Error::Argument("stream needs at least one domain".into()));
    }
    let mut seen = vec![false; domains.len()];
    if order.len() != domains.len() || order.iter().any(|&i| i >= domains.len() || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Argument(format!(
            "order {order:?} is not a permutation of 0..{}",
            domains.len()
        )));
    }
    let mut slots: Vec<Option<DomainDataset>> = domains.into_iter().map(Some).collect();
    let mut ordered: Vec<DomainDataset> = order.iter().map(|&i| slots[i].take().expect("permutation")).collect();

    let total_train: usize = ordered.iter().map(DomainDataset::num_train_identities).sum();
    let mut train_offset = 0;
    let mut test_offset = total_train;
    for d in &mut ordered {
        let n_train = d.num_train_identities();
        let n_test = d.num_test_identities();
        d.relabel(train_offset, test_offset);
        train_offset += n_train;
        test_offset += n_test;
    }
    let mut held = held_out;
    for d in &mut held {
        let n_test = d.num_test_identities();
        d.relabel(0, test_offset);
        test_offset += n_test;
    }
    let unseen = if held.is_empty() {
        None
    } else {
        let queries: Vec<&Split> = held.iter().map(|d| &d.query).collect();
        let galleries: Vec<&Split> = held.iter().map(|d| &d.gallery).collect();
        Some(UnseenPool {
            sources: held.iter().map(|d| d.name.clone()).collect(),
            query: Split::concat(&queries)?,
            gallery: Split::concat(&galleries)?,
        })
    };
    Ok(DomainStream {
        order_label: order_label.into(),
        domains: ordered,
        unseen,
    })
}

/// Synthetic stream of `train_domains` domains followed by `unseen_domains`
/// held-out ones.
pub fn synthetic_stream(spec: &SyntheticSpec, train_domains: usize, unseen_domains: usize, order: Option<&[usize]>) -> Result<DomainStream> {
    let domains = (0..train_domains).map(|i| generate_domain(spec, i)).collect::<Result<Vec<_>>>()?;
    let held = (train_domains..train_domains + unseen_domains)
        .map(|i| generate_domain(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let default_order: Vec<usize> = (0..train_domains).collect();
    let order = order.unwrap_or(&default_order);
    let label = order.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-");
    build_stream(domains, order, held, label)
}

fn write_split_csv(path: &Path, split: &Split) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    let mut header = vec!["id".to_string()];
    if split.cameras.is_some() {
        header.push("camera".into());
    }
    header.extend((0..split.dim()).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    for (i, row) in split.inputs.rows().into_iter().enumerate() {
        let mut rec = vec![split.labels[i].to_string()];
        if let Some(c) = &split.cameras {
            rec.push(c[i].to_string());
        }
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parses the embedding CSV schema `id,camera?,v0..v{d-1}`.
pub fn read_split_csv(path: &Path) -> Result<Split> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let header = reader.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    if header.get(0) != Some("id") {
        return Err(Error::parse(path, 1, "first column must be `id`"));
    }
    let has_camera = header.get(1) == Some("camera");
    let first_vec = if has_camera { 2 } else { 1 };
    let dim = header.len() - first_vec;
    for (k, name) in header.iter().skip(first_vec).enumerate() {
        if name != format!("v{k}") {
            return Err(Error::parse(path, 1, format!("expected column v{k}, found `{name}`")));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut cameras = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if record.len() != header.len() {
            return Err(Error::parse(path, line, format!("expected {} fields, found {}", header.len(), record.len())));
        }
        let int = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(path, line, format!("invalid {what} `{s}`")))
        };
        labels.push(int(&record[0], "id")?);
        if has_camera {
            cameras.push(int(&record[1], "camera")?);
        }
        for field in record.iter().skip(first_vec) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(path, line, format!("invalid float `{field}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, "non-finite value"));
            }
            values.push(v);
        }
    }
    let inputs = Array2::from_shape_vec((labels.len(), dim), values).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    Split::new(inputs, labels, has_camera.then_some(cameras))
}

/// On-disk layout of a domain directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `train.csv`, `query.csv`, `gallery.csv` in the embedding CSV schema.
    Csv,
    /// `{train,query,gallery}/<identity>/<sample>.txt`, one vector per
    /// file; an optional `c<camera>_` file-name prefix sets the camera.
    Tree,
}

/// Parsed dataset plus non-fatal findings such as skipped folders.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: DomainDataset,
    pub warnings: Vec<String>,
}

pub fn ingest_directory(path: &Path, layout: Layout) -> Result<Ingested> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".into());
    let mut warnings = Vec::new();
    let (train, query, gallery) = match layout {
        Layout::Csv => (
            read_split_csv(&path.join("train.csv"))?,
            read_split_csv(&path.join("query.csv"))?,
            read_split_csv(&path.join("gallery.csv"))?,
        ),
        Layout::Tree => (
            read_split_tree(&path.join("train"), &mut warnings)?,
            read_split_tree(&path.join("query"), &mut warnings)?,
            read_split_tree(&path.join("gallery"), &mut warnings)?,
        ),
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let dataset = DomainDataset::new(name, train, query, gallery)?;
    Ok(Ingested { dataset, warnings })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn read_split_tree(dir: &Path, warnings: &mut Vec<String>) -> Result<Split> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut cameras: Vec<Option<usize>> = Vec::new();
    for id_dir in sorted_entries(dir)? {
        if !id_dir.is_dir() {
            continue;
        }
        let id_name = id_dir.file_name().unwrap().to_string_lossy().into_owned();
        let id: usize = id_name
            .parse()
            .map_err(|_| Error::parse(&id_dir, 0, format!("identity folder `{id_name}` is not an integer")))?;
        let files: Vec<PathBuf> = sorted_entries(&id_dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            warnings.push(format!("skipping empty identity folder {}", id_dir.display()));
            continue;
        }
        for file in files {
            let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            let vec = text
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::parse(&file, 1, format!("invalid value `{t}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != vec.len() {
                    return Err(Error::parse(&file, 1, format!("expected {} values, found {}", first.len(), vec.len())));
                }
            }
            let stem = file.file_name().unwrap().to_string_lossy().into_owned();
            let camera = stem
                .strip_prefix('c')
                .and_then(|rest| rest.split('_').next())
                .and_then(|c| c.parse().ok());
            rows.push(vec);
            labels.push(id);
            cameras.push(camera);
        }
    }
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    let inputs = Array2::from_shape_vec((rows.len(), dim), rows.into_iter().flatten().collect())
        .map_err(|e| Error::parse(dir, 0, e.to_string()))?;
    let cameras = if !cameras.is_empty() && cameras.iter().all(Option::is_some) {
        Some(cameras.into_iter().map(Option::unwrap).collect())
    } else {
        None
    };
    Split::new(inputs, labels, cameras)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            train_identities: 4,
            test_identities: 3,
            samples_per_identity: (2, 5),
            input_dim: 6,
            latent_dim: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(generate_domain(&spec, 2).unwrap(), generate_domain(&spec, 2).unwrap());
        assert_ne!(generate_domain(&spec, 2).unwrap().query, generate_domain(&spec, 3).unwrap().query);
    }

    #[test]
    fn identity_shift_yields_identical_generative_maps() {
        let spec = SyntheticSpec {
            noise: 0.0,
            nuisance: 0.0,
            shift: DomainShift {
                rotation: 0.0,
                translation: 0.0,
                noise_jitter: 0.3,
                factors_per_domain: None,
            },
            ..small_spec()
        };
        let a = DomainTransform::for_domain(&spec, 0);
        let b = DomainTransform::for_domain(&spec, 4);
        assert_eq!(a.rotation, Array2::<f64>::eye(6));
        assert_eq!(a.rotation, b.rotation);
        assert_eq!(a.offset, b.offset);
        assert!(a.factor_gains.iter().chain(&b.factor_gains).all(|&g| g == 1.0));
        // Noise-free samples sit exactly on their identity center.
        let d = generate_domain(&spec, 1).unwrap();
        for rows in d.train().unwrap().by_identity().values() {
            let first = d.train().unwrap().inputs.row(rows[0]).to_owned();
            for &r in rows {
                assert_eq!(d.train().unwrap().inputs.row(r), first);
            }
        }
    }

    #[test]
    fn rotation_is_orthogonal() {
        let spec = small_spec();
        let t = DomainTransform::for_domain(&spec, 0);
        let qtq = t.rotation.t().dot(&t.rotation);
        for ((i, j), v) in qtq.indexed_iter() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn train_and_test_identities_are_disjoint() {
        let d = generate_domain(&small_spec(), 0).unwrap();
        let train = d.train().unwrap().identities();
        assert!(train.is_disjoint(&d.query.identities()));
        assert!(train.is_disjoint(&d.gallery.identities()));
        assert_eq!(d.num_train_identities(), 4);
        assert_eq!(d.num_test_identities(), 3);
        for rows in d.train().unwrap().by_identity().values() {
            assert!((2..=5).contains(&rows.len()));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let zero = SyntheticSpec {
            train_identities: 0,
            ..small_spec()
        };
        assert!(matches!(generate_domain(&zero, 0), Err(Error::Argument(_))));
        let flat = SyntheticSpec {
            separation: 0.0,
            ..small_spec()
        };
        assert!(generate_domain(&flat, 0).is_err());
    }

    #[test]
    fn well_separated_clusters_are_nearest_centroid_separable() {
        let spec = SyntheticSpec {
            separation: 10.0,
            noise: 1.0,
            nuisance: 1.0,
            latent_dim: 16,
            input_dim: 32,
            samples_per_identity: (30, 30),
            ..SyntheticSpec::default()
        };
        let d = generate_domain(&spec, 0).unwrap();
        let train = d.train().unwrap();
        // Centroids from the first half of each identity, classify the second half.
        let groups = train.by_identity();
        let mut centroids = Vec::new();
        for (id, rows) in &groups {
            let fit = &rows[..rows.len() / 2];
            let c = gather_rows(train.inputs.view(), fit).mean_axis(Axis(0)).unwrap();
            centroids.push((*id, c));
        }
        let (mut correct, mut total) = (0, 0);
        for (id, rows) in &groups {
            for &r in &rows[rows.len() / 2..] {
                let x = train.inputs.row(r);
                let best = centroids
                    .iter()
                    .min_by(|a, b| {
                        let da = crate::tensor::squared_distance(x, a.1.view());
                        let db = crate::tensor::squared_distance(x, b.1.view());
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                correct += usize::from(best == *id);
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 > 0.99, "{correct}/{total}");
    }

    #[test]
    fn stream_labels_are_globally_disjoint() {
        let spec = small_spec();
        let stream = synthetic_stream(&spec, 5, 2, None).unwrap();
        assert_eq!(stream.len(), 5);
        let pool = stream.unseen.as_ref().unwrap();
        assert_eq!(pool.sources.len(), 2);
        let mut all = BTreeSet::new();
        let mut count = 0;
        for (t, d) in stream.domains.iter().enumerate() {
            let train = d.train().unwrap().identities();
            assert_eq!(*train.iter().next().unwrap(), 4 * t);
            let test: BTreeSet<usize> = d.query.identities().union(&d.gallery.identities()).copied().collect();
            count += train.len() + test.len();
            all.extend(train);
            all.extend(test);
        }
        let unseen: BTreeSet<usize> = pool.query.identities().union(&pool.gallery.identities()).copied().collect();
        count += unseen.len();
        all.extend(unseen);
        assert_eq!(all.len(), count);
        assert_eq!(stream.class_counts(), vec![4; 5]);
    }

    #[test]
    fn order_changes_sequence_not_contents() {
        let spec = small_spec();
        let a = synthetic_stream(&spec, 3, 0, None).unwrap();
        let b = synthetic_stream(&spec, 3, 0, Some(&[2, 0, 1])).unwrap();
        assert_eq!(b.domains[0].name, a.domains[2].name);
        assert_eq!(b.domains[0].train().unwrap().inputs, a.domains[2].train().unwrap().inputs);
        assert_eq!(b.domains[1].query.inputs, a.domains[0].query.inputs);
        assert!(synthetic_stream(&spec, 3, 0, Some(&[0, 0, 1])).is_err());
    }

    #[test]
    fn released_training_data_cannot_be_read() {
        let mut d = generate_domain(&small_spec(), 0).unwrap();
        let counter = d.train_reads();
        d.train().unwrap();
        d.train().unwrap();
        assert_eq!(counter.get(), 2);
        d.release_train();
        assert!(matches!(d.train(), Err(Error::Protocol(_))));
        assert_eq!(counter.get(), 2);
    }

    #[test]
    fn csv_with_three_ids_of_four_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("id,camera,v0,v1\n");
        for id in 0..3 {
            for r in 0..4 {
                text.push_str(&format!("{id},{r},{}.5,-{r}\n", id + r));
            }
        }
        let path = dir.path().join("train.csv");
        fs::write(&path, text).unwrap();
        let split = read_split_csv(&path).unwrap();
        assert_eq!(split.identities().len(), 3);
        assert_eq!(split.len(), 12);
        assert_eq!(split.cameras.as_ref().unwrap()[5], 1);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("query.csv");
        fs::write(&path, "id,v0,v1\n0,1.0,2.0\n1,abc,2.0\n").unwrap();
        match read_split_csv(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn export_import_round_trip() {
        let d = generate_domain(&small_spec(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("synthetic-1");
        d.export_csv(&root).unwrap();
        let back = ingest_directory(&root, Layout::Csv).unwrap();
        assert_eq!(back.dataset, d);
        assert!(back.warnings.is_empty());
    }

    #[test]
    fn tree_layout_skips_empty_identity_folders() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("dom");
        for (split, ids) in [("train", vec![0, 1]), ("query", vec![5]), ("gallery", vec![5, 6])] {
            for id in ids {
                let p = root.join(split).join(id.to_string());
                fs::create_dir_all(&p).unwrap();
                fs::write(p.join("c1_a.txt"), format!("{id} 1.0 2.0")).unwrap();
                fs::write(p.join("c2_b.txt"), format!("{id},0.5,0.25")).unwrap();
            }
        }
        fs::create_dir_all(root.join("train").join("7")).unwrap();
        let ing = ingest_directory(&root, Layout::Tree).unwrap();
        assert_eq!(ing.warnings.len(), 1);
        assert!(ing.warnings[0].contains("7"));
        let train = ing.dataset.train().unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(train.dim(), 3);
        assert_eq!(train.cameras.as_deref(), Some(&[1, 2, 1, 2][..]));
        assert_eq!(ing.dataset.gallery.len(), 4);
    }

    #[test]
    fn overlapping_train_and_test_ids_are_rejected() {
        let s = |ids: Vec<usize>| Split::new(Array2::zeros((ids.len(), 2)), ids, None).unwrap();
        assert!(DomainDataset::new("x", s(vec![0, 1]), s(vec![1]), s(vec![2])).is_err());
    }
}
