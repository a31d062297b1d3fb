//! Retrieval evaluation: Euclidean ranking, mAP and Rank-1, and the
//! seen/unseen aggregates over a training run.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Matrix};

/// Gallery indices by ascending Euclidean distance; ties keep index order.
pub fn rank_gallery(query: ArrayView1<f64>, gallery: ArrayView2<f64>) -> Result<Vec<usize>> {
    if gallery.nrows() == 0 {
        return Err(Error::Argument("empty gallery".into()));
    }
    if gallery.ncols() != query.len() {
        return Err(Error::Argument(format!(
            "query width {} does not match gallery width {}",
            query.len(),
            gallery.ncols()
        )));
    }
    let dist: Vec<f64> = gallery.rows().into_iter().map(|g| squared_distance(query, g)).collect();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Mean of precision@k over the ranks `k` holding a relevant item.
/// `None` when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Query and gallery embeddings with labels and optional cameras.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalTask<'a> {
    pub query: ArrayView2<'a, f64>,
    pub query_labels: &'a [usize],
    pub query_cameras: Option<&'a [usize]>,
    pub gallery: ArrayView2<'a, f64>,
    pub gallery_labels: &'a [usize],
    pub gallery_cameras: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    pub rank1: f64,
    pub valid_queries: usize,
    /// Queries with no valid match, excluded from the averages.
    pub dropped_queries: usize,
}

/// Anything that maps raw inputs to retrieval embeddings.
pub trait Embedder {
    fn embed(&self, inputs: ArrayView2<f64>) -> Result<Matrix>;
}

impl<F> Embedder for F
where
    F: Fn(ArrayView2<f64>) -> Result<Matrix>,
{
    fn embed(&self, inputs: ArrayView2<f64>) -> Result<Matrix> {
        self(inputs)
    }
}

/// Scores precomputed embeddings. When both sides carry camera ids, gallery
/// items sharing the query's identity and camera are removed first.
pub fn score_task(task: &RetrievalTask<'_>) -> Result<RetrievalScores> {
    if task.query.nrows() != task.query_labels.len() || task.gallery.nrows() != task.gallery_labels.len() {
        return Err(Error::Argument("labels do not match embedding rows".into()));
    }
    let cameras = match (task.query_cameras, task.gallery_cameras) {
        (Some(q), Some(g)) => Some((q, g)),
        _ => None,
    };
    let per_query: Vec<Option<(f64, bool)>> = (0..task.query.nrows())
        .into_par_iter()
        .map(|qi| -> Result<Option<(f64, bool)>> {
            let order = rank_gallery(task.query.row(qi), task.gallery)?;
            let label = task.query_labels[qi];
            let relevance: Vec<bool> = order
                .into_iter()
                .filter(|&g| match cameras {
                    Some((qc, gc)) => !(task.gallery_labels[g] == label && gc[g] == qc[qi]),
                    None => true,
                })
                .map(|g| task.gallery_labels[g] == label)
                .collect();
            Ok(average_precision(&relevance).map(|ap| (ap, relevance[0])))
        })
        .collect::<Result<Vec<_>>>()?;
    let valid: Vec<(f64, bool)> = per_query.iter().flatten().copied().collect();
    let dropped = per_query.len() - valid.len();
    if valid.is_empty() {
        return Err(Error::Evaluation(format!("no query has a valid match ({dropped} dropped)")));
    }
    let n = valid.len() as f64;
    let map = valid.iter().map(|(ap, _)| ap).sum::<f64>() / n;
    let rank1 = valid.iter().filter(|(_, hit)| *hit).count() as f64 / n;
    Ok(RetrievalScores {
        map,
        rank1,
        valid_queries: valid.len(),
        dropped_queries: dropped,
    })
}

/// Embeds both splits with a frozen model and scores the retrieval.
pub fn evaluate_task(query: &Split, gallery: &Split, model: &dyn Embedder) -> Result<RetrievalScores> {
    let q = model.embed(query.inputs.view())?;
    let g = model.embed(gallery.inputs.view())?;
    score_task(&RetrievalTask {
        query: q.view(),
        query_labels: &query.labels,
        query_cameras: query.cameras.as_deref(),
        gallery: g.view(),
        gallery_labels: &gallery.labels,
        gallery_cameras: gallery.cameras.as_deref(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Seen,
    Unseen,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Seen => "seen",
            SplitKind::Unseen => "unseen",
        })
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(SplitKind::Seen),
            "unseen" => Ok(SplitKind::Unseen),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

/// One (step, domain) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub step: usize,
    pub domain: String,
    pub split: SplitKind,
    pub map: f64,
    pub rank1: f64,
}

/// Final-step averages over seen (`s_bar`) and unseen (`u_bar`) domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub seen_map: f64,
    pub seen_rank1: f64,
    pub unseen_map: Option<f64>,
    pub unseen_rank1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricEntry>,
}

pub const METRICS_HEADER: &str = "step,domain,split,mAP,rank1";
const AGGREGATE_SPLIT: &str = "aggregate";

impl MetricsReport {
    pub fn push(&mut self, entry: MetricEntry) {
        self.entries.push(entry);
    }

    pub fn last_step(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.step).max()
    }

    pub fn get(&self, step: usize, domain: &str) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.step == step && e.domain == domain)
    }

    /// Domain names per split, in first-appearance order.
    pub fn domains(&self, split: SplitKind) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            if !out.contains(&e.domain) {
                out.push(e.domain.clone());
            }
        }
        out
    }

    /// `(step, mAP, rank1)` of one domain over the run.
    pub fn trajectory(&self, domain: &str) -> Vec<(usize, f64, f64)> {
        let mut t: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.domain == domain)
            .map(|e| (e.step, e.map, e.rank1))
            .collect();
        t.sort_by_key(|x| x.0);
        t
    }

    /// Drop in mAP of `domain` between two steps (positive means forgetting).
    pub fn map_degradation(&self, domain: &str, from_step: usize, to_step: usize) -> Result<f64> {
        let get = |s| {
            self.get(s, domain)
                .map(|e| e.map)
                .ok_or_else(|| Error::Protocol(format!("no entry for {domain} at step {s}")))
        };
        Ok(get(from_step)? - get(to_step)?)
    }

    pub fn aggregate(&self, step: usize, seen: &[String], unseen: &[String]) -> Result<Aggregates> {
        let mean = |names: &[String]| -> Result<Option<(f64, f64)>> {
            if names.is_empty() {
                return Ok(None);
            }
            let mut m = 0.0;
            let mut r = 0.0;
            for name in names {
                let e = self
                    .get(step, name)
                    .ok_or_else(|| Error::Protocol(format!("missing metrics for {name} at step {step}")))?;
                m += e.map;
                r += e.rank1;
            }
            let n = names.len() as f64;
            Ok(Some((m / n, r / n)))
        };
        let (seen_map, seen_rank1) =
            mean(seen)?.ok_or_else(|| Error::Protocol("aggregate needs at least one seen domain".into()))?;
        let unseen = mean(unseen)?;
        Ok(Aggregates {
            seen_map,
            seen_rank1,
            unseen_map: unseen.map(|u| u.0),
            unseen_rank1: unseen.map(|u| u.1),
        })
    }

    /// Aggregates at the last step over every domain in the report.
    pub fn final_aggregates(&self) -> Result<Aggregates> {
        let step = self.last_step().ok_or_else(|| Error::Protocol("empty metrics report".into()))?;
        self.aggregate(step, &self.domains(SplitKind::Seen), &self.domains(SplitKind::Unseen))
    }

    pub fn write_row(out: &mut impl Write, e: &MetricEntry) -> std::io::Result<()> {
        writeln!(out, "{},{},{},{},{}", e.step, e.domain, e.split, e.map, e.rank1)
    }

    pub fn write_aggregates(out: &mut impl Write, step: usize, agg: &Aggregates) -> std::io::Result<()> {
        writeln!(out, "{step},s_bar,{AGGREGATE_SPLIT},{},{}", agg.seen_map, agg.seen_rank1)?;
        if let (Some(m), Some(r)) = (agg.unseen_map, agg.unseen_rank1) {
            writeln!(out, "{step},u_bar,{AGGREGATE_SPLIT},{m},{r}")?;
        }
        Ok(())
    }

    /// Writes per-step rows followed by the aggregate row group.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{METRICS_HEADER}").expect("in-memory write");
        for e in &self.entries {
            Self::write_row(&mut buf, e).expect("in-memory write");
        }
        if let (Some(step), Ok(agg)) = (self.last_step(), self.final_aggregates()) {
            Self::write_aggregates(&mut buf, step, &agg).expect("in-memory write");
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a metrics file; aggregate rows are recomputed, not stored.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_HEADER => {}
            _ => return Err(Error::parse(path, 1, format!("expected header `{METRICS_HEADER}`"))),
        }
        let mut report = MetricsReport::default();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::parse(path, i + 1, "expected 5 fields"));
            }
            if fields[2] == AGGREGATE_SPLIT {
                continue;
            }
            let bad = |what: &str| Error::parse(path, i + 1, format!("invalid {what}"));
            report.push(MetricEntry {
                step: fields[0].parse().map_err(|_| bad("step"))?,
                domain: fields[1].to_string(),
                split: fields[2].parse().map_err(|_| bad("split"))?,
                map: fields[3].parse().map_err(|_| bad("mAP"))?,
                rank1: fields[4].parse().map_err(|_| bad("rank1"))?,
            });
        }
        Ok(report)
    }

    /// Entries grouped by step.
    pub fn by_step(&self) -> BTreeMap<usize, Vec<&MetricEntry>> {
        let mut map: BTreeMap<usize, Vec<&MetricEntry>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.step).or_default().push(e);
        }
        map
    }
}
