use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use lreid_core::checkpoint::Checkpoint;
use lreid_core::data::ingest_directory;
use lreid_core::evaluation::evaluate_task;
use lreid_core::experiment::{self, CONFIG_FILE, DIAG_DIR, METRICS_FILE};
use lreid_core::model::RetrievalModel;
use lreid_core::{Error, EvalEmbedding, ExperimentConfig, Layout, Method, MetricsReport, SplitKind};

use crate::svg::{self, Series};

/// Failure with the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

/// Invalid input: bad config, arguments or missing files.
fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: error.into() }
}

/// Input-side error variants exit with 2, everything else with 1.
fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Parse { .. } => usage(e),
        other => runtime(other),
    }
}

pub struct RunArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub order: Option<Vec<usize>>,
    pub resume: bool,
}

fn resolve_out_dir(configured: &Path, out: Option<PathBuf>, root: Option<PathBuf>) -> PathBuf {
    match (out, root) {
        (Some(out), _) => out,
        (None, Some(root)) if configured.is_relative() => root.join(configured),
        _ => configured.to_path_buf(),
    }
}

pub fn run(args: RunArgs) -> Result<(), Failure> {
    let mut config = ExperimentConfig::load(&args.config).map_err(usage)?;
    if let Some(seed) = args.seed {
        config.set_seed(seed);
    }
    if let Some(method) = args.method {
        config.method = method;
    }
    if args.order.is_some() {
        config.stream.set_order(args.order);
    }
    let root = std::env::var_os(crate::OUT_ROOT_ENV).map(PathBuf::from);
    config.out_dir = resolve_out_dir(&config.out_dir, args.out, root);
    let prepared = experiment::prepare(&config).map_err(usage)?;
    log::info!(
        "running {} on {} domains (order {}) into {}",
        config.method,
        prepared.stream.len(),
        prepared.stream.order_label,
        config.out_dir.display()
    );
    let outcome = prepared.execute(args.resume).map_err(classify)?;
    let agg = outcome.report.final_aggregates().map_err(runtime)?;
    println!("s_bar mAP {:.4} rank1 {:.4}", agg.seen_map, agg.seen_rank1);
    if let (Some(m), Some(r)) = (agg.unseen_map, agg.unseen_rank1) {
        println!("u_bar mAP {m:.4} rank1 {r:.4}");
    }
    println!("artifacts in {}", config.out_dir.display());
    Ok(())
}

struct RunRecord {
    dir: PathBuf,
    method: Method,
    report: MetricsReport,
}

fn load_run(dir: &Path) -> Result<RunRecord, Failure> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))
        .with_context(|| format!("{} is not a run directory", dir.display()))
        .map_err(usage)?;
    let report = MetricsReport::read_csv(&dir.join(METRICS_FILE))
        .with_context(|| format!("reading metrics of {}", dir.display()))
        .map_err(usage)?;
    if report.entries.is_empty() {
        return Err(usage(anyhow!("{} has an empty metrics.csv", dir.display())));
    }
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        method: config.method,
        report,
    })
}

/// Domain sets and step range shared by every run.
fn signature(r: &MetricsReport) -> (Vec<String>, Vec<String>, Vec<usize>) {
    (
        r.domains(SplitKind::Seen),
        r.domains(SplitKind::Unseen),
        r.by_step().keys().copied().collect(),
    )
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn file_stem(domain: &str) -> String {
    domain.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn compare(runs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let records = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let reference = signature(&records[0].report);
    for r in &records[1..] {
        if signature(&r.report) != reference {
            return Err(usage(anyhow!(
                "{} and {} cover different domains or steps",
                records[0].dir.display(),
                r.dir.display()
            )));
        }
    }
    let (seen, unseen, steps) = reference;
    let last = *steps.last().expect("non-empty report");
    let mut by_method: BTreeMap<Method, Vec<&RunRecord>> = BTreeMap::new();
    for r in &records {
        by_method.entry(r.method).or_default().push(r);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;

    let pct = |(m, s): (f64, f64)| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s);
    let mut header = vec!["method".to_string(), "runs".to_string()];
    for d in &seen {
        header.push(format!("{d} mAP"));
        header.push(format!("{d} R-1"));
    }
    header.extend(["s̄ mAP", "s̄ R-1"].map(String::from));
    if !unseen.is_empty() {
        header.extend(["ū mAP", "ū R-1"].map(String::from));
    }
    let mut md = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    let mut csv = String::from("method,runs,column,mean,std\n");
    for (method, group) in &by_method {
        let mut cells = vec![method.to_string(), group.len().to_string()];
        let mut push = |name: String, values: Vec<f64>, cells: &mut Vec<String>| {
            let ms = mean_std(&values);
            csv.push_str(&format!("{method},{},{name},{},{}\n", group.len(), ms.0, ms.1));
            cells.push(pct(ms));
        };
        for d in &seen {
            let entries: Vec<_> = group.iter().map(|r| r.report.get(last, d).expect("signature checked")).collect();
            push(format!("{d} mAP"), entries.iter().map(|e| e.map).collect(), &mut cells);
            push(format!("{d} rank1"), entries.iter().map(|e| e.rank1).collect(), &mut cells);
        }
        let aggs = group
            .iter()
            .map(|r| r.report.aggregate(last, &seen, &unseen))
            .collect::<Result<Vec<_>, _>>()
            .map_err(runtime)?;
        push("s_bar mAP".into(), aggs.iter().map(|a| a.seen_map).collect(), &mut cells);
        push("s_bar rank1".into(), aggs.iter().map(|a| a.seen_rank1).collect(), &mut cells);
        if !unseen.is_empty() {
            push("u_bar mAP".into(), aggs.iter().filter_map(|a| a.unseen_map).collect(), &mut cells);
            push("u_bar rank1".into(), aggs.iter().filter_map(|a| a.unseen_rank1).collect(), &mut cells);
        }
        md.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    write(&out.join("table.md"), &md)?;
    write(&out.join("table.csv"), &csv)?;
    print!("{md}");

    let curve = |domain: &str, title: &str, file: &str| -> Result<(), Failure> {
        let mut csv = String::from("step,method,mAP_mean,mAP_std,rank1_mean,rank1_std\n");
        let mut map_series = Vec::new();
        for (method, group) in &by_method {
            let mut points = Vec::new();
            for &t in &steps {
                let entries: Vec<_> = group.iter().filter_map(|r| r.report.get(t, domain)).collect();
                let m = mean_std(&entries.iter().map(|e| e.map).collect::<Vec<_>>());
                let r1 = mean_std(&entries.iter().map(|e| e.rank1).collect::<Vec<_>>());
                csv.push_str(&format!("{t},{method},{},{},{},{}\n", m.0, m.1, r1.0, r1.1));
                points.push((t as f64, 100.0 * m.0));
            }
            map_series.push(Series { name: method.to_string(), points });
        }
        write(&out.join(format!("{file}.csv")), &csv)?;
        write(&out.join(format!("{file}.svg")), &svg::line_chart(title, "training step", "mAP (%)", &map_series, (0.0, 100.0)))
    };
    for d in &seen {
        curve(d, &format!("mAP on {d} across steps"), &format!("forgetting_{}", file_stem(d)))?;
    }
    for d in &unseen {
        curve(d, &format!("mAP on {d} across steps"), &format!("generalization_{}", file_stem(d)))?;
    }
    println!("wrote table and curves to {}", out.display());
    Ok(())
}

/// Last-epoch cosine dump per domain step.
fn cosine_dumps(diag: &Path) -> Result<BTreeMap<usize, (usize, PathBuf)>, Failure> {
    let entries = fs::read_dir(diag).map_err(|_| {
        usage(anyhow!(
            "no diagnostic dumps under {}; rerun with `diagnostics = true` in [train]",
            diag.display()
        ))
    })?;
    let mut latest: BTreeMap<usize, (usize, PathBuf)> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(runtime)?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(rest) = name.strip_prefix("step_").and_then(|r| r.strip_suffix("_cosine.csv")) else { continue };
        let Some((step, epoch)) = rest.split_once("_epoch_") else { continue };
        let (Ok(step), Ok(epoch)) = (step.parse::<usize>(), epoch.parse::<usize>()) else { continue };
        if latest.get(&step).is_none_or(|(e, _)| epoch > *e) {
            latest.insert(step, (epoch, path));
        }
    }
    if latest.is_empty() {
        return Err(usage(anyhow!(
            "{} contains no cosine dumps; rerun with `diagnostics = true` in [train]",
            diag.display()
        )));
    }
    Ok(latest)
}

pub fn diagnose(run: &Path, out: &Path) -> Result<(), Failure> {
    let dumps = cosine_dumps(&run.join(DIAG_DIR))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;
    for (step, (epoch, path)) in &dumps {
        let m = experiment::read_matrix_csv(path).map_err(classify)?;
        if let Some(v) = m.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(runtime(anyhow!("{} holds {v}, outside the cosine range", path.display())));
        }
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        let title = format!("cos(V^S, V̄^S), step {step}, epoch {epoch}");
        let file = out.join(format!("heatmap_step_{step}.svg"));
        write(&file, &svg::heatmap(&title, &rows, (-1.0, 1.0), "V^S row", "V̄^S row"))?;
    }
    println!("wrote {} heatmaps to {}", dumps.len(), out.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, layout: Layout, embedding: EvalEmbedding, chunk: usize) -> Result<(), Failure> {
    if !checkpoint.is_file() {
        return Err(usage(anyhow!("checkpoint {} does not exist", checkpoint.display())));
    }
    if !data.is_dir() {
        return Err(usage(anyhow!("dataset directory {} does not exist", data.display())));
    }
    let model = Checkpoint::load(checkpoint).and_then(|c| c.to_model()).map_err(usage)?;
    let ingested = ingest_directory(data, layout).map_err(usage)?;
    for w in &ingested.warnings {
        log::warn!("{w}");
    }
    let d = &ingested.dataset;
    if d.query.dim() != model.backbone.config().input_dim {
        return Err(usage(anyhow!(
            "dataset vectors have {} dims but the checkpoint expects {}",
            d.query.dim(),
            model.backbone.config().input_dim
        )));
    }
    let embedder = RetrievalModel { model: &model, embedding, chunk };
    let scores = evaluate_task(&d.query, &d.gallery, &embedder).map_err(runtime)?;
    println!(
        "{}: mAP {:.4} rank1 {:.4} ({} queries, {} without a match)",
        d.name, scores.map, scores.rank1, scores.valid_queries, scores.dropped_queries
    );
    Ok(())
}
