//! Config-driven runs that persist every artifact under one directory.
//!
//! Layout of a run directory:
//! `config.toml`, `metrics.csv`, `losses.csv`, `step_{t}.ckpt`, and with
//! diagnostics enabled `diag/step_{t}_epoch_{e}_{cross,cosine}.csv`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{step_file_name, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::DomainStream;
use crate::error::{Error, Result};
use crate::evaluation::{MetricEntry, MetricsReport, METRICS_HEADER};
use crate::tensor::Matrix;
use crate::trainer::{run_stream, DomainOutcome, RunObserver, RunOutcome, Trainer, LOSS_HEADER};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const DIAG_DIR: &str = "diag";

pub fn diag_file_name(step: usize, epoch: usize, kind: &str) -> String {
    format!("step_{step}_epoch_{epoch}_{kind}.csv")
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::parse(path, i + 1, "ragged row"));
        }
        for field in rec.iter() {
            data.push(field.trim().parse::<f64>().map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
        }
        rows += 1;
    }
    Matrix::from_shape_vec((rows, cols.unwrap_or(0)), data).map_err(|e| Error::parse(path, 0, e.to_string()))
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

struct FileObserver {
    dir: PathBuf,
    seed: u64,
    method: String,
    diagnostics: bool,
}

impl RunObserver for FileObserver {
    fn on_domain_trained(&mut self, step: usize, trainer: &Trainer, outcome: &DomainOutcome) -> Result<()> {
        Checkpoint::from_model(trainer.model(), step, self.seed, &self.method).save(&self.dir.join(step_file_name(step)))?;
        let path = self.dir.join(LOSSES_FILE);
        let mut w = append(&path)?;
        for r in &outcome.losses {
            writeln!(w, "{}", r.csv_row()).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        if self.diagnostics {
            let diag = self.dir.join(DIAG_DIR);
            fs::create_dir_all(&diag).map_err(|e| Error::io(&diag, e))?;
            for d in &outcome.diagnostics {
                write_matrix_csv(&diag.join(diag_file_name(d.domain_step, d.epoch, "cross")), &d.cross)?;
                write_matrix_csv(&diag.join(diag_file_name(d.domain_step, d.epoch, "cosine")), &d.cosine)?;
            }
        }
        Ok(())
    }

    fn on_evaluated(&mut self, _step: usize, entries: &[MetricEntry]) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        let mut w = append(&path)?;
        for e in entries {
            MetricsReport::write_row(&mut w, e).map_err(|err| Error::io(&path, err))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Latest `step_{t}.ckpt` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(t) = step {
            if best.as_ref().is_none_or(|(b, _)| t > *b) {
                best = Some((t, path));
            }
        }
    }
    Ok(best)
}

fn reset_file(path: &Path, header: &str, keep: &[String]) -> Result<()> {
    let mut text = format!("{header}\n");
    for line in keep {
        text.push_str(line);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Validated config plus its materialized stream, ready to run.
pub struct PreparedRun {
    pub config: ExperimentConfig,
    pub stream: DomainStream,
    pub warnings: Vec<String>,
}

/// Validates `config` and loads its stream without touching the output directory.
pub fn prepare(config: &ExperimentConfig) -> Result<PreparedRun> {
    config.validate()?;
    let (stream, warnings) = config.build_stream()?;
    Ok(PreparedRun {
        config: config.clone(),
        stream,
        warnings,
    })
}

/// Runs `config` and writes all artifacts to `config.out_dir`. With `resume`,
/// training continues after the newest checkpoint found there.
pub fn run_experiment(config: &ExperimentConfig, resume: bool) -> Result<RunOutcome> {
    prepare(config)?.execute(resume)
}

impl PreparedRun {
    pub fn execute(self, resume: bool) -> Result<RunOutcome> {
        let PreparedRun {
            config,
            stream,
            warnings,
        } = self;
        for w in &warnings {
            log::warn!("{w}");
        }
        let dir = config.out_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let train_config = config.train_config();
        let metrics_path = dir.join(METRICS_FILE);
        let losses_path = dir.join(LOSSES_FILE);

        let resume_from = if resume { latest_checkpoint(&dir)? } else { None };
        let (trainer, kept_metrics) = match resume_from {
            Some((step, path)) => {
                let ckpt = Checkpoint::load(&path)?;
                if ckpt.meta.method != config.method.as_str() || ckpt.meta.seed != config.seed || ckpt.meta.step != step {
                    return Err(Error::Config(format!(
                        "{} was written by a different method, seed or step",
                        path.display()
                    )));
                }
                if step > stream.len() {
                    return Err(Error::Config(format!("{} is beyond the configured stream", path.display())));
                }
                let mut trainer = Trainer::restore(config.method, train_config.clone(), ckpt.to_model()?, step)?;
                let report = MetricsReport::read_csv(&metrics_path)?;
                let kept: Vec<MetricEntry> = report.entries.into_iter().filter(|e| e.step <= step).collect();
                let epochs_done = step * train_config.epochs;
                let losses: Vec<String> = fs::read_to_string(&losses_path)
                    .map_err(|e| Error::io(&losses_path, e))?
                    .lines()
                    .skip(1)
                    .filter(|l| l.split(',').nth(1).and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epochs_done))
                    .map(str::to_owned)
                    .collect();
                trainer.set_iteration(losses.len());
                reset_file(&losses_path, LOSS_HEADER, &losses)?;
                let rows: Vec<String> = kept
                    .iter()
                    .map(|e| {
                        let mut buf = Vec::new();
                        MetricsReport::write_row(&mut buf, e).expect("in-memory write");
                        String::from_utf8(buf).expect("utf-8").trim_end().to_owned()
                    })
                    .collect();
                reset_file(&metrics_path, METRICS_HEADER, &rows)?;
                log::info!("resuming after step {step}");
                (trainer, kept)
            }
            None => {
                let trainer = Trainer::new(config.method, train_config.clone(), stream.input_dim())?;
                reset_file(&metrics_path, METRICS_HEADER, &[])?;
                reset_file(&losses_path, LOSS_HEADER, &[])?;
                (trainer, Vec::new())
            }
        };
        let config_path = dir.join(CONFIG_FILE);
        fs::write(&config_path, config.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

        let mut observer = FileObserver {
            dir: dir.clone(),
            seed: config.seed,
            method: config.method.as_str().into(),
            diagnostics: train_config.diagnostics,
        };
        let mut outcome = run_stream(stream, trainer, &mut observer)?;
        let mut report = MetricsReport { entries: kept_metrics };
        report.entries.append(&mut outcome.report.entries);
        outcome.report = report;

        if let Some(last) = outcome.report.last_step() {
            let agg = outcome.report.final_aggregates()?;
            let mut w = append(&metrics_path)?;
            MetricsReport::write_aggregates(&mut w, last, &agg).map_err(|e| Error::io(&metrics_path, e))?;
            w.flush().map_err(|e| Error::io(&metrics_path, e))?;
        }
        Ok(outcome)
    }
}
