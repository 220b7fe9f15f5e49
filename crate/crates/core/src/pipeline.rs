//! End-to-end commands: generate traces, train models, detect clones and
//! run the experiment grid. The `semclone` binary is a thin front end over
//! these functions.
//!
//! Layout under the output directory:
//!
//! ```text
//! traces/<subject>.jsonl            events
//! traces/<subject>.profiles.jsonl   executable profiles
//! models/<executable>.flow          trained models
//! models/training.json              training summary
//! reports/verdicts.{csv,json}       detection report
//! reports/experiment.{csv,json}     experiment grid
//! reports/<command>.config.json     effective configuration
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, SubjectSpec, TriggerConfig};
use crate::detector::{self, DetectionReport, DetectorConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, ExperimentReport, GridSpec, GroundTruth};
use crate::flow::{self, FlowModel, TrainConfig};
use crate::seed;
use crate::traces::{self, PrepareConfig, Prepared, TraceDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out: PathBuf,
    /// Defaults to `<out>/traces`.
    pub traces_dir: Option<PathBuf>,
    /// Defaults to `<out>/models`.
    pub models_dir: Option<PathBuf>,
    /// Defaults to `<out>/reports`.
    pub reports_dir: Option<PathBuf>,
    /// Global seed; every other seed is derived from it.
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub jobs: Option<usize>,
    /// Subject names, or `all`.
    pub subjects: Vec<String>,
    /// Executable ids to train; empty trains all.
    pub only: Vec<String>,
    pub corpus: TriggerConfig,
    pub prepare: PrepareConfig,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub grid: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("semclone-out"),
            traces_dir: None,
            models_dir: None,
            reports_dir: None,
            seed: 0,
            jobs: None,
            subjects: vec!["all".into()],
            only: Vec::new(),
            corpus: TriggerConfig::default(),
            prepare: PrepareConfig::default(),
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            grid: GridSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.traces_dir.clone().unwrap_or_else(|| self.out.join("traces"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.models_dir.clone().unwrap_or_else(|| self.out.join("models"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.reports_dir.clone().unwrap_or_else(|| self.out.join("reports"))
    }

    /// Copy with every nested seed derived from the global one.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.corpus.seed = seed::derive(self.seed, &["corpus"]);
        c.detector.seed = seed::derive(self.seed, &["detect"]);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.grid.validate()?;
        if self.corpus.invocations == 0 {
            return Err(Error::Config("invocations must be positive".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be positive".into()));
        }
        Ok(())
    }

    fn selected_subjects(&self) -> Result<Vec<SubjectSpec>> {
        corpus::select_subjects(&self.subjects)
    }

    /// Runs `f` on a pool of `jobs` workers.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.jobs {
            b = b.num_threads(n);
        }
        let pool = b
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }

    /// Writes the effective configuration next to a command's reports.
    pub fn echo(&self, command: &str) -> Result<PathBuf> {
        let dir = self.reports_dir();
        create_dir(&dir)?;
        let path = dir.join(format!("{command}.config.json"));
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn trace_path(dir: &Path, subject: &str) -> PathBuf {
    dir.join(format!("{subject}.jsonl"))
}

pub fn profile_path(dir: &Path, subject: &str) -> PathBuf {
    dir.join(format!("{subject}.profiles.jsonl"))
}

pub fn model_path(dir: &Path, exec: &str) -> PathBuf {
    dir.join(format!("{exec}.flow"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSubject {
    pub subject: String,
    pub events: usize,
    pub trace_file: PathBuf,
    pub profile_file: PathBuf,
    pub executables: Vec<String>,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<GeneratedSubject>> {
    cfg.validate()?;
    let eff = cfg.effective();
    let subjects = eff.selected_subjects()?;
    let dir = eff.traces_dir();
    create_dir(&dir)?;
    let out = eff.install(|| {
        subjects
            .par_iter()
            .map(|s| {
                let events = corpus::run_subject(s, &eff.corpus)?;
                let trace_file = trace_path(&dir, &s.name);
                let profile_file = profile_path(&dir, &s.name);
                traces::write_traces(&trace_file, &events)?;
                traces::write_profiles(&profile_file, &s.profiles())?;
                Ok(GeneratedSubject {
                    subject: s.name.clone(),
                    events: events.len(),
                    trace_file,
                    profile_file,
                    executables: s.profiles().into_iter().map(|p| p.id).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    eff.echo("generate")?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEntry {
    pub executable: String,
    pub rows: usize,
    pub dims: usize,
    pub aux_dims: usize,
    pub dropped: Vec<String>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub initial_valid_nll: f64,
    pub best_valid_nll: f64,
    pub seconds: f64,
    pub model_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainFailure {
    pub executable: String,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub trained: Vec<TrainEntry>,
    pub failed: Vec<TrainFailure>,
}

/// Loads the datasets of every selected executable.
fn load_datasets(cfg: &RunConfig) -> Result<Vec<TraceDataset>> {
    let dir = cfg.traces_dir();
    let mut out = Vec::new();
    for s in cfg.selected_subjects()? {
        let wanted: Vec<_> = s
            .profiles()
            .into_iter()
            .filter(|p| cfg.only.is_empty() || cfg.only.contains(&p.id))
            .collect();
        if wanted.is_empty() {
            continue;
        }
        let path = trace_path(&dir, &s.name);
        if !path.exists() {
            return Err(Error::Missing {
                what: format!("traces of executable `{}`", wanted[0].id),
                path,
            });
        }
        let events = traces::read_traces(&path, &s.profiles())?;
        for p in &wanted {
            let ds = TraceDataset::from_events(p, &events)?;
            if ds.n_rows() == 0 {
                return Err(Error::Missing {
                    what: format!("traces of executable `{}`", p.id),
                    path,
                });
            }
            out.push(ds);
        }
    }
    if let Some(missing) = cfg
        .only
        .iter()
        .find(|id| !out.iter().any(|d| &d.executable_id == *id))
    {
        return Err(Error::UnknownExecutable(missing.clone()));
    }
    Ok(out)
}

fn train_one(ds: &TraceDataset, cfg: &RunConfig, dir: &Path) -> Result<TrainEntry> {
    let t = Instant::now();
    let id = ds.executable_id.as_str();
    let prepared = Prepared::from_dataset(ds, &cfg.prepare, seed::derive(cfg.seed, &["prepare", id]))?;
    let model = flow::train(&prepared, &cfg.train, seed::derive(cfg.seed, &["train", id]))?;
    let model_file = model_path(dir, id);
    flow::save(&model, &model_file)?;
    Ok(TrainEntry {
        executable: id.to_string(),
        rows: ds.n_rows(),
        dims: model.modeled_dims(),
        aux_dims: model.preprocessing.aux_dims,
        dropped: model.preprocessing.dropped.clone(),
        epochs: model.training.epochs_run,
        best_epoch: model.training.best_epoch,
        initial_valid_nll: model.training.initial_valid_nll,
        best_valid_nll: model.training.best_valid_nll,
        seconds: t.elapsed().as_secs_f64(),
        model_file,
    })
}

/// Trains one model per selected executable. Failures of single
/// executables are collected, not fatal.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cmd_train_with(cfg, &|_| {})
}

pub fn cmd_train_with(cfg: &RunConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<TrainSummary> {
    cfg.validate()?;
    let eff = cfg.effective();
    let datasets = load_datasets(&eff)?;
    let dir = eff.models_dir();
    create_dir(&dir)?;
    let results: Vec<(String, Result<TrainEntry>)> = eff.install(|| {
        datasets
            .par_iter()
            .map(|ds| {
                let r = train_one(ds, &eff, &dir);
                match &r {
                    Ok(e) => progress(&format!(
                        "{}: {} rows, {} epochs, valid nll {:.4} ({:.1}s)",
                        e.executable, e.rows, e.epochs, e.best_valid_nll, e.seconds
                    )),
                    Err(err) => progress(&format!("{}: failed: {err}", ds.executable_id)),
                }
                (ds.executable_id.clone(), r)
            })
            .collect()
    })?;
    let mut summary = TrainSummary::default();
    for (exec, r) in results {
        match r {
            Ok(e) => summary.trained.push(e),
            Err(e) => summary.failed.push(TrainFailure {
                executable: exec,
                exit_code: e.exit_code(),
                error: e.to_string(),
            }),
        }
    }
    let path = dir.join("training.json");
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    eff.echo("train")?;
    Ok(summary)
}

/// Loads the models of every executable of the selected subjects.
pub fn load_models(cfg: &RunConfig) -> Result<Vec<FlowModel>> {
    let dir = cfg.models_dir();
    let mut models = Vec::new();
    for s in cfg.selected_subjects()? {
        for p in s.profiles() {
            let path = model_path(&dir, &p.id);
            if !path.exists() {
                return Err(Error::Missing {
                    what: format!("model of executable `{}`", p.id),
                    path,
                });
            }
            models.push(flow::load(&path)?);
        }
    }
    Ok(models)
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<DetectionReport> {
    cfg.validate()?;
    let eff = cfg.effective();
    let models = load_models(&eff)?;
    let report = eff.install(|| detector::detect_all(&models, &eff.detector))??;
    let dir = eff.reports_dir();
    create_dir(&dir)?;
    report.write_csv(&dir.join("verdicts.csv"))?;
    report.write_json(&dir.join("verdicts.json"))?;
    eff.echo("detect")?;
    Ok(report)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<ExperimentReport> {
    cmd_evaluate_with(cfg, &|_| {})
}

pub fn cmd_evaluate_with(cfg: &RunConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<ExperimentReport> {
    cfg.validate()?;
    let eff = cfg.effective();
    let models = load_models(&eff)?;
    let truth = GroundTruth::corpus();
    let report = eff.install(|| {
        evaluation::run_experiment_grid_with(&models, &eff.grid, &eff.detector, &truth, progress)
    })??;
    if !report.is_consistent() {
        return Err(Error::Inconsistent(
            "experiment metrics do not recompute from their counts".into(),
        ));
    }
    let dir = eff.reports_dir();
    create_dir(&dir)?;
    report.write_csv(&dir.join("experiment.csv"))?;
    report.write_json(&dir.join("experiment.json"))?;
    eff.echo("evaluate")?;
    Ok(report)
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else {
        format!("{v:.2}")
    }
}

/// Renders the reports found in the reports directory as text tables and
/// writes them to `summary.txt`.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let dir = cfg.reports_dir();
    let mut out = String::new();
    let experiment = dir.join("experiment.json");
    let verdicts = dir.join("verdicts.json");
    if !experiment.exists() && !verdicts.exists() {
        return Err(Error::Missing {
            what: "detection or experiment report (run detect or evaluate first)".into(),
            path: dir,
        });
    }
    if experiment.exists() {
        let r = ExperimentReport::read_json(&experiment)?;
        if !r.is_consistent() {
            return Err(Error::Inconsistent(format!(
                "{}: metrics do not recompute from counts",
                experiment.display()
            )));
        }
        out.push_str(&format!(
            "Experiment grid, median over {} replicate(s)\n\n",
            r.grid.seeds
        ));
        out.push_str("pooling  type1  particles   tp  fp  tn  fn  precision  recall  bal.acc\n");
        for m in &r.medians {
            out.push_str(&format!(
                "{:<7} {:>6} {:>10} {:>4} {:>3} {:>3} {:>3} {:>10} {:>7} {:>8}\n",
                m.pooling.as_str(),
                m.alpha,
                m.particles,
                m.counts.tp,
                m.counts.fp,
                m.counts.tn,
                m.counts.fn_,
                fmt_metric(m.precision),
                fmt_metric(m.recall),
                fmt_metric(m.balanced_accuracy)
            ));
        }
        let mean = |f: fn(&evaluation::ExperimentResult) -> f64| {
            let v: Vec<f64> = r.medians.iter().map(f).filter(|v| !v.is_nan()).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        out.push_str(&format!(
            "\naverage precision {:.3}, recall {:.3}, balanced accuracy {:.3}\n",
            mean(|m| m.precision),
            mean(|m| m.recall),
            mean(|m| m.balanced_accuracy)
        ));
        if !r.skipped.is_empty() {
            out.push_str(&format!("{} pair(s) without a valid matching\n", r.skipped.len()));
        }
    }
    if verdicts.exists() {
        let r = DetectionReport::read_json(&verdicts)?;
        let clones: Vec<_> = r.verdicts.iter().filter(|v| v.is_clone()).collect();
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!(
            "Detection ({} pooling, alpha {}, {} particles): {} of {} pairs accepted as clones\n",
            r.config.pooling,
            r.config.alpha,
            r.config.particles,
            clones.len(),
            r.verdicts.len()
        ));
        let by_pair: BTreeMap<_, _> = clones
            .iter()
            .map(|v| ((v.exec_a.as_str(), v.exec_b.as_str()), v.best.pooled_statistic))
            .collect();
        for ((a, b), s) in by_pair {
            out.push_str(&format!("  {a} ~ {b}  (pooled {s:.3})\n"));
        }
    }
    let path = dir.join("summary.txt");
    fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}
