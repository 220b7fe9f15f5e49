//! Ground truth, confusion counts, response metrics and the experiment
//! grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, CloneClass, SubjectSpec};
use crate::detector::{self, csv_io, DetectorConfig, PairVerdict, Pooling, VerdictRow};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::seed;

/// Clone classes per executable. Within class C only top-level sorts are
/// mutually positive, plus the helper pairs declared equivalent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub classes: BTreeMap<String, CloneClass>,
    /// Class-C top-level executables.
    pub top_level: BTreeSet<String>,
    /// Equivalent helper pairs, each ordered by id.
    pub helper_pairs: BTreeSet<(String, String)>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl GroundTruth {
    pub fn from_subjects(subjects: &[SubjectSpec], helper_pairs: &[(&str, &str)]) -> Self {
        let mut classes = BTreeMap::new();
        let mut top_level = BTreeSet::new();
        for s in subjects {
            for e in &s.executables {
                classes.insert(e.profile.id.clone(), s.clone_class);
                if s.clone_class == CloneClass::C && e.top_level {
                    top_level.insert(e.profile.id.clone());
                }
            }
        }
        let helper_pairs = helper_pairs.iter().map(|(a, b)| ordered(a, b)).collect();
        Self {
            classes,
            top_level,
            helper_pairs,
        }
    }

    /// The eight-subject corpus.
    pub fn corpus() -> Self {
        Self::from_subjects(&corpus::list_subjects(), &corpus::equivalent_helpers())
    }

    pub fn is_positive(&self, a: &str, b: &str) -> Result<bool> {
        let class = |id: &str| {
            self.classes
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownExecutable(id.to_string()))
        };
        let (ca, cb) = (class(a)?, class(b)?);
        if ca != cb {
            return Ok(false);
        }
        if ca == CloneClass::C {
            return Ok((self.top_level.contains(a) && self.top_level.contains(b))
                || self.helper_pairs.contains(&ordered(a, b)));
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, positive: bool, predicted: bool) {
        match (positive, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Counts with positive and negative labels exchanged.
    pub fn flipped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `tp / (tp + fp)`; `None` when nothing was predicted positive.
pub fn precision(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fp)
}

/// `tp / (tp + fn)`; `None` without positives.
pub fn recall(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

/// `tn / (tn + fp)`; `None` without negatives.
pub fn specificity(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tn, c.tn + c.fp)
}

pub fn balanced_accuracy(c: &ConfusionCounts) -> Option<f64> {
    Some((recall(c)? + specificity(c)?) / 2.0)
}

/// Rounds to two decimals for comparison with printed tables.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn score(verdicts: &[PairVerdict], truth: &GroundTruth) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for v in verdicts {
        c.add(truth.is_positive(&v.exec_a, &v.exec_b)?, v.is_clone());
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub pooling: Pooling,
    pub alpha: f64,
    pub particles: usize,
    /// `None` for the median over seeds.
    pub seed: Option<u64>,
    pub counts: ConfusionCounts,
    /// `NaN` when undefined, see `undefined`.
    #[serde(with = "crate::float_serde")]
    pub precision: f64,
    #[serde(with = "crate::float_serde")]
    pub recall: f64,
    #[serde(with = "crate::float_serde")]
    pub balanced_accuracy: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl ExperimentResult {
    pub fn new(pooling: Pooling, alpha: f64, particles: usize, seed: Option<u64>, counts: ConfusionCounts) -> Self {
        let mut undefined = Vec::new();
        let mut get = |name: &str, v: Option<f64>| {
            v.unwrap_or_else(|| {
                undefined.push(name.to_string());
                f64::NAN
            })
        };
        let precision = get("precision", precision(&counts));
        let recall = get("recall", recall(&counts));
        let balanced_accuracy = get("balanced_accuracy", balanced_accuracy(&counts));
        Self {
            pooling,
            alpha,
            particles,
            seed,
            counts,
            precision,
            recall,
            balanced_accuracy,
            undefined,
        }
    }

    /// Whether the metrics follow from the counts (to `1e-12`).
    pub fn is_consistent(&self) -> bool {
        let close = |a: f64, b: Option<f64>| match b {
            Some(b) => (a - b).abs() <= 1e-12,
            None => a.is_nan(),
        };
        close(self.precision, precision(&self.counts))
            && close(self.recall, recall(&self.counts))
            && close(self.balanced_accuracy, balanced_accuracy(&self.counts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub pooling: Vec<Pooling>,
    pub alpha: Vec<f64>,
    pub particles: Vec<usize>,
    pub seeds: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            pooling: Pooling::ALL.to_vec(),
            alpha: vec![0.001, 0.01],
            particles: vec![10, 50, 100],
            seeds: 3,
        }
    }
}

impl GridSpec {
    /// Narrows the grid with `key=v1,v2` terms separated by `;`, for example
    /// `particles=10;pooling=soft`.
    pub fn restrict(mut self, spec: &str) -> Result<Self> {
        for term in spec.split(';').map(str::trim).filter(|t| !t.is_empty()) {
            let (key, values) = term
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid term `{term}` is not key=values")))?;
            let values: Vec<&str> = values.split(',').map(str::trim).collect();
            let bad = |v: &str| Error::Config(format!("bad value `{v}` for grid key `{key}`"));
            match key.trim() {
                "pooling" => {
                    self.pooling = values.iter().map(|v| v.parse()).collect::<Result<_>>()?
                }
                "alpha" | "type1" => {
                    self.alpha = values
                        .iter()
                        .map(|v| v.parse::<f64>().map_err(|_| bad(v)))
                        .collect::<Result<_>>()?
                }
                "particles" => {
                    self.particles = values
                        .iter()
                        .map(|v| v.parse::<usize>().map_err(|_| bad(v)))
                        .collect::<Result<_>>()?
                }
                "seeds" => {
                    let [v] = values[..] else {
                        return Err(bad(term));
                    };
                    self.seeds = v.parse().map_err(|_| bad(v))?
                }
                k => {
                    return Err(Error::Config(format!(
                        "unknown grid key `{k}` (pooling, alpha, particles, seeds)"
                    )))
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pooling.is_empty() || self.alpha.is_empty() || self.particles.is_empty() || self.seeds == 0 {
            return Err(Error::Config("experiment grid has an empty axis".into()));
        }
        for &a in &self.alpha {
            detector::validate_alpha(a)?;
        }
        if self.particles.contains(&0) {
            return Err(Error::Config("particles must be positive".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.pooling.len() * self.alpha.len() * self.particles.len()
    }

    /// Detection seed of replicate `i`.
    pub fn seed(base: u64, i: usize) -> u64 {
        seed::derive(base, &["replicate", &i.to_string()])
    }
}

/// Verdicts of one grid cell and replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellVerdicts {
    pub pooling: Pooling,
    pub alpha: f64,
    pub particles: usize,
    pub seed: u64,
    pub verdicts: Vec<VerdictRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub grid: GridSpec,
    pub detector: DetectorConfig,
    /// One result per cell and replicate.
    pub runs: Vec<ExperimentResult>,
    /// Median over replicates, one per cell, in grid order.
    pub medians: Vec<ExperimentResult>,
    pub skipped: Vec<(String, String)>,
    pub verdicts: Vec<CellVerdicts>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.retain(|v| !v.is_nan());
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn median_count(mut xs: Vec<usize>) -> usize {
    xs.sort_unstable();
    xs[(xs.len() - 1) / 2]
}

/// Median of per-replicate metrics; counts are the lower median per field.
pub fn median_result(runs: &[&ExperimentResult]) -> ExperimentResult {
    let first = runs[0];
    let counts = ConfusionCounts {
        tp: median_count(runs.iter().map(|r| r.counts.tp).collect()),
        fp: median_count(runs.iter().map(|r| r.counts.fp).collect()),
        tn: median_count(runs.iter().map(|r| r.counts.tn).collect()),
        fn_: median_count(runs.iter().map(|r| r.counts.fn_).collect()),
    };
    let m = |f: fn(&ExperimentResult) -> f64| median(runs.iter().map(|r| f(r)).collect());
    let precision = m(|r| r.precision);
    let recall = m(|r| r.recall);
    let balanced_accuracy = m(|r| r.balanced_accuracy);
    let undefined = [
        ("precision", precision),
        ("recall", recall),
        ("balanced_accuracy", balanced_accuracy),
    ]
    .iter()
    .filter(|(_, v)| v.is_nan())
    .map(|(n, _)| n.to_string())
    .collect();
    ExperimentResult {
        pooling: first.pooling,
        alpha: first.alpha,
        particles: first.particles,
        seed: None,
        counts,
        precision,
        recall,
        balanced_accuracy,
        undefined,
    }
}

pub fn run_experiment_grid(
    models: &[FlowModel],
    grid: &GridSpec,
    base: &DetectorConfig,
    truth: &GroundTruth,
) -> Result<ExperimentReport> {
    run_experiment_grid_with(models, grid, base, truth, &|_| {})
}

/// Like [`run_experiment_grid`], reporting each finished replicate. Links
/// are computed once per particle count and replicate and shared by all
/// pooling and alpha settings.
pub fn run_experiment_grid_with(
    models: &[FlowModel],
    grid: &GridSpec,
    base: &DetectorConfig,
    truth: &GroundTruth,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<ExperimentReport> {
    grid.validate()?;
    base.validate()?;
    let mut runs = Vec::new();
    let mut verdicts = Vec::new();
    let mut skipped = Vec::new();
    for &particles in &grid.particles {
        for i in 0..grid.seeds {
            let seed = GridSpec::seed(base.seed, i);
            let t = std::time::Instant::now();
            let table = detector::link_all(
                models,
                particles,
                &base.conditioning,
                base.max_matchings,
                seed,
            )?;
            skipped = table.skipped.clone();
            for &pooling in &grid.pooling {
                for &alpha in &grid.alpha {
                    let v = table.verdicts(pooling, alpha);
                    let counts = score(&v, truth)?;
                    runs.push(ExperimentResult::new(pooling, alpha, particles, Some(seed), counts));
                    verdicts.push(CellVerdicts {
                        pooling,
                        alpha,
                        particles,
                        seed,
                        verdicts: v.iter().map(VerdictRow::from).collect(),
                    });
                }
            }
            progress(&format!(
                "particles {particles} replicate {}/{} done in {:.1}s",
                i + 1,
                grid.seeds,
                t.elapsed().as_secs_f64()
            ));
        }
    }
    let key = |r: &ExperimentResult| {
        (
            r.pooling,
            grid.alpha.iter().position(|&a| a == r.alpha),
            grid.particles.iter().position(|&p| p == r.particles),
        )
    };
    runs.sort_by_key(|r| key(r));
    verdicts.sort_by_key(|v| {
        (
            v.pooling,
            grid.alpha.iter().position(|&a| a == v.alpha),
            grid.particles.iter().position(|&p| p == v.particles),
        )
    });
    let medians = runs
        .chunk_by(|a, b| key(a) == key(b))
        .map(|cell| median_result(&cell.iter().collect::<Vec<_>>()))
        .collect();
    Ok(ExperimentReport {
        grid: grid.clone(),
        detector: base.clone(),
        runs,
        medians,
        skipped,
        verdicts,
    })
}

/// One CSV line: a table row plus the replicate seed (`median` for the
/// summary rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub pooling: Pooling,
    pub type1: f64,
    pub particles: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub balanced_accuracy: f64,
    pub seed: String,
}

impl From<&ExperimentResult> for ResultRow {
    fn from(r: &ExperimentResult) -> Self {
        Self {
            pooling: r.pooling,
            type1: r.alpha,
            particles: r.particles,
            tp: r.counts.tp,
            fp: r.counts.fp,
            tn: r.counts.tn,
            fn_: r.counts.fn_,
            precision: r.precision,
            recall: r.recall,
            balanced_accuracy: r.balanced_accuracy,
            seed: r.seed.map_or_else(|| "median".to_string(), |s| s.to_string()),
        }
    }
}

impl ExperimentReport {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.runs
            .iter()
            .chain(&self.medians)
            .map(ResultRow::from)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    /// Every emitted metric recomputes from its counts.
    pub fn is_consistent(&self) -> bool {
        self.runs.iter().all(|r| r.is_consistent())
    }
}
