//! Candidate pairing, cross-wise likelihood evaluation and the clone
//! decision.
//!
//! For a candidate pair `(a, b)` and a dimension matching `k`, the link
//! `a -> b` samples a reference batch from `a`, transfers the matched
//! columns through raw units into `b`'s space, conditions `b` on them and
//! compares per-dimension mean log-likelihoods:
//!
//! ```text
//! lambda_ab = LL_b(conditioned batch) / D_b - LL_a(reference batch) / D_a
//! ```
//!
//! Both links are computed for every matching. Hard pooling accepts when
//! both ratios exceed `ln(alpha / 2)`, soft pooling when their mean exceeds
//! `ln(alpha)`.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand_distr::StandardNormal;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{condition, ConditionSettings, ConditionSpec};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::seed;
use crate::traces::{DimKind, Dimension};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Hard,
    Soft,
}

impl Pooling {
    pub const ALL: [Pooling; 2] = [Pooling::Hard, Pooling::Soft];

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Hard => "hard",
            Pooling::Soft => "soft",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(Pooling::Hard),
            "soft" => Ok(Pooling::Soft),
            _ => Err(Error::Config(format!(
                "unknown pooling `{s}` (expected hard or soft)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub pooling: Pooling,
    /// Total Type-1 error of a pair decision.
    pub alpha: f64,
    pub particles: usize,
    pub max_matchings: usize,
    pub conditioning: ConditionSettings,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Soft,
            alpha: 0.01,
            particles: 100,
            max_matchings: 64,
            conditioning: ConditionSettings::default(),
            seed: 0,
        }
    }
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        validate_alpha(self.alpha)?;
        if self.particles == 0 {
            return Err(Error::Config("particles must be positive".into()));
        }
        if self.max_matchings == 0 {
            return Err(Error::Config("matching cap must be positive".into()));
        }
        self.conditioning.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimPair {
    pub null: usize,
    pub alt: usize,
    pub null_name: String,
    pub alt_name: String,
}

/// A dimension bijection between the modeled columns of two executables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateMatching {
    pub null_model_id: String,
    pub alt_model_id: String,
    pub pairs: Vec<DimPair>,
}

impl CandidateMatching {
    pub fn swapped(&self) -> Self {
        Self {
            null_model_id: self.alt_model_id.clone(),
            alt_model_id: self.null_model_id.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|p| DimPair {
                    null: p.alt,
                    alt: p.null,
                    null_name: p.alt_name.clone(),
                    alt_name: p.null_name.clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `null=alt` pairs joined by `;`.
    pub fn describe(&self) -> String {
        self.pairs
            .iter()
            .map(|p| format!("{}={}", p.null_name, p.alt_name))
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn compatible(a: &Dimension, b: &Dimension) -> bool {
    a.kind == b.kind && a.abstract_type == b.abstract_type
}

/// All injective maps of exactly `k` elements from `a` into `b`, pairs
/// ordered by `a` index.
fn injections(
    a: &[usize],
    b: &[usize],
    k: usize,
    ok: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<(usize, usize)>> {
    fn go(
        a: &[usize],
        b: &[usize],
        k: usize,
        ok: &dyn Fn(usize, usize) -> bool,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        if a.len() < k - cur.len() {
            return;
        }
        let (&first, rest) = a.split_first().expect("non-empty by the length check");
        for (j, &bj) in b.iter().enumerate() {
            if !used[j] && ok(first, bj) {
                used[j] = true;
                cur.push((first, bj));
                go(rest, b, k, ok, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
        go(rest, b, k, ok, used, cur, out);
    }
    let mut out = Vec::new();
    go(a, b, k, ok, &mut vec![false; b.len()], &mut Vec::new(), &mut out);
    out
}

/// Matchings between `dims_a` (null side) and `dims_b` (alt side), largest
/// first, each with at least one input and one output pair, at most `cap`.
pub fn enumerate_matchings(
    id_a: &str,
    dims_a: &[Dimension],
    id_b: &str,
    dims_b: &[Dimension],
    cap: usize,
) -> Vec<CandidateMatching> {
    let of_kind = |dims: &[Dimension], kind| -> Vec<usize> {
        (0..dims.len()).filter(|&i| dims[i].kind == kind).collect()
    };
    let (a_in, a_out) = (of_kind(dims_a, DimKind::Input), of_kind(dims_a, DimKind::Output));
    let (b_in, b_out) = (of_kind(dims_b, DimKind::Input), of_kind(dims_b, DimKind::Output));
    let ok = |i: usize, j: usize| compatible(&dims_a[i], &dims_b[j]);
    let max_in = a_in.len().min(b_in.len());
    let max_out = a_out.len().min(b_out.len());

    let mut out = Vec::new();
    if max_in == 0 || max_out == 0 || cap == 0 {
        return out;
    }
    let in_maps: Vec<_> = (0..=max_in).map(|k| injections(&a_in, &b_in, k, &ok)).collect();
    let out_maps: Vec<_> = (0..=max_out).map(|k| injections(&a_out, &b_out, k, &ok)).collect();
    for size in (2..=max_in + max_out).rev() {
        for ni in (1..=max_in.min(size - 1)).rev() {
            let no = size - ni;
            if no > max_out {
                continue;
            }
            for mi in &in_maps[ni] {
                for mo in &out_maps[no] {
                    let pairs = mi
                        .iter()
                        .chain(mo)
                        .map(|&(i, j)| DimPair {
                            null: i,
                            alt: j,
                            null_name: dims_a[i].name.clone(),
                            alt_name: dims_b[j].name.clone(),
                        })
                        .collect();
                    out.push(CandidateMatching {
                        null_model_id: id_a.to_string(),
                        alt_model_id: id_b.to_string(),
                        pairs,
                    });
                    if out.len() == cap {
                        return out;
                    }
                }
            }
        }
    }
    out
}

/// Matchings over the modeled (non-auxiliary) columns of two models.
pub fn model_matchings(a: &FlowModel, b: &FlowModel, cap: usize) -> Vec<CandidateMatching> {
    let dims = |m: &FlowModel| -> Vec<Dimension> {
        m.preprocessing.columns.iter().map(|c| c.dim.clone()).collect()
    };
    enumerate_matchings(&a.executable_id, &dims(a), &b.executable_id, &dims(b), cap)
}

/// One direction of a cross-wise evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    /// Mean per-particle, per-dimension log-likelihood of the reference
    /// batch under the null model.
    #[serde(with = "crate::float_serde")]
    pub ll_null: f64,
    /// Same statistic of the conditioned batch under the alternative model.
    #[serde(with = "crate::float_serde")]
    pub ll_alt_given_null: f64,
    #[serde(with = "crate::float_serde")]
    pub lambda: f64,
    pub conditioning_converged: bool,
    #[serde(with = "crate::float_serde")]
    pub final_mse: f64,
    pub iterations: usize,
    /// Why the link was rejected outright, if it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl LinkResult {
    fn failed(ll_null: f64, reason: String) -> Self {
        Self {
            ll_null,
            ll_alt_given_null: f64::NEG_INFINITY,
            lambda: f64::NEG_INFINITY,
            conditioning_converged: false,
            final_mse: f64::INFINITY,
            iterations: 0,
            failure: Some(reason),
        }
    }
}

fn mean_per_dim(ll: &ndarray::Array1<f64>, dims: usize) -> f64 {
    ll.mean().unwrap_or(f64::NAN) / dims as f64
}

pub fn evaluate_link(
    m_null: &FlowModel,
    m_alt: &FlowModel,
    k: &CandidateMatching,
    particles: usize,
    settings: &ConditionSettings,
    seed: u64,
) -> Result<LinkResult> {
    if particles == 0 {
        return Err(Error::Config("particles must be positive".into()));
    }
    let (d_null, d_alt) = (m_null.modeled_dims(), m_alt.modeled_dims());
    if k.is_empty() || k.pairs.iter().any(|p| p.null >= d_null || p.alt >= d_alt) {
        return Err(Error::InvalidCondition(format!(
            "matching `{}` does not fit {} and {}",
            k.describe(),
            m_null.executable_id,
            m_alt.executable_id
        )));
    }

    let mut rng = seed::rng_for(seed, &["reference"]);
    let x_null = m_null.sample(particles, &mut rng)?;
    let ll_null = mean_per_dim(&m_null.modeled_log_likelihood(x_null.view())?, d_null);

    // transfer through raw units
    let raw = m_null.decode(x_null.view());
    let alt_cols = &m_alt.preprocessing.columns;
    let target = Array2::from_shape_fn((particles, k.len()), |(r, c)| {
        let p = &k.pairs[c];
        alt_cols[p.alt].encode(raw[[r, p.null]])
    });
    if target.iter().any(|v| !v.is_finite()) {
        return Ok(LinkResult::failed(ll_null, "transferred values overflow".into()));
    }
    let alt_dims: Vec<usize> = k.pairs.iter().map(|p| p.alt).collect();

    let (data, converged, final_mse, iterations) = if alt_dims.len() == d_alt {
        // every modeled column is given; the latent code is f(x) itself
        let mut x = Array2::zeros((particles, m_alt.dim()));
        for (c, &j) in alt_dims.iter().enumerate() {
            x.column_mut(j).assign(&target.column(c));
        }
        for j in d_alt..m_alt.dim() {
            for v in x.column_mut(j) {
                *v = rng.sample(StandardNormal);
            }
        }
        (x, true, 0.0, 0)
    } else {
        let spec = ConditionSpec::new(alt_dims, target, *settings, m_alt.dim())?;
        match condition(m_alt, &spec, seed::derive(seed, &["condition"])) {
            Ok(s) => (s.data, s.converged, s.final_mse, s.iterations_used),
            Err(Error::NonFinite(msg)) => return Ok(LinkResult::failed(ll_null, msg)),
            Err(e) => return Err(e),
        }
    };

    let ll_alt = match m_alt.modeled_log_likelihood(data.view()) {
        Ok(ll) => mean_per_dim(&ll, d_alt),
        Err(Error::NonFinite(msg)) => return Ok(LinkResult::failed(ll_null, msg)),
        Err(e) => return Err(e),
    };
    let lambda = if converged && ll_alt.is_finite() && ll_null.is_finite() {
        ll_alt - ll_null
    } else {
        f64::NEG_INFINITY
    };
    Ok(LinkResult {
        ll_null,
        ll_alt_given_null: ll_alt,
        lambda,
        conditioning_converged: converged,
        final_mse,
        iterations,
        failure: (!converged).then(|| "conditioning did not converge".to_string()),
    })
}

/// Critical value of the pooled statistic.
pub fn threshold(pooling: Pooling, alpha: f64) -> f64 {
    match pooling {
        Pooling::Hard => (alpha / 2.0).ln(),
        Pooling::Soft => alpha.ln(),
    }
}

/// Pooled statistic, critical value and decision for two link ratios.
/// Hard pooling pools by the minimum, soft pooling by the mean.
pub fn pool(lambda_ab: f64, lambda_ba: f64, pooling: Pooling, alpha: f64) -> (f64, f64, bool) {
    let clean = |l: f64| if l.is_nan() { f64::NEG_INFINITY } else { l };
    let (a, b) = (clean(lambda_ab), clean(lambda_ba));
    let pooled = match pooling {
        Pooling::Hard => a.min(b),
        Pooling::Soft => (a + b) / 2.0,
    };
    let c = threshold(pooling, alpha);
    (pooled, c, pooled > c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneVerdict {
    pub matching: CandidateMatching,
    pub link_ab: LinkResult,
    pub link_ba: LinkResult,
    pub pooling: Pooling,
    pub alpha: f64,
    #[serde(with = "crate::float_serde")]
    pub pooled_statistic: f64,
    pub threshold: f64,
    pub is_clone: bool,
}

pub fn decide(
    matching: CandidateMatching,
    link_ab: LinkResult,
    link_ba: LinkResult,
    pooling: Pooling,
    alpha: f64,
) -> CloneVerdict {
    let (pooled, c, is_clone) = pool(link_ab.lambda, link_ba.lambda, pooling, alpha);
    CloneVerdict {
        matching,
        link_ab,
        link_ba,
        pooling,
        alpha,
        pooled_statistic: pooled,
        threshold: c,
        is_clone,
    }
}

/// Both links of one matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingLinks {
    pub matching: CandidateMatching,
    pub ab: LinkResult,
    pub ba: LinkResult,
}

/// All links of a candidate pair; independent of pooling and alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLinks {
    pub exec_a: String,
    pub exec_b: String,
    pub particles: usize,
    pub links: Vec<MatchingLinks>,
}

/// Decision for one candidate pair: the best-scoring matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub exec_a: String,
    pub exec_b: String,
    pub particles: usize,
    pub best: CloneVerdict,
    pub matchings_evaluated: usize,
    pub matchings_accepted: usize,
}

impl PairVerdict {
    pub fn is_clone(&self) -> bool {
        self.best.is_clone
    }
}

impl PairLinks {
    pub fn verdict(&self, pooling: Pooling, alpha: f64) -> PairVerdict {
        let verdicts: Vec<CloneVerdict> = self
            .links
            .iter()
            .map(|m| decide(m.matching.clone(), m.ab.clone(), m.ba.clone(), pooling, alpha))
            .collect();
        let accepted = verdicts.iter().filter(|v| v.is_clone).count();
        let best = verdicts
            .into_iter()
            .reduce(|best, v| {
                if v.pooled_statistic > best.pooled_statistic {
                    v
                } else {
                    best
                }
            })
            .expect("pairs without matchings are skipped");
        PairVerdict {
            exec_a: self.exec_a.clone(),
            exec_b: self.exec_b.clone(),
            particles: self.particles,
            best,
            matchings_evaluated: self.links.len(),
            matchings_accepted: accepted,
        }
    }
}

/// Evaluates both links of every matching of `(a, b)`. Argument order does
/// not matter: the pair is canonicalized by executable id and its seed is
/// derived from the ids. `None` when no valid matching exists.
pub fn evaluate_pair(
    a: &FlowModel,
    b: &FlowModel,
    particles: usize,
    settings: &ConditionSettings,
    cap: usize,
    seed: u64,
) -> Result<Option<PairLinks>> {
    let (a, b) = if a.executable_id <= b.executable_id {
        (a, b)
    } else {
        (b, a)
    };
    let matchings = model_matchings(a, b, cap);
    if matchings.is_empty() {
        return Ok(None);
    }
    let pair_seed = seed::derive(seed, &["pair", &a.executable_id, &b.executable_id]);
    let links = matchings
        .into_par_iter()
        .enumerate()
        .map(|(i, m)| {
            let tag = i.to_string();
            let ab = evaluate_link(a, b, &m, particles, settings, seed::derive(pair_seed, &[&tag, "ab"]))?;
            let ba = evaluate_link(
                b,
                a,
                &m.swapped(),
                particles,
                settings,
                seed::derive(pair_seed, &[&tag, "ba"]),
            )?;
            Ok(MatchingLinks { matching: m, ab, ba })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| pair_context(e, a, b))?;
    Ok(Some(PairLinks {
        exec_a: a.executable_id.clone(),
        exec_b: b.executable_id.clone(),
        particles,
        links,
    }))
}

fn pair_context(e: Error, a: &FlowModel, b: &FlowModel) -> Error {
    match e {
        Error::InvalidCondition(m) => Error::InvalidCondition(format!(
            "{} vs {}: {m}",
            a.executable_id, b.executable_id
        )),
        Error::NonFinite(m) => {
            Error::NonFinite(format!("{} vs {}: {m}", a.executable_id, b.executable_id))
        }
        e => e,
    }
}

pub fn detect_pair(a: &FlowModel, b: &FlowModel, cfg: &DetectorConfig) -> Result<Option<PairVerdict>> {
    cfg.validate()?;
    Ok(
        evaluate_pair(a, b, cfg.particles, &cfg.conditioning, cfg.max_matchings, cfg.seed)?
            .map(|p| p.verdict(cfg.pooling, cfg.alpha)),
    )
}

/// Links for every unordered pair of `models`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkTable {
    pub particles: usize,
    pub seed: u64,
    pub pairs: Vec<PairLinks>,
    /// Pairs without a valid matching.
    pub skipped: Vec<(String, String)>,
}

impl LinkTable {
    pub fn verdicts(&self, pooling: Pooling, alpha: f64) -> Vec<PairVerdict> {
        self.pairs.iter().map(|p| p.verdict(pooling, alpha)).collect()
    }
}

fn sorted_models(models: &[FlowModel]) -> Result<Vec<&FlowModel>> {
    if models.len() < 2 {
        return Err(Error::Empty(format!(
            "detection needs at least two models, got {}",
            models.len()
        )));
    }
    let mut sorted: Vec<&FlowModel> = models.iter().collect();
    sorted.sort_by(|a, b| a.executable_id.cmp(&b.executable_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].executable_id == w[1].executable_id) {
        return Err(Error::Config(format!(
            "model `{}` given twice",
            w[0].executable_id
        )));
    }
    Ok(sorted)
}

pub fn link_all(
    models: &[FlowModel],
    particles: usize,
    settings: &ConditionSettings,
    cap: usize,
    seed: u64,
) -> Result<LinkTable> {
    let sorted = sorted_models(models)?;
    let mut jobs = Vec::new();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            jobs.push((sorted[i], sorted[j]));
        }
    }
    let results = jobs
        .par_iter()
        .map(|(a, b)| evaluate_pair(a, b, particles, settings, cap, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for ((a, b), r) in jobs.iter().zip(results) {
        match r {
            Some(p) => pairs.push(p),
            None => skipped.push((a.executable_id.clone(), b.executable_id.clone())),
        }
    }
    Ok(LinkTable {
        particles,
        seed,
        pairs,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config: DetectorConfig,
    pub verdicts: Vec<PairVerdict>,
    pub skipped: Vec<(String, String)>,
}

pub fn detect_all(models: &[FlowModel], cfg: &DetectorConfig) -> Result<DetectionReport> {
    cfg.validate()?;
    let table = link_all(
        models,
        cfg.particles,
        &cfg.conditioning,
        cfg.max_matchings,
        cfg.seed,
    )?;
    Ok(DetectionReport {
        config: cfg.clone(),
        verdicts: table.verdicts(cfg.pooling, cfg.alpha),
        skipped: table.skipped,
    })
}

/// One CSV line of a verdict report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub exec_a: String,
    pub exec_b: String,
    pub matching: String,
    pub lambda_ab: f64,
    pub lambda_ba: f64,
    pub pooled: f64,
    pub threshold: f64,
    pub pooling: Pooling,
    pub alpha: f64,
    pub particles: usize,
    pub is_clone: bool,
    pub converged_ab: bool,
    pub converged_ba: bool,
}

impl From<&PairVerdict> for VerdictRow {
    fn from(v: &PairVerdict) -> Self {
        let b = &v.best;
        Self {
            exec_a: v.exec_a.clone(),
            exec_b: v.exec_b.clone(),
            matching: b.matching.describe(),
            lambda_ab: b.link_ab.lambda,
            lambda_ba: b.link_ba.lambda,
            pooled: b.pooled_statistic,
            threshold: b.threshold,
            pooling: b.pooling,
            alpha: b.alpha,
            particles: v.particles,
            is_clone: b.is_clone,
            converged_ab: b.link_ab.conditioning_converged,
            converged_ba: b.link_ba.conditioning_converged,
        }
    }
}

impl DetectionReport {
    pub fn rows(&self) -> Vec<VerdictRow> {
        self.verdicts.iter().map(VerdictRow::from).collect()
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
}

pub(crate) fn csv_io(e: csv::Error, path: &Path) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}
