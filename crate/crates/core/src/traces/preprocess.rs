//! Training-time preprocessing: dequantization, magnitude compression,
//! standardization, train/validation split and auxiliary padding.
//!
//! Raw values stay untouched in trace files; everything here is recomputed
//! when a model is fitted and the parameters travel with the model so that
//! values can be mapped between raw units and model space in both directions.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AbstractType, Dimension, TraceDataset, DEFAULT_MIN_ROWS};
use crate::error::{Error, Result};
use crate::seed;

/// `sign(x) * ln(1 + |x|)`.
pub fn compress(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Inverse of [`compress`].
pub fn decompress(y: f64) -> f64 {
    y.signum() * y.abs().exp_m1()
}

/// Adds uniform `[0, 1)` noise to every integer column.
pub fn dequantize(dataset: &TraceDataset, seed: u64) -> TraceDataset {
    let mut out = dataset.clone();
    let mut rng = seed::rng_for(seed, &["dequantize", &dataset.executable_id]);
    let int_cols: Vec<usize> = dataset
        .columns
        .iter()
        .enumerate()
        .filter(|(_, d)| d.abstract_type == AbstractType::Integer)
        .map(|(j, _)| j)
        .collect();
    for mut row in out.rows.rows_mut() {
        for &j in &int_cols {
            row[j] += rng.random::<f64>();
        }
    }
    out
}

/// Outcome of [`standardize`]: per retained column `(mean, sd)` and the
/// names of columns removed for having zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizeReport {
    pub stats: Vec<(f64, f64)>,
    pub dropped: Vec<String>,
}

/// Sample mean and sample standard deviation (n - 1 denominator).
fn column_stats(col: ndarray::ArrayView1<f64>) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Scales every column to zero mean and unit sample deviation. Constant
/// columns are dropped and listed in the report.
pub fn standardize(dataset: &TraceDataset) -> Result<(TraceDataset, StandardizeReport)> {
    if dataset.n_rows() < 2 {
        return Err(Error::TooFewRows {
            exec: dataset.executable_id.clone(),
            rows: dataset.n_rows(),
            min: 2,
        });
    }
    let mut keep = Vec::new();
    let mut stats = Vec::new();
    let mut dropped = Vec::new();
    for (j, d) in dataset.columns.iter().enumerate() {
        let (mean, sd) = column_stats(dataset.rows.column(j));
        if sd > 0.0 && sd.is_finite() {
            keep.push(j);
            stats.push((mean, sd));
        } else {
            dropped.push(d.name.clone());
        }
    }
    if keep.is_empty() {
        return Err(Error::AllColumnsConstant(dataset.executable_id.clone()));
    }
    let mut rows = dataset.rows.select(Axis(1), &keep);
    for (mut col, (mean, sd)) in rows.axis_iter_mut(Axis(1)).zip(&stats) {
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    let out = TraceDataset {
        executable_id: dataset.executable_id.clone(),
        columns: keep.iter().map(|&j| dataset.columns[j].clone()).collect(),
        rows,
    };
    Ok((out, StandardizeReport { stats, dropped }))
}

/// How one retained column maps between raw units and model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub dim: Dimension,
    pub dequantize: bool,
    pub compress: bool,
    pub mean: f64,
    pub sd: f64,
}

impl ColumnSpec {
    /// Raw (possibly dequantized) value to model space.
    pub fn encode(&self, raw: f64) -> f64 {
        let f = if self.compress { compress(raw) } else { raw };
        (f - self.mean) / self.sd
    }

    /// Model space to continuous raw units.
    pub fn decode(&self, v: f64) -> f64 {
        let f = v * self.sd + self.mean;
        if self.compress {
            decompress(f)
        } else {
            f
        }
    }

    /// Log of `|d encode / d raw|` at `raw`.
    pub fn log_jacobian(&self, raw: f64) -> f64 {
        let c = if self.compress {
            -(1.0 + raw.abs()).ln()
        } else {
            0.0
        };
        c - self.sd.ln()
    }

    /// Continuous raw value back to the observed domain (floors dequantized
    /// integers).
    pub fn quantize(&self, raw: f64) -> f64 {
        if self.dequantize {
            raw.floor()
        } else {
            raw
        }
    }
}

/// Everything needed to move between raw rows and a model's input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub columns: Vec<ColumnSpec>,
    pub dropped: Vec<String>,
    /// Independent unit-Gaussian padding columns appended after `columns`.
    pub aux_dims: usize,
}

impl Preprocessing {
    /// `n` float columns already in model space (`x0` is an input, the rest
    /// outputs).
    pub fn identity(n: usize) -> Self {
        let columns = (0..n)
            .map(|i| {
                let source = if i == 0 {
                    super::DimSource::Parameter
                } else {
                    super::DimSource::ReturnValue
                };
                ColumnSpec {
                    dim: Dimension::new(&format!("x{i}"), source, AbstractType::Float),
                    dequantize: false,
                    compress: false,
                    mean: 0.0,
                    sd: 1.0,
                }
            })
            .collect();
        Self {
            columns,
            dropped: Vec::new(),
            aux_dims: 0,
        }
    }

    /// Modeled (non-auxiliary) dimension count.
    pub fn modeled_dims(&self) -> usize {
        self.columns.len()
    }

    pub fn total_dims(&self) -> usize {
        self.columns.len() + self.aux_dims
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.dim.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub min_rows: usize,
    /// Rows beyond this are subsampled uniformly before splitting.
    pub max_rows: usize,
    pub valid_fraction: f64,
    pub dequantize: bool,
    pub compress_integers: bool,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            min_rows: DEFAULT_MIN_ROWS,
            max_rows: 4096,
            valid_fraction: 0.1,
            dequantize: true,
            compress_integers: true,
        }
    }
}

/// Standardized training and validation matrices plus their preprocessing.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub executable_id: String,
    pub train: Array2<f64>,
    pub valid: Array2<f64>,
    pub preprocessing: Preprocessing,
}

impl Prepared {
    /// Wraps data that is already in model space (float columns, no
    /// transforms). Used for synthetic densities.
    pub fn from_standardized(
        id: &str,
        columns: Vec<Dimension>,
        train: Array2<f64>,
        valid: Array2<f64>,
    ) -> Self {
        let columns = columns
            .into_iter()
            .map(|dim| ColumnSpec {
                dim,
                dequantize: false,
                compress: false,
                mean: 0.0,
                sd: 1.0,
            })
            .collect();
        Self {
            executable_id: id.to_string(),
            train,
            valid,
            preprocessing: Preprocessing {
                columns,
                dropped: Vec::new(),
                aux_dims: 0,
            },
        }
    }

    /// Full preprocessing of a raw dataset: drop constant columns, subsample,
    /// split, dequantize and compress integer columns, standardize on the
    /// training split, and pad single-column data with one auxiliary
    /// dimension.
    pub fn from_dataset(dataset: &TraceDataset, cfg: &PrepareConfig, seed: u64) -> Result<Self> {
        let id = dataset.executable_id.as_str();
        if dataset.n_rows() < cfg.min_rows.max(2) {
            return Err(Error::TooFewRows {
                exec: id.to_string(),
                rows: dataset.n_rows(),
                min: cfg.min_rows.max(2),
            });
        }
        if !(0.0..1.0).contains(&cfg.valid_fraction) {
            return Err(Error::Config(format!(
                "valid_fraction {} outside [0, 1)",
                cfg.valid_fraction
            )));
        }

        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for (j, d) in dataset.columns.iter().enumerate() {
            let col = dataset.rows.column(j);
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                dropped.push(d.name.clone());
            } else {
                keep.push(j);
            }
        }
        if keep.is_empty() {
            return Err(Error::AllColumnsConstant(id.to_string()));
        }

        let mut rng = seed::rng_for(seed, &["prepare", id]);
        let mut order: Vec<usize> = (0..dataset.n_rows()).collect();
        order.shuffle(&mut rng);
        order.truncate(cfg.max_rows.max(cfg.min_rows));
        let n_valid = ((order.len() as f64) * cfg.valid_fraction).round() as usize;
        let (valid_idx, train_idx) = order.split_at(n_valid);

        let specs: Vec<(usize, bool, bool)> = keep
            .iter()
            .map(|&j| {
                let int = dataset.columns[j].abstract_type == AbstractType::Integer;
                (j, int && cfg.dequantize, int && cfg.compress_integers)
            })
            .collect();

        let features = |idx: &[usize], rng: &mut seed::Rng| -> Array2<f64> {
            let mut m = Array2::zeros((idx.len(), specs.len()));
            for (r, &i) in idx.iter().enumerate() {
                for (c, &(j, deq, comp)) in specs.iter().enumerate() {
                    let mut v = dataset.rows[[i, j]];
                    if deq {
                        v += rng.random::<f64>();
                    }
                    m[[r, c]] = if comp { compress(v) } else { v };
                }
            }
            m
        };
        let mut train = features(train_idx, &mut rng);
        let mut valid = features(valid_idx, &mut rng);

        let mut columns = Vec::with_capacity(specs.len());
        for (c, &(j, deq, comp)) in specs.iter().enumerate() {
            let (mean, sd) = column_stats(train.column(c));
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "standardizing column `{}` of `{id}`",
                    dataset.columns[j].name
                )));
            }
            train.column_mut(c).mapv_inplace(|v| (v - mean) / sd);
            valid.column_mut(c).mapv_inplace(|v| (v - mean) / sd);
            columns.push(ColumnSpec {
                dim: dataset.columns[j].clone(),
                dequantize: deq,
                compress: comp,
                mean,
                sd,
            });
        }

        let aux_dims = usize::from(columns.len() == 1);
        if aux_dims > 0 {
            train = pad_aux(&train, &mut rng);
            valid = pad_aux(&valid, &mut rng);
        }

        Ok(Self {
            executable_id: id.to_string(),
            train,
            valid,
            preprocessing: Preprocessing {
                columns,
                dropped,
                aux_dims,
            },
        })
    }
}

fn pad_aux(m: &Array2<f64>, rng: &mut seed::Rng) -> Array2<f64> {
    let mut out = Array2::zeros((m.nrows(), m.ncols() + 1));
    out.slice_mut(ndarray::s![.., ..m.ncols()]).assign(m);
    for v in out.column_mut(m.ncols()).iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::DimSource;
    use ndarray::array;
    use proptest::prelude::*;

    fn ds(rows: Array2<f64>, types: &[AbstractType]) -> TraceDataset {
        let columns = types
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let src = if i == 0 {
                    DimSource::Parameter
                } else {
                    DimSource::ReturnValue
                };
                Dimension::new(&format!("c{i}"), src, *t)
            })
            .collect();
        TraceDataset {
            executable_id: "x".into(),
            columns,
            rows,
        }
    }

    #[test]
    fn standardize_three_points_uses_sample_deviation() {
        let d = ds(array![[1.0], [2.0], [3.0]], &[AbstractType::Float]);
        let (out, rep) = standardize(&d).unwrap();
        assert_eq!(rep.stats, vec![(2.0, 1.0)]);
        assert_eq!(out.rows.column(0).to_vec(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_column_is_dropped_and_reported() {
        let d = ds(
            array![[1.0, 4.0], [2.0, 4.0], [3.0, 4.0]],
            &[AbstractType::Float, AbstractType::Float],
        );
        let (out, rep) = standardize(&d).unwrap();
        assert_eq!(rep.dropped, vec!["c1".to_string()]);
        assert_eq!(out.columns.len(), 1);
    }

    #[test]
    fn all_constant_is_an_error() {
        let d = ds(array![[4.0], [4.0], [4.0]], &[AbstractType::Float]);
        assert!(matches!(standardize(&d), Err(Error::AllColumnsConstant(_))));
    }

    #[test]
    fn dequantize_only_touches_integers_and_floors_back() {
        let rows = Array2::from_shape_fn((200, 2), |(i, j)| (i * (j + 1)) as f64);
        let d = ds(rows.clone(), &[AbstractType::Integer, AbstractType::Float]);
        let q = dequantize(&d, 3);
        assert_eq!(q.rows.column(1), rows.column(1));
        for (a, b) in q.rows.column(0).iter().zip(rows.column(0)) {
            assert!(*a >= *b && *a < *b + 1.0);
            assert_eq!(a.floor(), *b);
        }
        assert_eq!(dequantize(&d, 3), q);
        assert_ne!(dequantize(&d, 4), q);
    }

    #[test]
    fn compress_inverts() {
        for x in [-1e9, -3.5, -0.0, 0.0, 0.25, 5.0, 479001600.0] {
            let y = decompress(compress(x));
            assert!((y - x).abs() <= 1e-12 * x.abs().max(1.0), "{x} -> {y}");
        }
    }

    #[test]
    fn prepare_pads_single_column_and_records_dropped() {
        let rows = Array2::from_shape_fn((300, 2), |(i, j)| if j == 0 { i as f64 } else { 7.0 });
        let d = ds(rows, &[AbstractType::Integer, AbstractType::Integer]);
        let p = Prepared::from_dataset(&d, &PrepareConfig::default(), 1).unwrap();
        assert_eq!(p.preprocessing.dropped, vec!["c1".to_string()]);
        assert_eq!(p.preprocessing.aux_dims, 1);
        assert_eq!(p.train.ncols(), 2);
        assert_eq!(p.train.nrows() + p.valid.nrows(), 300);
        assert_eq!(p.valid.nrows(), 30);
    }

    #[test]
    fn prepare_rejects_small_datasets() {
        let rows = Array2::from_shape_fn((50, 2), |(i, j)| (i + j) as f64);
        let d = ds(rows, &[AbstractType::Integer, AbstractType::Integer]);
        assert!(matches!(
            Prepared::from_dataset(&d, &PrepareConfig::default(), 1),
            Err(Error::TooFewRows { .. })
        ));
    }

    proptest! {
        #[test]
        fn standardize_moments_and_inverse(
            xs in prop::collection::vec(-1e3f64..1e3, 3..60),
        ) {
            let n = xs.len();
            prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-6));
            let d = ds(Array2::from_shape_vec((n, 1), xs.clone()).unwrap(), &[AbstractType::Float]);
            let (out, rep) = standardize(&d).unwrap();
            let (m, s) = column_stats(out.rows.column(0));
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((s - 1.0).abs() < 1e-9);
            let (mean, sd) = rep.stats[0];
            for (z, x) in out.rows.column(0).iter().zip(&xs) {
                prop_assert!((z * sd + mean - x).abs() < 1e-9);
            }
        }
    }
}
