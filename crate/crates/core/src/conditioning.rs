//! Conditional sampling by latent-code optimization.
//!
//! Each particle starts from a prior draw `z` and follows plain gradient
//! descent on
//!
//! ```text
//! L(z) = mean_c (g(z)_c - t_c)^2 + eta * |z|^2 / D
//! ```
//!
//! where `c` ranges over the conditioned columns. A particle stops moving
//! once its own squared error is within tolerance; the run stops when the
//! batch error is within tolerance or the iteration budget is spent.
//!
//! With a non-zero `stall_window` the run also gives up early when the best
//! batch error, extrapolated geometrically at the rate of the last window,
//! cannot reach the tolerance within the remaining budget.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionSettings {
    pub step_size: f64,
    pub max_iter: usize,
    /// Mean squared error on the conditioned columns (model units).
    pub tolerance: f64,
    /// Weight `eta` of the latent prior term.
    pub prior_weight: f64,
    /// Iterations per decay-rate estimate for the early stall exit; 0 runs
    /// every particle to `max_iter`.
    pub stall_window: usize,
}

impl Default for ConditionSettings {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            max_iter: 500,
            tolerance: 1e-3,
            prior_weight: 1e-3,
            stall_window: 50,
        }
    }
}

impl ConditionSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size > 0.0
            && self.step_size.is_finite()
            && self.tolerance > 0.0
            && self.prior_weight >= 0.0
            && self.prior_weight.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid conditioning settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpec {
    pub conditioned_dims: Vec<usize>,
    /// One row per particle, one column per conditioned dimension, in model
    /// space.
    pub target: Array2<f64>,
    pub settings: ConditionSettings,
}

impl ConditionSpec {
    /// Validates against a model of `dim` columns.
    pub fn new(
        conditioned_dims: Vec<usize>,
        target: Array2<f64>,
        settings: ConditionSettings,
        dim: usize,
    ) -> Result<Self> {
        let spec = Self {
            conditioned_dims,
            target,
            settings,
        };
        spec.validate(dim)?;
        Ok(spec)
    }

    pub fn particles(&self) -> usize {
        self.target.nrows()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let dims = &self.conditioned_dims;
        if dims.is_empty() || dims.len() >= dim {
            return Err(Error::InvalidCondition(format!(
                "{} conditioned dims of {dim}: need a non-empty strict subset",
                dims.len()
            )));
        }
        if let Some(&bad) = dims.iter().find(|&&d| d >= dim) {
            return Err(Error::InvalidCondition(format!(
                "dimension {bad} out of range for a {dim}-column model"
            )));
        }
        let mut sorted = dims.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != dims.len() {
            return Err(Error::InvalidCondition("repeated conditioned dimension".into()));
        }
        if self.target.ncols() != dims.len() {
            return Err(Error::Shape {
                expected: dims.len(),
                got: self.target.ncols(),
            });
        }
        if self.target.nrows() == 0 {
            return Err(Error::InvalidCondition("no particles requested".into()));
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conditioning target".into()));
        }
        self.settings.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedSample {
    /// Full-width decoded batch `g(z)` in model space.
    pub data: Array2<f64>,
    pub final_mse: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Per particle: squared error reached the tolerance.
    pub particle_converged: Vec<bool>,
}

/// Mean over rows and columns of the squared difference.
pub fn mse(x: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    assert_eq!(x.dim(), target.dim(), "mse needs equal shapes");
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    x.iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64
}

fn row_mse(x: &Array2<f64>, row: usize, dims: &[usize], target: &Array2<f64>, trow: usize) -> f64 {
    dims.iter()
        .enumerate()
        .map(|(k, &c)| {
            let d = x[[row, c]] - target[[trow, k]];
            d * d
        })
        .sum::<f64>()
        / dims.len() as f64
}

pub fn condition(model: &FlowModel, spec: &ConditionSpec, seed: u64) -> Result<ConditionedSample> {
    let dim = model.dim();
    spec.validate(dim)?;
    let s = spec.settings;
    let dims = &spec.conditioned_dims;
    let n = spec.particles();
    let mut rng = seed::rng(seed);
    let mut z = model.prior.sample(n, &mut rng);
    let mut data = Array2::zeros((n, dim));
    let mut err = vec![f64::INFINITY; n];
    let mut active: Vec<usize> = (0..n).collect();
    let batch = |err: &[f64]| err.iter().sum::<f64>() / n as f64;
    let mut best = Vec::with_capacity(s.max_iter + 1);

    let mut iterations = 0;
    let data_scale = 2.0 / dims.len() as f64;
    let prior_scale = 2.0 * s.prior_weight / dim as f64;
    loop {
        let za = z.select(Axis(0), &active);
        let (xa, cache) = model.inverse_cached(za.view());
        if xa.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "conditioning of `{}` at iteration {iterations}",
                model.executable_id
            )));
        }
        for (r, &i) in active.iter().enumerate() {
            data.row_mut(i).assign(&xa.row(r));
            err[i] = row_mse(&data, i, dims, &spec.target, i);
        }
        let b = batch(&err);
        if b <= s.tolerance || iterations == s.max_iter {
            break;
        }
        best.push(best.last().map_or(b, |&p: &f64| p.min(b)));
        if stalled(&best, s.stall_window, s.max_iter, s.tolerance) {
            break;
        }
        // particles within tolerance keep their current code
        let mut dx = Array2::zeros(xa.dim());
        let mut moving = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            if err[i] > s.tolerance {
                moving.push(r);
                for (k, &c) in dims.iter().enumerate() {
                    dx[[r, c]] = data_scale * (xa[[r, c]] - spec.target[[i, k]]);
                }
            }
        }
        if moving.is_empty() {
            break;
        }
        let mut dz = model.inverse_backward(&cache, dx);
        dz.scaled_add(prior_scale, &za);
        if dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "conditioning gradient of `{}` at iteration {iterations}",
                model.executable_id
            )));
        }
        for &r in &moving {
            z.row_mut(active[r]).scaled_add(-s.step_size, &dz.row(r));
        }
        active = moving.iter().map(|&r| active[r]).collect();
        iterations += 1;
    }
    let done: Vec<bool> = err.iter().map(|&e| e <= s.tolerance).collect();
    let final_mse = batch(&err);
    Ok(ConditionedSample {
        data,
        final_mse,
        iterations_used: iterations,
        converged: final_mse <= s.tolerance,
        particle_converged: done,
    })
}

/// `best[t]` is the lowest batch error up to iteration `t`.
fn stalled(best: &[f64], window: usize, max_iter: usize, tol: f64) -> bool {
    let t = best.len() - 1;
    if window == 0 || t < window {
        return false;
    }
    let now = best[t];
    let rate = now / best[t - window];
    if !(rate < 1.0) {
        return true;
    }
    let windows_left = (max_iter - t) as f64 / window as f64;
    now * rate.powf(windows_left) > tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{train, TrainConfig};
    use crate::traces::{
        AbstractType, DimSource, Dimension, PrepareConfig, Prepared, Preprocessing, TraceDataset,
    };
    use crate::FlowArch;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn identity(d: usize) -> FlowModel {
        let mut rng = seed::rng(0);
        FlowModel::init("id", Preprocessing::identity(d), &FlowArch::default(), &mut rng).unwrap()
    }

    /// Model of `x2 = 2 x1 + eps`, `x1 ~ N(0, 1)`, `eps ~ N(0, 0.01^2)`.
    fn line_model() -> FlowModel {
        let mut rng = seed::rng(21);
        let eps = Normal::new(0.0, 0.01).unwrap();
        let mut rows = Array2::zeros((3000, 2));
        for mut row in rows.rows_mut() {
            let x1: f64 = rng.sample(rand_distr::StandardNormal);
            row[0] = x1;
            row[1] = 2.0 * x1 + eps.sample(&mut rng);
        }
        let ds = TraceDataset {
            executable_id: "line".into(),
            columns: vec![
                Dimension::new("x1", DimSource::Parameter, AbstractType::Float),
                Dimension::new("x2", DimSource::ReturnValue, AbstractType::Float),
            ],
            rows,
        };
        let prepared = Prepared::from_dataset(&ds, &PrepareConfig::default(), 3).unwrap();
        let cfg = TrainConfig {
            max_epochs: 60,
            ..TrainConfig::default()
        };
        train(&prepared, &cfg, 8).unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mse(a.view(), a.view()), 0.0);
        let b = &a + 1.0;
        assert_eq!(mse(a.view(), b.view()), 1.0);
        assert_eq!(mse(array![[0.0], [2.0]].view(), array![[1.0], [1.0]].view()), 1.0);
    }

    #[test]
    fn spec_validation() {
        let s = ConditionSettings::default();
        assert!(ConditionSpec::new(vec![], Array2::zeros((3, 0)), s, 2).is_err());
        assert!(ConditionSpec::new(vec![0, 1], Array2::zeros((3, 2)), s, 2).is_err());
        assert!(ConditionSpec::new(vec![2], Array2::zeros((3, 1)), s, 2).is_err());
        assert!(ConditionSpec::new(vec![0, 0], Array2::zeros((3, 2)), s, 3).is_err());
        assert!(ConditionSpec::new(vec![0], Array2::zeros((3, 2)), s, 3).is_err());
        assert!(ConditionSpec::new(vec![0], Array2::zeros((0, 1)), s, 3).is_err());
        assert!(ConditionSpec::new(vec![1], Array2::zeros((3, 1)), s, 3).is_ok());
    }

    #[test]
    fn identity_model_hits_target_and_keeps_prior_elsewhere() {
        let m = identity(2);
        let settings = ConditionSettings {
            tolerance: 1e-5,
            ..ConditionSettings::default()
        };
        let spec = ConditionSpec::new(vec![0], Array2::from_elem((1000, 1), 1.7), settings, 2).unwrap();
        let out = condition(&m, &spec, 4).unwrap();
        assert!(out.converged);
        assert!(out.final_mse <= 1e-5);
        for v in out.data.column(0) {
            assert!((v - 1.7).abs() < 1e-2, "{v}");
        }
        let mean1 = out.data.column(1).mean().unwrap();
        assert!(mean1.abs() < 0.1, "{mean1}");
        let var1 = out.data.column(1).var(0.0);
        assert!((var1 - 1.0).abs() < 0.15, "{var1}");
    }

    #[test]
    fn default_tolerance_bounds_error() {
        let m = identity(3);
        let target = Array2::from_shape_fn((50, 2), |(i, k)| (i as f64 / 25.0) - 1.0 + k as f64);
        let spec = ConditionSpec::new(vec![0, 2], target.clone(), ConditionSettings::default(), 3).unwrap();
        let out = condition(&m, &spec, 1).unwrap();
        assert!(out.converged);
        let got = out.data.select(Axis(1), &[0, 2]);
        assert!(mse(got.view(), target.view()) <= 1e-3);
    }

    #[test]
    fn unreachable_target_is_reported() {
        let m = line_model();
        let spec = ConditionSpec::new(
            vec![1],
            Array2::from_elem((20, 1), 1e6),
            ConditionSettings::default(),
            2,
        )
        .unwrap();
        let out = condition(&m, &spec, 2).unwrap();
        assert!(!out.converged);
        assert!(out.final_mse > 1e-3);
        assert!(out.iterations_used < 500);

        let mut full = spec.clone();
        full.settings.stall_window = 0;
        let out = condition(&m, &full, 2).unwrap();
        assert!(!out.converged);
        assert!(out.final_mse > 1e-3);
        assert_eq!(out.iterations_used, 500);
    }

    #[test]
    fn stall_rule() {
        // halving every window from 1.0 reaches 1e-3 in 10 windows
        let halving: Vec<f64> = (0..=10).map(|t| 0.5f64.powi(t)).collect();
        assert!(!stalled(&halving, 1, 20, 1e-3));
        assert!(stalled(&halving, 1, 12, 1e-4));
        assert!(stalled(&[1.0, 1.0], 1, 500, 1e-3));
        assert!(!stalled(&[1.0, 1.0], 0, 500, 1e-3));
        assert!(!stalled(&[1.0, 1.0], 2, 500, 1e-3));
    }

    #[test]
    fn linear_model_imputes_the_joint() {
        let m = line_model();
        let col = |name| m.preprocessing.column_index(name).unwrap();
        let (i1, i2) = (col("x1"), col("x2"));
        let c2 = &m.preprocessing.columns[i2];

        // single target x2 = 4
        let spec = ConditionSpec::new(
            vec![i2],
            Array2::from_elem((200, 1), c2.encode(4.0)),
            ConditionSettings::default(),
            2,
        )
        .unwrap();
        let out = condition(&m, &spec, 9).unwrap();
        assert!(out.converged);
        let raw = m.decode(out.data.view());
        let x1 = raw.column(i1).mean().unwrap();
        assert!((x1 - 2.0).abs() < 0.1, "imputed x1 {x1}");

        // targets spread over the data distribution
        let mut rng = seed::rng(10);
        let targets: Vec<f64> = (0..200)
            .map(|_| 2.0 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let t = Array2::from_shape_fn((200, 1), |(i, _)| c2.encode(targets[i]));
        let spec = ConditionSpec::new(vec![i2], t, ConditionSettings::default(), 2).unwrap();
        let out = condition(&m, &spec, 11).unwrap();
        let raw = m.decode(out.data.view());
        let r = correlation(raw.column(i1).to_vec(), raw.column(i2).to_vec());
        assert!(r >= 0.95, "correlation {r}");
    }

    fn correlation(a: Vec<f64>, b: Vec<f64>) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn deterministic_given_seed() {
        let m = crate::flow::tests::random_model(3, 4, 8, 0.3, 5);
        let spec = ConditionSpec::new(
            vec![1],
            Array2::from_elem((30, 1), 0.5),
            ConditionSettings::default(),
            3,
        )
        .unwrap();
        assert_eq!(condition(&m, &spec, 7).unwrap(), condition(&m, &spec, 7).unwrap());
        assert_ne!(
            condition(&m, &spec, 7).unwrap().data,
            condition(&m, &spec, 8).unwrap().data
        );
    }

    #[test]
    fn prior_weight_pulls_imputed_columns_inward() {
        let m = identity(2);
        let base = ConditionSettings {
            tolerance: 1e-8,
            max_iter: 5000,
            ..ConditionSettings::default()
        };
        let run = |eta: f64| {
            let settings = ConditionSettings {
                prior_weight: eta,
                ..base
            };
            let spec = ConditionSpec::new(vec![0], Array2::from_elem((200, 1), 0.0), settings, 2).unwrap();
            condition(&m, &spec, 3).unwrap()
        };
        let free = run(0.0);
        let pulled = run(1e-3);
        assert!(free.converged && pulled.converged);
        // with eta = 0 the unconditioned coordinate never moves
        let init = m.prior.sample(200, &mut seed::rng(3));
        assert_eq!(free.data.column(1), init.column(1));
        let n_free: f64 = free.data.column(1).iter().map(|v| v * v).sum();
        let n_pulled: f64 = pulled.data.column(1).iter().map(|v| v * v).sum();
        assert!(n_pulled < n_free);
    }
}
