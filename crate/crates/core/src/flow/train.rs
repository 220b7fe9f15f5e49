//! Maximum-likelihood training with mini-batch Adam and early stopping.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{FlowArch, FlowGrads, FlowModel, TrainingMeta};
use crate::error::{Error, Result};
use crate::seed;
use crate::traces::Prepared;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: FlowArch,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub min_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: FlowArch::default(),
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 300,
            patience: 30,
            min_rows: crate::traces::DEFAULT_MIN_ROWS,
        }
    }
}

/// Adam state, one moment buffer per parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Mean negative log-likelihood of `batch` and its parameter gradients.
pub fn nll_and_grads(model: &FlowModel, batch: ArrayView2<f64>) -> (f64, FlowGrads) {
    let n = batch.nrows() as f64;
    let d = model.dim() as f64;
    let (z, logdet, cache) = model.forward_cached(batch);
    let sq = z.map_axis(Axis(1), |r| r.dot(&r));
    let nll = (0.5 * &sq - &logdet).mean().unwrap_or(f64::NAN) + 0.5 * d * (2.0 * PI).ln();
    let dz = &z / n;
    let dlogdet = Array1::from_elem(batch.nrows(), -1.0 / n);
    let mut grads = model.zero_grads();
    model.backward(&cache, dz, &dlogdet, &mut grads);
    (nll, grads)
}

fn select_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Fits a flow to prepared (standardized) data. Returns the parameters with
/// the best validation NLL seen; with `max_epochs == 0` the initial
/// near-identity model is returned.
pub fn train(data: &Prepared, cfg: &TrainConfig, seed: u64) -> Result<FlowModel> {
    let id = data.executable_id.as_str();
    let rows = data.train.nrows() + data.valid.nrows();
    if rows < cfg.min_rows || data.train.nrows() == 0 {
        return Err(Error::TooFewRows {
            exec: id.to_string(),
            rows,
            min: cfg.min_rows,
        });
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let mut rng = seed::rng_for(seed, &["train", id]);
    let mut model = FlowModel::init(id, data.preprocessing.clone(), &cfg.arch, &mut rng)?;
    if data.train.ncols() != model.dim() || data.valid.ncols() != model.dim() {
        return Err(Error::Shape {
            expected: model.dim(),
            got: data.train.ncols(),
        });
    }
    let valid_nll = |m: &FlowModel| {
        if data.valid.nrows() > 0 {
            m.mean_nll(data.valid.view())
        } else {
            m.mean_nll(data.train.view())
        }
    };

    let initial = valid_nll(&model);
    let mut best = model.clone();
    let mut meta = TrainingMeta {
        seed,
        initial_valid_nll: initial,
        best_valid_nll: initial,
        ..TrainingMeta::default()
    };
    let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &shapes);
    let mut order: Vec<usize> = (0..data.train.nrows()).collect();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = select_rows(&data.train, chunk);
            let (nll, grads) = nll_and_grads(&model, batch.view());
            if !nll.is_finite() {
                return Err(Error::Diverged {
                    exec: id.to_string(),
                    epoch,
                    detail: format!("batch NLL {nll}"),
                });
            }
            total += nll * chunk.len() as f64;
            adam.update(model.param_slices_mut(), grads.param_slices());
        }
        let train_nll = total / order.len() as f64;
        let v = valid_nll(&model);
        meta.curve.push((train_nll, v));
        meta.epochs_run = epoch;
        if !v.is_finite() {
            return Err(Error::Diverged {
                exec: id.to_string(),
                epoch,
                detail: format!("validation NLL {v}"),
            });
        }
        if v < meta.best_valid_nll {
            meta.best_valid_nll = v;
            meta.best_epoch = epoch;
            best.layers.clone_from(&model.layers);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    best.training = meta;
    Ok(best)
}
