//! Real-NVP density estimator: a stack of affine coupling layers mapping
//! data to an isotropic unit Gaussian, with exact log-likelihood, sampling,
//! maximum-likelihood training and a versioned binary file format.

mod coupling;
mod io;
mod mlp;
mod train;

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traces::Preprocessing;

pub use coupling::{CouplingCache, CouplingGrads, CouplingLayer};
pub use io::{load, read_model, save, write_model, FORMAT_VERSION, MAGIC};
pub use mlp::{Dense, Mlp};
pub use train::{nll_and_grads, train, Adam, TrainConfig};

/// Isotropic unit Gaussian over `dim` latent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub dim: usize,
}

impl GaussianPrior {
    pub fn ln_density(&self, z: &[f64]) -> f64 {
        let sq: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * self.dim as f64 * (2.0 * PI).ln() - 0.5 * sq
    }

    pub fn ln_density_rows(&self, z: &Array2<f64>) -> Array1<f64> {
        z.rows()
            .into_iter()
            .map(|r| {
                let sq: f64 = r.iter().map(|v| v * v).sum();
                -0.5 * self.dim as f64 * (2.0 * PI).ln() - 0.5 * sq
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.dim), || rng.sample(StandardNormal))
    }
}

/// Network shape of a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowArch {
    pub coupling_layers: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub scale_clamp: f64,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            coupling_layers: 6,
            hidden_units: 64,
            hidden_layers: 2,
            scale_clamp: 3.0,
        }
    }
}

/// Alternating complementary half-masks; layer `l` passes coordinates with
/// `(i + l) % 2 == 0`.
pub fn alternating_masks(dim: usize, layers: usize) -> Vec<Vec<bool>> {
    (0..layers)
        .map(|l| (0..dim).map(|i| (i + l) % 2 == 0).collect())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub initial_valid_nll: f64,
    pub best_valid_nll: f64,
    /// Per epoch: (mean training NLL, validation NLL).
    pub curve: Vec<(f64, f64)>,
}

/// Trained density model of one executable.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub executable_id: String,
    pub layers: Vec<CouplingLayer>,
    pub prior: GaussianPrior,
    pub preprocessing: Preprocessing,
    pub training: TrainingMeta,
}

/// Parameter gradients with the same layout as a model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub layers: Vec<CouplingGrads>,
}

impl FlowGrads {
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| {
                let mut v = g.scale_net.param_slices();
                v.extend(g.translate_net.param_slices());
                v
            })
            .collect()
    }
}

/// Cached forward pass of the whole stack.
pub struct FlowCache {
    layers: Vec<CouplingCache>,
}

impl FlowModel {
    /// Freshly initialized model. Output layers of all networks are zero, so
    /// the model starts as the identity map.
    pub fn init<R: Rng + ?Sized>(
        executable_id: &str,
        preprocessing: Preprocessing,
        arch: &FlowArch,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = preprocessing.total_dims();
        if dim < 2 {
            return Err(Error::Config(format!(
                "flow needs at least 2 dimensions, got {dim}"
            )));
        }
        if arch.coupling_layers == 0 || arch.scale_clamp <= 0.0 {
            return Err(Error::Config(
                "flow needs >= 1 coupling layer and a positive scale clamp".into(),
            ));
        }
        let layers = alternating_masks(dim, arch.coupling_layers)
            .into_iter()
            .map(|m| {
                CouplingLayer::new(m, arch.hidden_units, arch.hidden_layers, arch.scale_clamp, rng)
            })
            .collect();
        Ok(Self {
            executable_id: executable_id.to_string(),
            layers,
            prior: GaussianPrior { dim },
            preprocessing,
            training: TrainingMeta::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim
    }

    /// Modeled dimensions, excluding auxiliary padding.
    pub fn modeled_dims(&self) -> usize {
        self.preprocessing.modeled_dims()
    }

    fn check_input(&self, x: &ArrayView2<f64>, what: &str) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} input")));
        }
        Ok(())
    }

    fn check_output(out: &Array2<f64>, ld: &Array1<f64>, what: &str) -> Result<()> {
        if out.iter().chain(ld.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Data to latent space: `z = f(x)` and per-row `log|det df/dx|`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_input(&x, "forward")?;
        let (z, ld) = self.forward_unchecked(x);
        Self::check_output(&z, &ld, "forward pass")?;
        Ok((z, ld))
    }

    fn forward_unchecked(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let mut h = x.to_owned();
        let mut ld = Array1::zeros(x.nrows());
        for layer in &self.layers {
            let (y, l) = layer.forward(h.view());
            h = y;
            ld += &l;
        }
        (h, ld)
    }

    /// Latent to data space: `x = g(z)`.
    pub fn inverse(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.inverse_with_logdet(z).map(|(x, _)| x)
    }

    /// `x = g(z)` and per-row `log|det dg/dz|`.
    pub fn inverse_with_logdet(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_input(&z, "inverse")?;
        let mut h = z.to_owned();
        let mut ld = Array1::zeros(z.nrows());
        for layer in self.layers.iter().rev() {
            let (x, l) = layer.inverse(h.view());
            h = x;
            ld += &l;
        }
        Self::check_output(&h, &ld, "inverse pass")?;
        Ok((h, ld))
    }

    /// Per-row `ln p_X(x) = ln p_Z(f(x)) + log|det df/dx|` in model space.
    pub fn log_likelihood(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (z, ld) = self.forward(x)?;
        Ok(self.prior.ln_density_rows(&z) + ld)
    }

    /// Log-likelihood of the modeled columns only: the standard-normal
    /// density of auxiliary columns is subtracted out.
    pub fn modeled_log_likelihood(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let mut ll = self.log_likelihood(x)?;
        let m = self.modeled_dims();
        if self.preprocessing.aux_dims > 0 {
            let aux = GaussianPrior {
                dim: self.preprocessing.aux_dims,
            };
            for (v, row) in ll.iter_mut().zip(x.rows()) {
                let tail: Vec<f64> = row.iter().skip(m).copied().collect();
                *v -= aux.ln_density(&tail);
            }
        }
        Ok(ll)
    }

    /// Draws `n` rows `g(z)`, `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let z = self.prior.sample(n, rng);
        self.inverse(z.view())
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, FlowCache) {
        let mut h = x.to_owned();
        let mut ld = Array1::zeros(x.nrows());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, l, c) = layer.forward_cached(h.view());
            h = y;
            ld += &l;
            caches.push(c);
        }
        (h, ld, FlowCache { layers: caches })
    }

    pub fn zero_grads(&self) -> FlowGrads {
        FlowGrads {
            layers: self.layers.iter().map(|l| l.zero_grads()).collect(),
        }
    }

    /// Backpropagates `dz` and a per-row `dlogdet` through the cached
    /// forward pass; returns `dx` and accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &FlowCache,
        dz: Array2<f64>,
        dlogdet: &Array1<f64>,
        grads: &mut FlowGrads,
    ) -> Array2<f64> {
        let mut d = dz;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(&cache.layers[i], &d, dlogdet, &mut grads.layers[i]);
        }
        d
    }

    /// Inverse pass keeping intermediates for [`inverse_backward`](Self::inverse_backward).
    pub fn inverse_cached(&self, z: ArrayView2<f64>) -> (Array2<f64>, FlowCache) {
        let mut h = z.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            let (x, c) = layer.inverse_cached(h.view());
            h = x;
            caches.push(c);
        }
        caches.reverse();
        (h, FlowCache { layers: caches })
    }

    /// Gradient w.r.t. `z` of a loss on `x = g(z)`, given `dL/dx`.
    pub fn inverse_backward(&self, cache: &FlowCache, dx: Array2<f64>) -> Array2<f64> {
        let mut d = dx;
        for (i, layer) in self.layers.iter().enumerate() {
            d = layer.inverse_backward(&cache.layers[i], &d);
        }
        d
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut v = l.scale_net.param_slices();
                v.extend(l.translate_net.param_slices());
                v
            })
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let mut v = l.scale_net.param_slices_mut();
                v.extend(l.translate_net.param_slices_mut());
                v
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Raw rows (profile column order of the modeled columns) to model space.
    /// Auxiliary columns are filled from `rng`.
    pub fn encode_raw<R: Rng + ?Sized>(&self, raw: ArrayView2<f64>, rng: &mut R) -> Array2<f64> {
        let m = self.modeled_dims();
        let mut out = Array2::zeros((raw.nrows(), self.dim()));
        for (mut o, r) in out.rows_mut().into_iter().zip(raw.rows()) {
            for (j, c) in self.preprocessing.columns.iter().enumerate() {
                o[j] = c.encode(r[j]);
            }
            for j in m..self.dim() {
                o[j] = rng.sample(StandardNormal);
            }
        }
        out
    }

    /// Model space to continuous raw units, dropping auxiliary columns.
    pub fn decode(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let m = self.modeled_dims();
        let mut out = Array2::zeros((x.nrows(), m));
        for (mut o, r) in out.rows_mut().into_iter().zip(x.rows()) {
            for (j, c) in self.preprocessing.columns.iter().enumerate() {
                o[j] = c.decode(r[j]);
            }
        }
        out
    }

    /// Like [`decode`](Self::decode) but maps dequantized columns back onto
    /// their integer lattice.
    pub fn decode_quantized(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = self.decode(x);
        for (j, c) in self.preprocessing.columns.iter().enumerate() {
            out.column_mut(j).mapv_inplace(|v| c.quantize(v));
        }
        out
    }

    /// Mean NLL of `x` under the model; infinite if any row is non-finite.
    pub fn mean_nll(&self, x: ArrayView2<f64>) -> f64 {
        if x.nrows() == 0 {
            return f64::NAN;
        }
        let (z, ld) = self.forward_unchecked(x);
        let ll = self.prior.ln_density_rows(&z) + ld;
        -ll.mean_axis(Axis(0)).map_or(f64::NAN, |m| m.into_scalar())
    }
}
