//! Small fully connected tanh networks with manual backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Affine map `x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Array2::zeros((n_in, n_out)),
            bias: Array1::zeros(n_out),
        }
    }

    /// Glorot-normal weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (n_in + n_out) as f64).sqrt();
        Self::normal(n_in, n_out, std, rng)
    }

    pub fn normal<R: Rng + ?Sized>(n_in: usize, n_out: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array2::from_shape_simple_fn((n_in, n_out), || dist.sample(rng)),
            bias: Array1::zeros(n_out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.dim()
    }
}

/// Hidden layers use tanh; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Inputs seen by each layer during a forward pass.
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `n_in -> hidden x depth -> n_out`; hidden weights Glorot, output
    /// layer zero so the network starts as the constant zero map.
    pub fn new<R: Rng + ?Sized>(
        n_in: usize,
        hidden: usize,
        depth: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = n_in;
        for _ in 0..depth {
            layers.push(Dense::glorot(width, hidden, rng));
            width = hidden;
        }
        layers.push(Dense::zeros(width, n_out));
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let (i, o) = l.shape();
                    Dense::zeros(i, o)
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h.view());
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = {
                let mut y = layer.apply(&h.view());
                if i < last {
                    y.mapv_inplace(f64::tanh);
                }
                y
            };
            inputs.push(std::mem::replace(&mut h, next));
        }
        (h, MlpCache { inputs })
    }

    /// Propagates `d_out` back to the network input. When `grads` is given,
    /// parameter gradients are accumulated into it.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_out: Array2<f64>,
        mut grads: Option<&mut Mlp>,
    ) -> Array2<f64> {
        let mut d = d_out;
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                gl.weight += &input.t().dot(&d);
                gl.bias += &d.sum_axis(Axis(0));
            }
            let mut d_in = d.dot(&self.layers[i].weight.t());
            if i > 0 {
                // input[i] is tanh output of layer i - 1
                ndarray::Zip::from(&mut d_in)
                    .and(input)
                    .for_each(|g, &h| *g *= 1.0 - h * h);
            }
            d = d_in;
        }
        d
    }

    /// Parameter blocks in a fixed order: per layer weight then bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}
