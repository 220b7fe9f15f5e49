//! Affine coupling layer.
//!
//! Coordinates with `mask == true` pass through unchanged (`a`); the others
//! (`b`) are transformed as `b * exp(s(a)) + t(a)`. The log-determinant of
//! the Jacobian is the row sum of `s(a)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::mlp::{Mlp, MlpCache};

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub mask: Vec<bool>,
    pub scale_net: Mlp,
    pub translate_net: Mlp,
    /// `s = clamp * tanh(raw / clamp)` keeps log-scales in `(-clamp, clamp)`.
    pub scale_clamp: f64,
    pass: Vec<usize>,
    xform: Vec<usize>,
}

/// Intermediate values of one layer, kept for backpropagation.
pub struct CouplingCache {
    /// Untransformed `b` (forward) or recovered `x_b` (inverse).
    b: Array2<f64>,
    s: Array2<f64>,
    exp_s: Array2<f64>,
    s_cache: MlpCache,
    t_cache: MlpCache,
}

/// Gradients for one layer's two networks.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingGrads {
    pub scale_net: Mlp,
    pub translate_net: Mlp,
}

fn gather(x: &ArrayView2<f64>, cols: &[usize]) -> Array2<f64> {
    x.select(Axis(1), cols)
}

fn scatter(dst: &mut Array2<f64>, src: &Array2<f64>, cols: &[usize]) {
    for (k, &c) in cols.iter().enumerate() {
        dst.column_mut(c).assign(&src.column(k));
    }
}

impl CouplingLayer {
    pub fn new<R: Rng + ?Sized>(
        mask: Vec<bool>,
        hidden: usize,
        depth: usize,
        scale_clamp: f64,
        rng: &mut R,
    ) -> Self {
        let n_pass = mask.iter().filter(|&&m| m).count();
        let n_x = mask.len() - n_pass;
        let scale_net = Mlp::new(n_pass, hidden, depth, n_x, rng);
        let translate_net = Mlp::new(n_pass, hidden, depth, n_x, rng);
        Self::from_parts(mask, scale_net, translate_net, scale_clamp)
    }

    pub fn from_parts(mask: Vec<bool>, scale_net: Mlp, translate_net: Mlp, scale_clamp: f64) -> Self {
        let pass = (0..mask.len()).filter(|&i| mask[i]).collect();
        let xform = (0..mask.len()).filter(|&i| !mask[i]).collect();
        Self {
            mask,
            scale_net,
            translate_net,
            scale_clamp,
            pass,
            xform,
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn zero_grads(&self) -> CouplingGrads {
        CouplingGrads {
            scale_net: self.scale_net.zeros_like(),
            translate_net: self.translate_net.zeros_like(),
        }
    }

    fn scale(&self, raw: Array2<f64>) -> Array2<f64> {
        let c = self.scale_clamp;
        raw.mapv_into(|r| c * (r / c).tanh())
    }

    /// `x -> y`, with per-row `log|det J|`.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let a = gather(&x, &self.pass);
        let b = gather(&x, &self.xform);
        let s = self.scale(self.scale_net.forward(a.view()));
        let t = self.translate_net.forward(a.view());
        let yb = &b * &s.mapv(f64::exp) + &t;
        let mut y = x.to_owned();
        scatter(&mut y, &yb, &self.xform);
        (y, s.sum_axis(Axis(1)))
    }

    /// `y -> x`, with per-row `log|det J|` of the inverse map.
    pub fn inverse(&self, y: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let a = gather(&y, &self.pass);
        let yb = gather(&y, &self.xform);
        let s = self.scale(self.scale_net.forward(a.view()));
        let t = self.translate_net.forward(a.view());
        let xb = (&yb - &t) * &s.mapv(|v| (-v).exp());
        let mut x = y.to_owned();
        scatter(&mut x, &xb, &self.xform);
        (x, -s.sum_axis(Axis(1)))
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, CouplingCache) {
        let a = gather(&x, &self.pass);
        let b = gather(&x, &self.xform);
        let (raw, s_cache) = self.scale_net.forward_cached(a.view());
        let s = self.scale(raw);
        let (t, t_cache) = self.translate_net.forward_cached(a.view());
        let exp_s = s.mapv(f64::exp);
        let yb = &b * &exp_s + &t;
        let mut y = x.to_owned();
        scatter(&mut y, &yb, &self.xform);
        let logdet = s.sum_axis(Axis(1));
        (
            y,
            logdet,
            CouplingCache {
                b,
                s,
                exp_s,
                s_cache,
                t_cache,
            },
        )
    }

    /// Backward pass of [`forward_cached`](Self::forward_cached).
    ///
    /// `dy` is the loss gradient w.r.t. the layer output and `dlogdet` the
    /// gradient w.r.t. each row's log-determinant. Returns the gradient
    /// w.r.t. the layer input and accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &CouplingCache,
        dy: &Array2<f64>,
        dlogdet: &Array1<f64>,
        grads: &mut CouplingGrads,
    ) -> Array2<f64> {
        let dyb = gather(&dy.view(), &self.xform);
        let dya = gather(&dy.view(), &self.pass);
        let db = &dyb * &cache.exp_s;
        // dL/ds = dL/dy_b * b * exp(s) + dL/dlogdet
        let mut ds = &db * &cache.b;
        ds += &dlogdet.view().insert_axis(Axis(1));
        let c = self.scale_clamp;
        let draw = ndarray::Zip::from(&ds)
            .and(&cache.s)
            .map_collect(|&g, &s| g * (1.0 - (s / c) * (s / c)));
        let da_s = self
            .scale_net
            .backward(&cache.s_cache, draw, Some(&mut grads.scale_net));
        let da_t = self
            .translate_net
            .backward(&cache.t_cache, dyb, Some(&mut grads.translate_net));
        let da = dya + da_s + da_t;
        let mut dx = Array2::zeros(dy.raw_dim());
        scatter(&mut dx, &da, &self.pass);
        scatter(&mut dx, &db, &self.xform);
        dx
    }

    pub fn inverse_cached(&self, y: ArrayView2<f64>) -> (Array2<f64>, CouplingCache) {
        let a = gather(&y, &self.pass);
        let yb = gather(&y, &self.xform);
        let (raw, s_cache) = self.scale_net.forward_cached(a.view());
        let s = self.scale(raw);
        let (t, t_cache) = self.translate_net.forward_cached(a.view());
        let exp_s = s.mapv(|v| (-v).exp());
        let xb = (&yb - &t) * &exp_s;
        let mut x = y.to_owned();
        scatter(&mut x, &xb, &self.xform);
        (
            x,
            CouplingCache {
                b: xb,
                s,
                exp_s,
                s_cache,
                t_cache,
            },
        )
    }

    /// Input gradient of [`inverse_cached`](Self::inverse_cached); network
    /// parameters are held fixed.
    pub fn inverse_backward(&self, cache: &CouplingCache, dx: &Array2<f64>) -> Array2<f64> {
        let dxb = gather(&dx.view(), &self.xform);
        let dxa = gather(&dx.view(), &self.pass);
        // x_b = (y_b - t) * exp(-s)
        let dyb = &dxb * &cache.exp_s;
        let ds = -(&dxb * &cache.b);
        let c = self.scale_clamp;
        let draw = ndarray::Zip::from(&ds)
            .and(&cache.s)
            .map_collect(|&g, &s| g * (1.0 - (s / c) * (s / c)));
        let dt = -&dyb;
        let da_s = self.scale_net.backward(&cache.s_cache, draw, None);
        let da_t = self.translate_net.backward(&cache.t_cache, dt, None);
        let da = dxa + da_s + da_t;
        let mut dy = Array2::zeros(dx.raw_dim());
        scatter(&mut dy, &da, &self.pass);
        scatter(&mut dy, &dyb, &self.xform);
        dy
    }
}
