//! Fixtures shared by the benchmarks under `benches/`.

use ndarray::Array2;
use rand::Rng;
use semclone_core::flow::FlowModel;
use semclone_core::seed;
use semclone_core::traces::Preprocessing;
use semclone_core::FlowArch;

/// A default-architecture model over `d` float columns with small random
/// weights, so it is not the identity.
pub fn random_model(id: &str, d: usize, s: u64) -> FlowModel {
    let mut rng = seed::rng(s);
    let mut m = FlowModel::init(id, Preprocessing::identity(d), &FlowArch::default(), &mut rng)
        .expect("valid dimensions");
    for p in m.param_slices_mut() {
        for w in p.iter_mut() {
            *w += 0.05 * (rng.random::<f64>() - 0.5);
        }
    }
    m
}

/// Rows uniform on `[-1, 1)`.
pub fn gaussian_rows(n: usize, d: usize, s: u64) -> Array2<f64> {
    let mut rng = seed::rng(s);
    Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(rand::distr::StandardUniform) * 2.0 - 1.0)
}
