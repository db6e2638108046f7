//! Central finite-difference verification of analytic gradients.
//!
//! Checks are directional: pick a direction d, compare grad . d against
//! (f(x + h d) - f(x - h d)) / 2h. Kinked ops (ReLU at zero) are checked at
//! points bounded away from the kink; the tests state that exclusion.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct FdReport {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic directional derivative with a central difference.
pub fn directional_check(
    f: &mut dyn FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic_grad: &Tensor<f64>,
    direction: &Tensor<f64>,
    h: f64,
) -> FdReport {
    assert_eq!(x.dims(), analytic_grad.dims(), "gradient shape");
    assert_eq!(x.dims(), direction.dims(), "direction shape");
    let analytic: f64 = analytic_grad
        .data()
        .iter()
        .zip(direction.data())
        .map(|(g, d)| g * d)
        .sum();
    let mut xp = x.clone();
    let mut xm = x.clone();
    for i in 0..x.numel() {
        xp.data_mut()[i] += h * direction.data()[i];
        xm.data_mut()[i] -= h * direction.data()[i];
    }
    let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
    FdReport {
        analytic,
        numeric,
        rel_err: rel_err(analytic, numeric),
    }
}

/// A random unit-norm direction tensor.
pub fn random_direction(rng: &mut ChaCha8Rng, like: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = like.dims();
    let mut d = Tensor::zeros(n, c, h, w);
    for v in d.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let norm: f64 = d.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    d.scale(1.0 / norm);
    d
}
