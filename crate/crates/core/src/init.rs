//! Weight initialization: zero-mean uniform scaled by 1/sqrt(fan-in),
//! biases zero, all driven by a caller-seeded RNG for reproducibility.

use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

pub type InitRng = ChaCha20Rng;

/// Fills a (cout, cin, k, k) kernel with U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn conv_weight<E: Scalar>(
    rng: &mut InitRng,
    cout: usize,
    cin: usize,
    k: usize,
) -> Tensor<E> {
    let fan_in = (cin * k * k) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let mut t = Tensor::zeros(cout, cin, k, k);
    for v in t.data_mut() {
        *v = E::from_f64(rng.gen_range(-bound..bound));
    }
    t
}
