//! Elementwise and per-pixel activations.

use crate::tensor::{Scalar, Tensor};

pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

/// Gradient passes only where the forward input was strictly positive.
pub fn relu_backward<E: Scalar>(x: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    assert_eq!(x.dims(), grad_out.dims(), "relu backward shape");
    let mut gx = grad_out.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= E::zero() {
            *g = E::zero();
        }
    }
    gx
}

/// Softmax over the channel dimension, independently at every (n, y, x).
pub fn softmax_channels<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = x.dims();
    let mut y = Tensor::zeros(n, c, h, w);
    let hw = h * w;
    for ni in 0..n {
        for i in 0..hw {
            let mut maxv = x.data()[x.off(ni, 0, 0, 0) + i];
            for ci in 1..c {
                let v = x.data()[x.off(ni, ci, 0, 0) + i];
                if v > maxv {
                    maxv = v;
                }
            }
            let mut sum = E::zero();
            for ci in 0..c {
                let e = (x.data()[x.off(ni, ci, 0, 0) + i] - maxv).exp();
                y.data_mut()[x.off(ni, ci, 0, 0) + i] = e;
                sum = sum + e;
            }
            for ci in 0..c {
                let o = x.off(ni, ci, 0, 0) + i;
                y.data_mut()[o] = y.data()[o] / sum;
            }
        }
    }
    y
}

/// Backward given the forward output `p`: dx_c = p_c * (dy_c - sum_j p_j dy_j).
pub fn softmax_channels_backward<E: Scalar>(p: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = p.dims();
    assert_eq!(grad_out.dims(), (n, c, h, w), "softmax backward shape");
    let mut gx = Tensor::zeros(n, c, h, w);
    let hw = h * w;
    for ni in 0..n {
        for i in 0..hw {
            let mut dot = E::zero();
            for ci in 0..c {
                let o = p.off(ni, ci, 0, 0) + i;
                dot = dot + p.data()[o] * grad_out.data()[o];
            }
            for ci in 0..c {
                let o = p.off(ni, ci, 0, 0) + i;
                gx.data_mut()[o] = p.data()[o] * (grad_out.data()[o] - dot);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clamps_and_masks() {
        let x = Tensor::from_chw(1, 1, 4, vec![-1.0, 0.0, 2.0, -0.5]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = Tensor::from_chw(1, 1, 4, vec![1.0; 4]);
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn two_equal_logits_split_evenly() {
        let x = Tensor::<f64>::from_chw(2, 1, 1, vec![0.3, 0.3]);
        let p = softmax_channels(&x);
        assert!((p.data()[0] - 0.5).abs() < 1e-12);
        assert!((p.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn channel_sums_are_one_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Tensor::<f64>::zeros(2, 5, 3, 4);
        for v in x.data_mut() {
            *v = rng.gen_range(-10.0..10.0);
        }
        let p = softmax_channels(&x);
        for ni in 0..2 {
            for i in 0..12 {
                let s: f64 = (0..5).map(|c| p.data()[p.off(ni, c, 0, 0) + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_scalar_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Tensor::<f64>::zeros(1, 5, 2, 3);
        for v in x.data_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
        let p = softmax_channels(&x);
        for i in 0..6 {
            // Plain exp/sum at one pixel, no max subtraction.
            let logits: Vec<f64> = (0..5).map(|c| x.data()[x.off(0, c, 0, 0) + i]).collect();
            let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..5 {
                assert!((p.data()[p.off(0, c, 0, 0) + i] - exps[c] / sum).abs() < 1e-6);
            }
        }
    }

    proptest::proptest! {
        /// Any finite logits, however large, produce a valid distribution.
        #[test]
        fn softmax_is_a_distribution_for_arbitrary_logits(
            vals in proptest::collection::vec(-1e6f64..1e6, 3 * 4),
        ) {
            let x = Tensor::from_chw(3, 2, 2, vals);
            let p = softmax_channels(&x);
            for i in 0..4 {
                let probs: Vec<f64> = (0..3).map(|c| p.data()[p.off(0, c, 0, 0) + i]).collect();
                let sum: f64 = probs.iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-9);
                for q in probs {
                    proptest::prop_assert!((0.0..=1.0).contains(&q) && q.is_finite());
                }
            }
        }
    }
}
