//! Mean squared error over full tensors.

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

pub fn mse<E: Scalar>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E> {
    if pred.dims() != target.dims() {
        return Err(CoreError::shape(
            "mse",
            format!("{:?}", target.dims()),
            format!("{:?}", pred.dims()),
        ));
    }
    let mut acc = E::zero();
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        let d = a - b;
        acc = acc + d * d;
    }
    Ok(acc / E::from_f64(pred.numel() as f64))
}

/// d(mse)/d(pred) scaled by an upstream gradient on the scalar loss.
pub fn mse_backward<E: Scalar>(pred: &Tensor<E>, target: &Tensor<E>, grad: E) -> Tensor<E> {
    assert_eq!(pred.dims(), target.dims(), "mse backward shape");
    let scale = grad * E::from_f64(2.0 / pred.numel() as f64);
    let mut g = pred.clone();
    for (v, &t) in g.data_mut().iter_mut().zip(target.data()) {
        *v = (*v - t) * scale;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_for_identical_tensors() {
        let a = Tensor::from_chw(1, 2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn matches_hand_computed_mean() {
        let a = Tensor::<f64>::from_chw(1, 1, 2, vec![1.0, 3.0]);
        let b = Tensor::from_chw(1, 1, 2, vec![0.0, 1.0]);
        // (1 + 4) / 2
        assert!((mse(&a, &b).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(1, 1, 2, 2);
        let b = Tensor::<f64>::zeros(1, 1, 2, 3);
        assert!(mse(&a, &b).is_err());
    }

    #[test]
    fn backward_is_two_over_n_times_residual() {
        let a = Tensor::<f64>::from_chw(1, 1, 2, vec![1.0, 3.0]);
        let b = Tensor::from_chw(1, 1, 2, vec![0.0, 1.0]);
        let g = mse_backward(&a, &b, 1.0);
        assert!((g.data()[0] - 1.0).abs() < 1e-12);
        assert!((g.data()[1] - 2.0).abs() < 1e-12);
    }
}
