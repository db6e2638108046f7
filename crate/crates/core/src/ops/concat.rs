//! Channel concatenation and its split backward.

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

pub fn concat_channels<E: Scalar>(xs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    assert!(!xs.is_empty(), "concat of zero tensors");
    let (n, _, h, w) = xs[0].dims();
    let mut c_total = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims();
        if (xn, xh, xw) != (n, h, w) {
            return Err(CoreError::shape(
                "concat_channels",
                format!("(n={n}, h={h}, w={w})"),
                format!("(n={xn}, h={xh}, w={xw})"),
            ));
        }
        c_total += xc;
    }
    let mut y = Tensor::zeros(n, c_total, h, w);
    for ni in 0..n {
        let mut co = 0;
        for x in xs {
            for ci in 0..x.c() {
                y.plane_mut(ni, co).copy_from_slice(x.plane(ni, ci));
                co += 1;
            }
        }
    }
    Ok(y)
}

/// Splits an upstream gradient back into per-input gradients.
pub fn concat_channels_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    channel_counts: &[usize],
) -> Vec<Tensor<E>> {
    let (n, c, h, w) = grad_out.dims();
    assert_eq!(channel_counts.iter().sum::<usize>(), c, "concat backward channels");
    let mut grads = Vec::with_capacity(channel_counts.len());
    let mut start = 0;
    for &cc in channel_counts {
        let mut g = Tensor::zeros(n, cc, h, w);
        for ni in 0..n {
            for ci in 0..cc {
                g.plane_mut(ni, ci)
                    .copy_from_slice(grad_out.plane(ni, start + ci));
            }
        }
        grads.push(g);
        start += cc;
    }
    grads
}
