//! Integer-factor bilinear upsampling (half-pixel centers, edges clamped).

use crate::tensor::{Scalar, Tensor};

struct AxisTap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn axis_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<AxisTap> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let clamped = src.max(0.0).min(in_len as f64 - 1.0);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            AxisTap {
                i0,
                i1,
                w1: clamped - i0 as f64,
            }
        })
        .collect()
}

pub fn upsample_bilinear<E: Scalar>(x: &Tensor<E>, factor: usize) -> Tensor<E> {
    let (n, c, h, w) = x.dims();
    let (oh, ow) = (h * factor, w * factor);
    let ys = axis_taps(oh, h, factor);
    let xs = axis_taps(ow, w, factor);
    let mut out = Tensor::zeros(n, c, oh, ow);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for (oy, ty) in ys.iter().enumerate() {
                let wy1 = E::from_f64(ty.w1);
                let wy0 = E::one() - wy1;
                let r0 = &src[ty.i0 * w..ty.i0 * w + w];
                let r1 = &src[ty.i1 * w..ty.i1 * w + w];
                let d = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, tx) in xs.iter().enumerate() {
                    let wx1 = E::from_f64(tx.w1);
                    let wx0 = E::one() - wx1;
                    d[ox] = wy0 * (wx0 * r0[tx.i0] + wx1 * r0[tx.i1])
                        + wy1 * (wx0 * r1[tx.i0] + wx1 * r1[tx.i1]);
                }
            }
        }
    }
    out
}

/// Transpose of the upsampling: scatters output gradients onto input cells.
pub fn upsample_bilinear_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    in_h: usize,
    in_w: usize,
    factor: usize,
) -> Tensor<E> {
    let (n, c, oh, ow) = grad_out.dims();
    assert_eq!((oh, ow), (in_h * factor, in_w * factor), "upsample backward shape");
    let ys = axis_taps(oh, in_h, factor);
    let xs = axis_taps(ow, in_w, factor);
    let mut gx = Tensor::zeros(n, c, in_h, in_w);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_out.plane(ni, ci);
            let dst = gx.plane_mut(ni, ci);
            for (oy, ty) in ys.iter().enumerate() {
                let wy1 = E::from_f64(ty.w1);
                let wy0 = E::one() - wy1;
                for (ox, tx) in xs.iter().enumerate() {
                    let wx1 = E::from_f64(tx.w1);
                    let wx0 = E::one() - wx1;
                    let gv = g[oy * ow + ox];
                    dst[ty.i0 * in_w + tx.i0] = dst[ty.i0 * in_w + tx.i0] + wy0 * wx0 * gv;
                    dst[ty.i0 * in_w + tx.i1] = dst[ty.i0 * in_w + tx.i1] + wy0 * wx1 * gv;
                    dst[ty.i1 * in_w + tx.i0] = dst[ty.i1 * in_w + tx.i0] + wy1 * wx0 * gv;
                    dst[ty.i1 * in_w + tx.i1] = dst[ty.i1 * in_w + tx.i1] + wy1 * wx1 * gv;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::<f64>::full(1, 2, 3, 3, 1.5);
        let y = upsample_bilinear(&x, 4);
        assert_eq!(y.dims(), (1, 2, 12, 12));
        for &v in y.data() {
            assert!((v - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::from_chw(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(upsample_bilinear(&x, 1), x);
    }

    #[test]
    fn mass_is_preserved_by_backward() {
        let g = Tensor::<f64>::full(1, 1, 4, 4, 1.0);
        let gx = upsample_bilinear_backward(&g, 2, 2, 2);
        let total: f64 = gx.data().iter().sum();
        assert!((total - 16.0).abs() < 1e-9);
    }
}
