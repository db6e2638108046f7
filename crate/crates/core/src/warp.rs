//! Dense backward warping with border-clamped bilinear sampling.
//!
//! A flow field is a (n, 2, H, W) tensor holding (dy, dx) displacements in
//! feature-grid cells; the output at q samples the input at q + flow(q).

use crate::tensor::{Scalar, Tensor};

/// Border-clamped bilinear sample of one plane at (sy, sx).
#[inline]
pub fn bilinear_sample<E: Scalar>(plane: &[E], h: usize, w: usize, sy: E, sx: E) -> E {
    sample_parts(plane, h, w, sy, sx).0
}

/// Returns (value, d_value/d_sy, d_value/d_sx).
///
/// Coordinates are clamped to [0, dim-1] first, so spatial derivatives vanish
/// outside the grid. At integer coordinates the derivative uses the cell whose
/// top/left corner is the sample point.
#[inline]
fn sample_parts<E: Scalar>(plane: &[E], h: usize, w: usize, sy: E, sx: E) -> (E, E, E) {
    let zero = E::zero();
    let max_y = E::from_f64((h - 1) as f64);
    let max_x = E::from_f64((w - 1) as f64);
    let cy = sy.max(zero).min(max_y);
    let cx = sx.max(zero).min(max_x);
    let y0 = cy.floor();
    let x0 = cx.floor();
    let fy = cy - y0;
    let fx = cx - x0;
    let y0i = y0.as_f64() as usize;
    let x0i = x0.as_f64() as usize;
    let y1i = (y0i + 1).min(h - 1);
    let x1i = (x0i + 1).min(w - 1);
    let v00 = plane[y0i * w + x0i];
    let v01 = plane[y0i * w + x1i];
    let v10 = plane[y1i * w + x0i];
    let v11 = plane[y1i * w + x1i];
    let one = E::one();
    let top = v00 * (one - fx) + v01 * fx;
    let bot = v10 * (one - fx) + v11 * fx;
    let val = top * (one - fy) + bot * fy;
    // Clamped coordinates stop moving with the input, killing the derivative.
    let dy = if sy <= zero || sy >= max_y {
        zero
    } else {
        bot - top
    };
    let dx = if sx <= zero || sx >= max_x {
        zero
    } else {
        (v01 - v00) * (one - fy) + (v11 - v10) * fy
    };
    (val, dy, dx)
}

/// output(q) = bilinear sample of x at q + flow(q), per channel.
pub fn warp_backward<E: Scalar>(x: &Tensor<E>, flow: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = x.dims();
    assert_eq!(flow.dims(), (n, 2, h, w), "warp_backward flow shape");
    let mut y = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        let fy = flow.plane(ni, 0);
        let fx = flow.plane(ni, 1);
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let dst = y.plane_mut(ni, ci);
            for yy in 0..h {
                for xx in 0..w {
                    let q = yy * w + xx;
                    let sy = E::from_f64(yy as f64) + fy[q];
                    let sx = E::from_f64(xx as f64) + fx[q];
                    dst[q] = bilinear_sample(src, h, w, sy, sx);
                }
            }
        }
    }
    y
}

/// Gradients of `warp_backward` w.r.t. the warped tensor and the flow.
pub fn warp_backward_grad<E: Scalar>(
    x: &Tensor<E>,
    flow: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (n, c, h, w) = x.dims();
    assert_eq!(grad_out.dims(), (n, c, h, w), "warp grad shape");
    let mut gx = Tensor::zeros(n, c, h, w);
    let mut gflow = Tensor::zeros(n, 2, h, w);
    let zero = E::zero();
    let one = E::one();
    let max_y = E::from_f64((h - 1) as f64);
    let max_x = E::from_f64((w - 1) as f64);
    for ni in 0..n {
        let fy_p = flow.plane(ni, 0).to_vec();
        let fx_p = flow.plane(ni, 1).to_vec();
        for ci in 0..c {
            let src = x.plane(ni, ci).to_vec();
            let g = grad_out.plane(ni, ci).to_vec();
            let gxp = gx.plane_mut(ni, ci);
            for yy in 0..h {
                for xx in 0..w {
                    let q = yy * w + xx;
                    let go = g[q];
                    if go == zero {
                        continue;
                    }
                    let sy = E::from_f64(yy as f64) + fy_p[q];
                    let sx = E::from_f64(xx as f64) + fx_p[q];
                    let cy = sy.max(zero).min(max_y);
                    let cx = sx.max(zero).min(max_x);
                    let y0 = cy.floor();
                    let x0 = cx.floor();
                    let fy = cy - y0;
                    let fx = cx - x0;
                    let y0i = y0.as_f64() as usize;
                    let x0i = x0.as_f64() as usize;
                    let y1i = (y0i + 1).min(h - 1);
                    let x1i = (x0i + 1).min(w - 1);
                    gxp[y0i * w + x0i] = gxp[y0i * w + x0i] + go * (one - fy) * (one - fx);
                    gxp[y0i * w + x1i] = gxp[y0i * w + x1i] + go * (one - fy) * fx;
                    gxp[y1i * w + x0i] = gxp[y1i * w + x0i] + go * fy * (one - fx);
                    gxp[y1i * w + x1i] = gxp[y1i * w + x1i] + go * fy * fx;

                    let (_, dy, dx) = sample_parts(&src, h, w, sy, sx);
                    let o0 = gflow.off(ni, 0, yy, xx);
                    let o1 = gflow.off(ni, 1, yy, xx);
                    gflow.data_mut()[o0] = gflow.data()[o0] + go * dy;
                    gflow.data_mut()[o1] = gflow.data()[o1] + go * dx;
                }
            }
        }
    }
    (gx, gflow)
}
