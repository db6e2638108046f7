//! Metric embedding and the d x d correlation cost volume between
//! consecutive frame pairs of the input window.

use crate::error::{CoreError, Result};
use crate::ops::conv::Conv2d;
use crate::tensor::{Scalar, Tensor};

pub const NORM_FLOOR: f64 = 1e-8;

/// Per-location channel norms saved for the backward pass.
pub struct L2Ctx<E> {
    /// Norm before flooring, one entry per (n, y, x).
    norms: Vec<E>,
}

/// Divides each spatial location by its channel-axis L2 norm, floored at 1e-8.
/// Locations with tiny norm map to (nearly) the zero vector.
pub fn l2_normalize_channels<E: Scalar>(x: &Tensor<E>) -> (Tensor<E>, L2Ctx<E>) {
    let (n, c, h, w) = x.dims();
    let hw = h * w;
    let floor = E::from_f64(NORM_FLOOR);
    let mut y = Tensor::zeros(n, c, h, w);
    let mut norms = vec![E::zero(); n * hw];
    for ni in 0..n {
        for i in 0..hw {
            let mut ss = E::zero();
            for ci in 0..c {
                let v = x.data()[x.off(ni, ci, 0, 0) + i];
                ss = ss + v * v;
            }
            let norm = ss.sqrt();
            norms[ni * hw + i] = norm;
            let denom = norm.max(floor);
            for ci in 0..c {
                let o = x.off(ni, ci, 0, 0) + i;
                y.data_mut()[o] = x.data()[o] / denom;
            }
        }
    }
    (y, L2Ctx { norms })
}

/// Backward of `l2_normalize_channels`. Below the floor the forward is the
/// linear map x/floor, so the gradient is a plain pass-through scaled by
/// 1/floor; above it the usual projection term applies.
pub fn l2_normalize_channels_backward<E: Scalar>(
    x: &Tensor<E>,
    ctx: &L2Ctx<E>,
    grad_out: &Tensor<E>,
) -> Tensor<E> {
    let (n, c, h, w) = x.dims();
    assert_eq!(grad_out.dims(), (n, c, h, w), "l2 normalize backward shape");
    let hw = h * w;
    let floor = E::from_f64(NORM_FLOOR);
    let mut gx = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for i in 0..hw {
            let norm = ctx.norms[ni * hw + i];
            if norm <= floor {
                for ci in 0..c {
                    let o = x.off(ni, ci, 0, 0) + i;
                    gx.data_mut()[o] = grad_out.data()[o] / floor;
                }
            } else {
                let mut dot = E::zero();
                for ci in 0..c {
                    let o = x.off(ni, ci, 0, 0) + i;
                    dot = dot + x.data()[o] * grad_out.data()[o];
                }
                let inv = E::one() / norm;
                let inv3 = inv * inv * inv;
                for ci in 0..c {
                    let o = x.off(ni, ci, 0, 0) + i;
                    gx.data_mut()[o] = grad_out.data()[o] * inv - x.data()[o] * dot * inv3;
                }
            }
        }
    }
    gx
}

/// Applies the shared embedding conv to every frame, then unit-normalizes.
/// Returns per-frame embeddings plus the contexts needed for backward.
pub fn embed_metric<E: Scalar>(
    frames: &[Tensor<E>],
    conv: &Conv2d<E>,
) -> Result<(Vec<Tensor<E>>, Vec<(Tensor<E>, L2Ctx<E>)>)> {
    let mut embeds = Vec::with_capacity(frames.len());
    let mut ctxs = Vec::with_capacity(frames.len());
    for f in frames {
        let raw = conv.forward(f)?;
        let (normed, l2) = l2_normalize_channels(&raw);
        embeds.push(normed);
        ctxs.push((raw, l2));
    }
    Ok((embeds, ctxs))
}

fn check_window<E: Scalar>(embeds: &[Tensor<E>], d: usize) -> Result<()> {
    if d % 2 == 0 {
        return Err(CoreError::Config(format!(
            "correlation window d must be odd, got {d}"
        )));
    }
    if embeds.len() < 2 {
        return Err(CoreError::Config(format!(
            "correlation needs at least 2 frames, got {}",
            embeds.len()
        )));
    }
    let (_, _, h, w) = embeds[0].dims();
    if d > h || d > w {
        return Err(CoreError::Config(format!(
            "correlation window {d} exceeds spatial dims {h}x{w}"
        )));
    }
    Ok(())
}

/// Cost volume over consecutive frame pairs, oldest pair first.
///
/// For pair p the newer frame is probed at q and the older frame at
/// q + (u - d/2, v - d/2); channel p*d*d + u*d + v holds the dot product.
/// Off-grid neighbors contribute zero.
pub fn correlation_volume<E: Scalar>(embeds: &[Tensor<E>], d: usize) -> Result<Tensor<E>> {
    check_window(embeds, d)?;
    let t = embeds.len();
    let (n, c, h, w) = embeds[0].dims();
    let half = (d / 2) as isize;
    let mut out = Tensor::zeros(n, (t - 1) * d * d, h, w);
    for p in 0..t - 1 {
        let older = &embeds[p];
        let newer = &embeds[p + 1];
        for u in 0..d {
            for v in 0..d {
                let dy = u as isize - half;
                let dx = v as isize - half;
                let ch = p * d * d + u * d + v;
                for ni in 0..n {
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if y_lo >= y_hi || x_lo >= x_hi {
                        continue;
                    }
                    for ci in 0..c {
                        let a = newer.plane(ni, ci);
                        let b = older.plane(ni, ci);
                        let o = out.plane_mut(ni, ch);
                        for yy in y_lo..y_hi {
                            let sy = (yy as isize + dy) as usize;
                            let arow = &a[yy * w + x_lo..yy * w + x_hi];
                            let brow = &b[sy * w + (x_lo as isize + dx) as usize..];
                            let orow = &mut o[yy * w + x_lo..yy * w + x_hi];
                            for ((ov, &av), &bv) in orow.iter_mut().zip(arow).zip(brow) {
                                *ov = *ov + av * bv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `correlation_volume` w.r.t. each frame embedding.
pub fn correlation_volume_backward<E: Scalar>(
    embeds: &[Tensor<E>],
    d: usize,
    grad_out: &Tensor<E>,
) -> Vec<Tensor<E>> {
    let t = embeds.len();
    let (n, c, h, w) = embeds[0].dims();
    let half = (d / 2) as isize;
    let mut grads: Vec<Tensor<E>> = embeds
        .iter()
        .map(|_| Tensor::zeros(n, c, h, w))
        .collect();
    for p in 0..t - 1 {
        for u in 0..d {
            for v in 0..d {
                let dy = u as isize - half;
                let dx = v as isize - half;
                let ch = p * d * d + u * d + v;
                for ni in 0..n {
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if y_lo >= y_hi || x_lo >= x_hi {
                        continue;
                    }
                    for ci in 0..c {
                        let g = grad_out.plane(ni, ch).to_vec();
                        let newer = embeds[p + 1].plane(ni, ci).to_vec();
                        let older = embeds[p].plane(ni, ci).to_vec();
                        for yy in y_lo..y_hi {
                            let sy = (yy as isize + dy) as usize;
                            for xx in x_lo..x_hi {
                                let sx = (xx as isize + dx) as usize;
                                let gv = g[yy * w + xx];
                                if gv == E::zero() {
                                    continue;
                                }
                                let gn = grads[p + 1].plane_mut(ni, ci);
                                gn[yy * w + xx] = gn[yy * w + xx] + gv * older[sy * w + sx];
                                let go = grads[p].plane_mut(ni, ci);
                                go[sy * w + sx] = go[sy * w + sx] + gv * newer[yy * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    grads
}
