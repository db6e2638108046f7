//! Deformable convolution: a conv whose k*k sampling points are displaced by
//! regressed per-location offsets, plus the BN-ReLU-dconv block built on it.
//!
//! Single offset group, no modulation. The offset-predicting branch is a
//! plain conv over the layer input, initialized to all zeros so the layer
//! starts out as a standard convolution.

use crate::error::{CoreError, Result};
use crate::init::InitRng;
use crate::linalg::{mm_abt_acc, mm_acc, mm_atb_acc};
use crate::ops::act::{relu, relu_backward};
use crate::ops::bn::{BatchNorm2d, BnCtx, Mode};
use crate::ops::conv::Conv2d;
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Offsets are (n, 2*k*k, h, w): channels (2*tap, 2*tap+1) hold the (dy, dx)
/// displacement added to tap (ky, kx) = (tap / k, tap % k).
pub struct DeformCtx<E> {
    /// Bilinear-sampled im2col matrix, one (cin*k*k, h*w) block per sample.
    col: Vec<E>,
}

fn check_offsets<E: Scalar>(x: &Tensor<E>, k: usize, offsets: &Tensor<E>) -> Result<()> {
    let (n, _, h, w) = x.dims();
    let want = 2 * k * k;
    let (on, oc, oh, ow) = offsets.dims();
    if (on, oc, oh, ow) != (n, want, h, w) {
        return Err(CoreError::shape(
            "deformable_conv",
            format!("offsets ({n}, {want}, {h}, {w})"),
            format!("offsets ({on}, {oc}, {oh}, {ow})"),
        ));
    }
    Ok(())
}

/// Same-padded deformable convolution; differentiable w.r.t. x, kernel, bias
/// and offsets. Sampling is border-clamped bilinear, shared with module warp.
pub fn deformable_conv<E: Scalar>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &[E],
    offsets: &Tensor<E>,
) -> Result<(Tensor<E>, DeformCtx<E>)> {
    let (n, cin, h, w) = x.dims();
    let (cout, kcin, k, k2) = kernel.dims();
    assert!(k == k2 && k % 2 == 1, "deformable_conv expects odd square kernels");
    if kcin != cin {
        return Err(CoreError::shape(
            "deformable_conv",
            format!("kernel (_, {cin}, {k}, {k})"),
            format!("kernel ({cout}, {kcin}, {k}, {k2})"),
        ));
    }
    check_offsets(x, k, offsets)?;
    let kk = cin * k * k;
    let hw = h * w;
    let c_half = (k / 2) as f64;
    let mut col = vec![E::zero(); n * kk * hw];
    let mut y = Tensor::zeros(n, cout, h, w);

    let y_samples: Vec<&mut [E]> = y.data_mut().chunks_mut(cout * hw).collect();
    col.par_chunks_mut(kk * hw)
        .zip(y_samples)
        .enumerate()
        .for_each(|(ni, (colb, ys))| {
            for ci in 0..cin {
                let plane = x.plane(ni, ci);
                for ky in 0..k {
                    for kx in 0..k {
                        let tap = ky * k + kx;
                        let offy = offsets.plane(ni, 2 * tap);
                        let offx = offsets.plane(ni, 2 * tap + 1);
                        let base_y = ky as f64 - c_half;
                        let base_x = kx as f64 - c_half;
                        let row = &mut colb[((ci * k + ky) * k + kx) * hw..][..hw];
                        for yy in 0..h {
                            for xx in 0..w {
                                let q = yy * w + xx;
                                let sy = E::from_f64(yy as f64 + base_y) + offy[q];
                                let sx = E::from_f64(xx as f64 + base_x) + offx[q];
                                row[q] = crate::warp::bilinear_sample(plane, h, w, sy, sx);
                            }
                        }
                    }
                }
            }
            mm_acc(ys, kernel.data(), colb, cout, kk, hw);
            for co in 0..cout {
                let b = bias[co];
                for v in &mut ys[co * hw..(co + 1) * hw] {
                    *v = *v + b;
                }
            }
        });
    Ok((y, DeformCtx { col }))
}

pub struct DeformGrads<E> {
    pub gx: Tensor<E>,
    pub gkernel: Tensor<E>,
    pub gbias: Vec<E>,
    pub goffsets: Tensor<E>,
}

pub fn deformable_conv_backward<E: Scalar>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    offsets: &Tensor<E>,
    ctx: &DeformCtx<E>,
    grad_out: &Tensor<E>,
) -> DeformGrads<E> {
    let (n, cin, h, w) = x.dims();
    let (cout, _, k, _) = kernel.dims();
    let kk = cin * k * k;
    let hw = h * w;
    let c_half = (k / 2) as f64;
    let zero = E::zero();
    let one = E::one();
    let max_y = E::from_f64((h - 1) as f64);
    let max_x = E::from_f64((w - 1) as f64);

    let mut gx = Tensor::zeros(n, cin, h, w);
    let mut goffsets = Tensor::zeros(n, 2 * k * k, h, w);

    struct SampleOut<E> {
        gk: Tensor<E>,
        gb: Vec<E>,
    }
    let gx_chunks: Vec<&mut [E]> = gx.data_mut().chunks_mut(cin * hw).collect();
    let goff_chunks: Vec<&mut [E]> = goffsets.data_mut().chunks_mut(2 * k * k * hw).collect();
    let partials: Vec<SampleOut<E>> = gx_chunks
        .into_par_iter()
        .zip(goff_chunks)
        .enumerate()
        .map(|(ni, (gxs, goffs))| {
            let colb = &ctx.col[ni * kk * hw..(ni + 1) * kk * hw];
            let g = grad_out.sample(ni);

            let mut gk = Tensor::zeros(cout, cin, k, k);
            mm_abt_acc(gk.data_mut(), g, colb, cout, hw, kk);
            let mut gb = vec![E::zero(); cout];
            for co in 0..cout {
                let mut acc = E::zero();
                for &v in &g[co * hw..(co + 1) * hw] {
                    acc = acc + v;
                }
                gb[co] = acc;
            }

            let mut gcol = vec![E::zero(); kk * hw];
            mm_atb_acc(&mut gcol, kernel.data(), g, cout, kk, hw);

            for ci in 0..cin {
                let plane = x.plane(ni, ci);
                for ky in 0..k {
                    for kx in 0..k {
                        let tap = ky * k + kx;
                        let offy = offsets.plane(ni, 2 * tap);
                        let offx = offsets.plane(ni, 2 * tap + 1);
                        let base_y = ky as f64 - c_half;
                        let base_x = kx as f64 - c_half;
                        let gr = &gcol[((ci * k + ky) * k + kx) * hw..][..hw];
                        for yy in 0..h {
                            for xx in 0..w {
                                let q = yy * w + xx;
                                let gc = gr[q];
                                if gc == zero {
                                    continue;
                                }
                                let sy = E::from_f64(yy as f64 + base_y) + offy[q];
                                let sx = E::from_f64(xx as f64 + base_x) + offx[q];
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
                                let base = ci * hw;
                                gxs[base + y0i * w + x0i] =
                                    gxs[base + y0i * w + x0i] + gc * (one - fy) * (one - fx);
                                gxs[base + y0i * w + x1i] =
                                    gxs[base + y0i * w + x1i] + gc * (one - fy) * fx;
                                gxs[base + y1i * w + x0i] =
                                    gxs[base + y1i * w + x0i] + gc * fy * (one - fx);
                                gxs[base + y1i * w + x1i] =
                                    gxs[base + y1i * w + x1i] + gc * fy * fx;

                                let v00 = plane[y0i * w + x0i];
                                let v01 = plane[y0i * w + x1i];
                                let v10 = plane[y1i * w + x0i];
                                let v11 = plane[y1i * w + x1i];
                                let dsy = if sy <= zero || sy >= max_y {
                                    zero
                                } else {
                                    (v10 * (one - fx) + v11 * fx) - (v00 * (one - fx) + v01 * fx)
                                };
                                let dsx = if sx <= zero || sx >= max_x {
                                    zero
                                } else {
                                    (v01 - v00) * (one - fy) + (v11 - v10) * fy
                                };
                                goffs[2 * tap * hw + q] = goffs[2 * tap * hw + q] + gc * dsy;
                                goffs[(2 * tap + 1) * hw + q] =
                                    goffs[(2 * tap + 1) * hw + q] + gc * dsx;
                            }
                        }
                    }
                }
            }
            SampleOut { gk, gb }
        })
        .collect();

    let mut gkernel = Tensor::zeros(cout, cin, k, k);
    let mut gbias = vec![E::zero(); cout];
    for p in partials {
        gkernel.add_assign(&p.gk);
        for (a, b) in gbias.iter_mut().zip(p.gb) {
            *a = *a + b;
        }
    }
    DeformGrads {
        gx,
        gkernel,
        gbias,
        goffsets,
    }
}

/// BN -> ReLU -> deformable conv, the standard layer of the forecasting trunk.
/// The offset branch reads the same post-activation tensor as the main conv.
pub struct DconvBlock<E> {
    pub bn: BatchNorm2d<E>,
    pub offset_conv: Conv2d<E>,
    pub weight: Param<E>,
    pub bias: Param<E>,
    k: usize,
}

pub struct DconvBlockCtx<E> {
    bn_ctx: BnCtx<E>,
    bn_out: Tensor<E>,
    act: Tensor<E>,
    offsets: Tensor<E>,
    deform: DeformCtx<E>,
}

impl<E: Scalar> DconvBlock<E> {
    pub fn new(name: &str, rng: &mut InitRng, cin: usize, cout: usize, k: usize) -> Self {
        let weight = crate::init::conv_weight(rng, cout, cin, k);
        DconvBlock {
            bn: BatchNorm2d::new(&format!("{name}.bn"), cin),
            offset_conv: Conv2d::new_zeroed(&format!("{name}.offset"), cin, 2 * k * k, k),
            weight: Param::new(format!("{name}.conv.weight"), weight, vec![cout, cin, k, k]),
            bias: Param::new(
                format!("{name}.conv.bias"),
                Tensor::zeros(cout, 1, 1, 1),
                vec![cout],
            ),
            k,
        }
    }

    pub fn forward(&mut self, x: &Tensor<E>, mode: Mode) -> Result<(Tensor<E>, DconvBlockCtx<E>)> {
        let (bn_out, bn_ctx) = self.bn.forward(x, mode)?;
        let act = relu(&bn_out);
        let offsets = self.offset_conv.forward(&act)?;
        let (y, deform) =
            deformable_conv(&act, self.weight.value(), self.bias.value().data(), &offsets)?;
        Ok((
            y,
            DconvBlockCtx {
                bn_ctx,
                bn_out,
                act,
                offsets,
                deform,
            },
        ))
    }

    pub fn backward(&mut self, ctx: &DconvBlockCtx<E>, grad_out: &Tensor<E>) -> Tensor<E> {
        let g = deformable_conv_backward(
            &ctx.act,
            self.weight.value(),
            &ctx.offsets,
            &ctx.deform,
            grad_out,
        );
        self.weight.grad_mut().add_assign(&g.gkernel);
        for (a, b) in self.bias.grad_mut().data_mut().iter_mut().zip(&g.gbias) {
            *a = *a + *b;
        }
        let mut g_act = g.gx;
        g_act.add_assign(&self.offset_conv.backward(&ctx.act, &g.goffsets));
        let g_bn_out = relu_backward(&ctx.bn_out, &g_act);
        self.bn.backward(&ctx.bn_ctx, &g_bn_out)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.bn.visit_params(f);
        self.offset_conv.visit_params(f);
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn running_stats(&mut self) -> &mut BatchNorm2d<E> {
        &mut self.bn
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().n()
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::conv2d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(n, c, h, w);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn zero_offsets_reduce_to_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let x = rand_tensor(&mut rng, 2, 3, 6, 5);
            let k = rand_tensor(&mut rng, 4, 3, 3, 3);
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let off = Tensor::zeros(2, 18, 6, 5);
            let (y, _) = deformable_conv(&x, &k, &b, &off).unwrap();
            let want = conv2d(&x, &k, &b, 1, 1).unwrap();
            // Zero offsets sample off-grid taps at clamped border positions,
            // while plain conv pads with zeros, so compare the interior.
            for ni in 0..2 {
                for co in 0..4 {
                    for yy in 1..5 {
                        for xx in 1..4 {
                            assert!(
                                (y.at(ni, co, yy, xx) - want.at(ni, co, yy, xx)).abs() < 1e-6
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_offsets_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 1, 2, 5, 5);
        let mut k = Tensor::<f64>::zeros(2, 2, 3, 3);
        *k.at_mut(0, 0, 1, 1) = 1.0;
        *k.at_mut(1, 1, 1, 1) = 1.0;
        let off = Tensor::zeros(1, 18, 5, 5);
        let (y, _) = deformable_conv(&x, &k, &[0.0, 0.0], &off).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn constant_unit_offset_matches_shifted_conv_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, 1, 2, 7, 7);
        let k = rand_tensor(&mut rng, 3, 2, 3, 3);
        let b = vec![0.1, -0.2, 0.3];
        // (dy, dx) = (0, 1) on every tap.
        let mut off = Tensor::<f64>::zeros(1, 18, 7, 7);
        for tap in 0..9 {
            off.plane_mut(0, 2 * tap + 1).iter_mut().for_each(|v| *v = 1.0);
        }
        let (y, _) = deformable_conv(&x, &k, &b, &off).unwrap();

        // Shift-then-conv: move content left by one column first.
        let mut xs = Tensor::<f64>::zeros(1, 2, 7, 7);
        for ci in 0..2 {
            for yy in 0..7 {
                for xx in 0..7 {
                    *xs.at_mut(0, ci, yy, xx) = x.at(0, ci, yy, (xx + 1).min(6));
                }
            }
        }
        let want = conv2d(&xs, &k, &b, 1, 1).unwrap();
        for co in 0..3 {
            for yy in 1..6 {
                for xx in 1..5 {
                    assert!((y.at(0, co, yy, xx) - want.at(0, co, yy, xx)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn wrong_offset_channel_count_is_an_error() {
        let x = Tensor::<f64>::zeros(1, 2, 4, 4);
        let k = Tensor::<f64>::zeros(2, 2, 3, 3);
        let off = Tensor::<f64>::zeros(1, 17, 4, 4);
        assert!(deformable_conv(&x, &k, &[0.0, 0.0], &off).is_err());
    }

    #[test]
    fn linear_in_kernel_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_tensor(&mut rng, 1, 2, 5, 5);
        let w1 = rand_tensor(&mut rng, 2, 2, 3, 3);
        let w2 = rand_tensor(&mut rng, 2, 2, 3, 3);
        let mut off = rand_tensor(&mut rng, 1, 18, 5, 5);
        off.scale(0.3);
        let (a, b) = (0.7, -1.3);
        let mut wmix = Tensor::zeros(2, 2, 3, 3);
        for i in 0..wmix.numel() {
            wmix.data_mut()[i] = a * w1.data()[i] + b * w2.data()[i];
        }
        let zero_b = vec![0.0, 0.0];
        let (y1, _) = deformable_conv(&x, &w1, &zero_b, &off).unwrap();
        let (y2, _) = deformable_conv(&x, &w2, &zero_b, &off).unwrap();
        let (ym, _) = deformable_conv(&x, &wmix, &zero_b, &off).unwrap();
        for i in 0..ym.numel() {
            assert!((ym.data()[i] - (a * y1.data()[i] + b * y2.data()[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::gradcheck::{directional_check, random_direction};
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, 1, 2, 5, 5);
        let k = rand_tensor(&mut rng, 3, 2, 3, 3);
        let b: Vec<f64> = vec![0.1, 0.0, -0.1];
        // Fractional offsets keep sample points away from lattice crossings.
        let mut off = Tensor::<f64>::zeros(1, 18, 5, 5);
        for v in off.data_mut() {
            *v = rng.gen_range(0.15..0.45) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        let loss = |y: &Tensor<f64>| -> f64 { y.data().iter().map(|v| v * v).sum() };
        let (y, ctx) = deformable_conv(&x, &k, &b, &off).unwrap();
        let gy = y.map(|v| 2.0 * v);
        let g = deformable_conv_backward(&x, &k, &off, &ctx, &gy);

        let dir = random_direction(&mut rng, &x);
        let rep = directional_check(
            &mut |t: &Tensor<f64>| loss(&deformable_conv(t, &k, &b, &off).unwrap().0),
            &x,
            &g.gx,
            &dir,
            1e-6,
        );
        assert!(rep.rel_err < 1e-4, "x rel err {}", rep.rel_err);

        let dir_k = random_direction(&mut rng, &k);
        let rep_k = directional_check(
            &mut |t: &Tensor<f64>| loss(&deformable_conv(&x, t, &b, &off).unwrap().0),
            &k,
            &g.gkernel,
            &dir_k,
            1e-6,
        );
        assert!(rep_k.rel_err < 1e-4, "kernel rel err {}", rep_k.rel_err);

        let dir_o = random_direction(&mut rng, &off);
        let rep_o = directional_check(
            &mut |t: &Tensor<f64>| loss(&deformable_conv(&x, &k, &b, t).unwrap().0),
            &off,
            &g.goffsets,
            &dir_o,
            1e-6,
        );
        assert!(rep_o.rel_err < 1e-4, "offset rel err {}", rep_o.rel_err);
    }

    #[test]
    fn block_with_identity_bn_and_delta_kernel_is_relu() {
        let mut rng = InitRng::seed_from_u64(0);
        let mut block = DconvBlock::<f64>::new("blk", &mut rng, 2, 2, 3);
        // Delta kernel on matching channels.
        block.weight.value_mut().fill(0.0);
        *block.weight.value_mut().at_mut(0, 0, 1, 1) = 1.0;
        *block.weight.value_mut().at_mut(1, 1, 1, 1) = 1.0;
        // Eval-mode BN with unit running stats is the identity.
        block.bn.running_mean = vec![0.0, 0.0];
        block.bn.running_var = vec![1.0 - 1e-5, 1.0 - 1e-5];
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng2, 1, 2, 4, 4);
        let (y, _) = block.forward(&x, Mode::Eval).unwrap();
        let want = relu(&x);
        assert!(y.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn block_composes_without_shape_drift() {
        let mut rng = InitRng::seed_from_u64(1);
        let mut b1 = DconvBlock::<f64>::new("b1", &mut rng, 3, 3, 3);
        let mut b2 = DconvBlock::<f64>::new("b2", &mut rng, 3, 3, 3);
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng2, 2, 3, 6, 6);
        let (y1, _) = b1.forward(&x, Mode::Train).unwrap();
        let (y2, _) = b2.forward(&y1, Mode::Train).unwrap();
        assert_eq!(y2.dims(), x.dims());
    }

    #[test]
    fn block_parameter_gradients_pass_finite_differences() {
        use crate::gradcheck::rel_err;
        let mut rng = InitRng::seed_from_u64(5);
        let mut block = DconvBlock::<f64>::new("blk", &mut rng, 2, 3, 3);
        // Nonzero offset weights so the offset path is exercised too.
        let mut rng2 = ChaCha8Rng::seed_from_u64(21);
        for v in block.offset_conv.weight.value_mut().data_mut() {
            *v = rng2.gen_range(-0.05..0.05);
        }
        let x = rand_tensor(&mut rng2, 2, 2, 5, 5);

        let (y, ctx) = block.forward(&x, Mode::Train).unwrap();
        let gy = y.map(|v| 2.0 * v);
        block.zero_grads_local();
        block.backward(&ctx, &gy);

        // Probe a few parameters of every kind with central differences.
        let mut probes: Vec<(String, usize)> = Vec::new();
        block.visit_params(&mut |p| {
            probes.push((p.name().to_string(), p.numel() / 2));
        });
        for (pname, idx) in probes {
            let mut get_loss = |delta: f64| -> f64 {
                block.visit_params(&mut |p| {
                    if p.name() == pname {
                        p.value_mut().data_mut()[idx] += delta;
                    }
                });
                let (yy, _) = block.forward(&x, Mode::Train).unwrap();
                block.visit_params(&mut |p| {
                    if p.name() == pname {
                        p.value_mut().data_mut()[idx] -= delta;
                    }
                });
                yy.data().iter().map(|v| v * v).sum()
            };
            let h = 1e-6;
            let numeric = (get_loss(h) - get_loss(-h)) / (2.0 * h);
            let mut analytic = f64::NAN;
            block.visit_params(&mut |p| {
                if p.name() == pname {
                    analytic = p.grad().data()[idx];
                }
            });
            let re = rel_err(analytic, numeric);
            assert!(
                re < 1e-4 || (analytic.abs() < 1e-10 && numeric.abs() < 1e-7),
                "{pname}[{idx}]: analytic {analytic}, numeric {numeric}, rel {re}"
            );
        }
    }

    impl DconvBlock<f64> {
        fn zero_grads_local(&mut self) {
            self.visit_params(&mut |p| p.zero_grad());
        }
    }
}
