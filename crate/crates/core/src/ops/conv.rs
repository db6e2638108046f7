//! Plain 2-D convolution via im2col + matmul, with explicit backward.

use crate::error::{CoreError, Result};
use crate::init::{conv_weight, InitRng};
use crate::linalg::{mm_abt_acc, mm_acc, mm_atb_acc};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Output spatial size for one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Writes the im2col matrix (cin*k*k rows, oh*ow columns) for one sample.
pub fn im2col<E: Scalar>(
    x: &Tensor<E>,
    n: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [E],
) {
    let (_, cin, h, w) = x.dims();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    assert_eq!(col.len(), cin * k * k * oh * ow);
    col.iter_mut().for_each(|v| *v = E::zero());
    for ci in 0..cin {
        let plane = x.plane(n, ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = iy as usize * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            col[dst + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of an im2col matrix back onto the input grid.
fn col2im_acc<E: Scalar>(
    col: &[E],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [E],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    assert_eq!(out.len(), cin * h * w);
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + iy as usize * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst + ix as usize] = out[dst + ix as usize] + col[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// conv2d(x, weight, bias, stride, pad) with weight (cout, cin, k, k).
pub fn conv2d<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &[E],
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (n, cin, h, w) = x.dims();
    let (cout, wcin, k, k2) = weight.dims();
    if wcin != cin || k != k2 {
        return Err(CoreError::shape(
            "conv2d",
            format!("weight (_, {cin}, k, k)"),
            format!("weight ({cout}, {wcin}, {k}, {k2}) on input ({n}, {cin}, {h}, {w})"),
        ));
    }
    assert_eq!(bias.len(), cout, "conv2d bias length");
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let kk = cin * k * k;
    let mut y = Tensor::zeros(n, cout, oh, ow);

    let planes: Vec<&mut [E]> = {
        let chw = cout * oh * ow;
        y.data_mut().chunks_mut(chw).collect()
    };
    planes.into_par_iter().enumerate().for_each(|(i, ysb)| {
        let mut col = vec![E::zero(); kk * oh * ow];
        im2col(x, i, k, stride, pad, &mut col);
        mm_acc(ysb, weight.data(), &col, cout, kk, oh * ow);
        for co in 0..cout {
            let b = bias[co];
            for v in &mut ysb[co * oh * ow..(co + 1) * oh * ow] {
                *v = *v + b;
            }
        }
    });
    Ok(y)
}

pub struct ConvGrads<E> {
    pub gx: Tensor<E>,
    pub gw: Tensor<E>,
    pub gb: Vec<E>,
}

/// Backward of `conv2d` for the given upstream gradient.
pub fn conv2d_backward<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<E>,
) -> ConvGrads<E> {
    let (n, cin, h, w) = x.dims();
    let (cout, _, k, _) = weight.dims();
    let (gn, gc, oh, ow) = grad_out.dims();
    assert_eq!((gn, gc), (n, cout), "conv2d_backward grad shape");
    let kk = cin * k * k;
    let mut gx = Tensor::zeros(n, cin, h, w);

    let gx_samples: Vec<&mut [E]> = gx.data_mut().chunks_mut(cin * h * w).collect();
    let partials: Vec<(Tensor<E>, Vec<E>)> = gx_samples
        .into_par_iter()
        .enumerate()
        .map(|(i, gxs)| {
            let mut col = vec![E::zero(); kk * oh * ow];
            im2col(x, i, k, stride, pad, &mut col);
            let g = grad_out.sample(i);

            let mut gw = Tensor::zeros(cout, cin, k, k);
            mm_abt_acc(gw.data_mut(), g, &col, cout, oh * ow, kk);

            let mut gb = vec![E::zero(); cout];
            for co in 0..cout {
                let mut acc = E::zero();
                for &v in &g[co * oh * ow..(co + 1) * oh * ow] {
                    acc = acc + v;
                }
                gb[co] = acc;
            }

            let mut gcol = vec![E::zero(); kk * oh * ow];
            mm_atb_acc(&mut gcol, weight.data(), g, cout, kk, oh * ow);
            col2im_acc(&gcol, cin, h, w, k, stride, pad, gxs);
            (gw, gb)
        })
        .collect();

    let mut gw = Tensor::zeros(cout, cin, k, k);
    let mut gb = vec![E::zero(); cout];
    for (pw, pb) in partials {
        gw.add_assign(&pw);
        for (a, b) in gb.iter_mut().zip(pb) {
            *a = *a + b;
        }
    }
    ConvGrads { gx, gw, gb }
}

/// Convolution layer owning its weight and bias.
pub struct Conv2d<E> {
    pub weight: Param<E>,
    pub bias: Param<E>,
    pub stride: usize,
    pub pad: usize,
    k: usize,
}

impl<E: Scalar> Conv2d<E> {
    /// Same-padding layer (pad = k/2) with 1/sqrt(fan-in) uniform init.
    pub fn new(
        name: &str,
        rng: &mut InitRng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let weight = conv_weight(rng, cout, cin, k);
        Conv2d {
            weight: Param::new(format!("{name}.weight"), weight, vec![cout, cin, k, k]),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::zeros(cout, 1, 1, 1),
                vec![cout],
            ),
            stride,
            pad: k / 2,
            k,
        }
    }

    /// All-zero weights and bias; used by deformable offset branches.
    pub fn new_zeroed(name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::zeros(cout, cin, k, k),
                vec![cout, cin, k, k],
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::zeros(cout, 1, 1, 1),
                vec![cout],
            ),
            stride: 1,
            pad: k / 2,
            k,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(
            x,
            self.weight.value(),
            self.bias.value().data(),
            self.stride,
            self.pad,
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
        let g = conv2d_backward(x, self.weight.value(), self.stride, self.pad, grad_out);
        self.weight.grad_mut().add_assign(&g.gw);
        for (a, b) in self.bias.grad_mut().data_mut().iter_mut().zip(&g.gb) {
            *a = *a + *b;
        }
        g.gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
