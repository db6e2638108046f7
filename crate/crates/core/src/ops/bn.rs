//! Batch normalization over (n, h, w) per channel.

use crate::error::{CoreError, Result};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Saved context for the backward pass.
pub struct BnCtx<E> {
    xhat: Tensor<E>,
    inv_std: Vec<E>,
    mode: Mode,
}

pub struct BatchNorm2d<E> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Scalar> BatchNorm2d<E> {
    pub fn new(name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(c, 1, 1, 1, E::one()), vec![c]),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(c, 1, 1, 1), vec![c]),
            running_mean: vec![E::zero(); c],
            running_var: vec![E::one(); c],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Train mode normalizes with batch statistics and updates running stats;
    /// eval mode normalizes with the running statistics.
    pub fn forward(&mut self, x: &Tensor<E>, mode: Mode) -> Result<(Tensor<E>, BnCtx<E>)> {
        let (n, c, h, w) = x.dims();
        assert_eq!(c, self.channels(), "batchnorm channel count");
        let cnt = n * h * w;
        if mode == Mode::Train && cnt <= 1 {
            return Err(CoreError::Config(format!(
                "batchnorm train mode needs more than one value per channel, got n*h*w = {cnt}"
            )));
        }
        let eps = E::from_f64(self.eps);
        let mut xhat = Tensor::zeros(n, c, h, w);
        let mut inv_std = vec![E::zero(); c];
        let mut y = Tensor::zeros(n, c, h, w);

        for ci in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = E::zero();
                    for ni in 0..n {
                        for &v in x.plane(ni, ci) {
                            sum = sum + v;
                        }
                    }
                    let mean = sum / E::from_f64(cnt as f64);
                    let mut ss = E::zero();
                    for ni in 0..n {
                        for &v in x.plane(ni, ci) {
                            let d = v - mean;
                            ss = ss + d * d;
                        }
                    }
                    let var = ss / E::from_f64(cnt as f64);
                    let m = E::from_f64(self.momentum);
                    let one_m = E::one() - m;
                    // Unbiased variance feeds the running estimate.
                    let var_unbiased = ss / E::from_f64((cnt - 1) as f64);
                    self.running_mean[ci] = one_m * self.running_mean[ci] + m * mean;
                    self.running_var[ci] = one_m * self.running_var[ci] + m * var_unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[ci], self.running_var[ci]),
            };
            let istd = E::one() / (var + eps).sqrt();
            inv_std[ci] = istd;
            let g = self.gamma.value().data()[ci];
            let b = self.beta.value().data()[ci];
            for ni in 0..n {
                let off = x.off(ni, ci, 0, 0);
                for i in 0..h * w {
                    let xh = (x.data()[off + i] - mean) * istd;
                    xhat.data_mut()[off + i] = xh;
                    y.data_mut()[off + i] = g * xh + b;
                }
            }
        }
        Ok((y, BnCtx { xhat, inv_std, mode }))
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, ctx: &BnCtx<E>, grad_out: &Tensor<E>) -> Tensor<E> {
        let (n, c, h, w) = ctx.xhat.dims();
        assert_eq!(grad_out.dims(), (n, c, h, w), "batchnorm backward shape");
        let cnt = E::from_f64((n * h * w) as f64);
        let mut gx = Tensor::zeros(n, c, h, w);
        for ci in 0..c {
            let mut sum_dy = E::zero();
            let mut sum_dy_xhat = E::zero();
            for ni in 0..n {
                let off = ctx.xhat.off(ni, ci, 0, 0);
                for i in 0..h * w {
                    let dy = grad_out.data()[off + i];
                    sum_dy = sum_dy + dy;
                    sum_dy_xhat = sum_dy_xhat + dy * ctx.xhat.data()[off + i];
                }
            }
            self.beta.grad_mut().data_mut()[ci] = self.beta.grad().data()[ci] + sum_dy;
            self.gamma.grad_mut().data_mut()[ci] = self.gamma.grad().data()[ci] + sum_dy_xhat;

            let g = self.gamma.value().data()[ci];
            let istd = ctx.inv_std[ci];
            match ctx.mode {
                Mode::Train => {
                    let mean_dy = sum_dy / cnt;
                    let mean_dy_xhat = sum_dy_xhat / cnt;
                    for ni in 0..n {
                        let off = ctx.xhat.off(ni, ci, 0, 0);
                        for i in 0..h * w {
                            let dy = grad_out.data()[off + i];
                            let xh = ctx.xhat.data()[off + i];
                            gx.data_mut()[off + i] =
                                g * istd * (dy - mean_dy - xh * mean_dy_xhat);
                        }
                    }
                }
                Mode::Eval => {
                    for ni in 0..n {
                        let off = ctx.xhat.off(ni, ci, 0, 0);
                        for i in 0..h * w {
                            gx.data_mut()[off + i] = g * istd * grad_out.data()[off + i];
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_in_train_mode_yields_beta() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.beta.value_mut().data_mut()[0] = 0.7;
        bn.beta.value_mut().data_mut()[1] = -0.3;
        let x = Tensor::from_chw(2, 3, 3, vec![5.0; 18]);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for i in 0..9 {
            assert!((y.data()[i] - 0.7).abs() < 1e-9);
            assert!((y.data()[9 + i] + 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_mode_applies_running_stats_elementwise() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0;
        bn.gamma.value_mut().data_mut()[0] = 3.0;
        bn.beta.value_mut().data_mut()[0] = 1.0;
        let x = Tensor::from_chw(1, 1, 2, vec![2.0, 6.0]);
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        for (i, &xv) in x.data().iter().enumerate() {
            let want = 3.0 * (xv - 2.0) / (4.0f64 + 1e-5).sqrt() + 1.0;
            assert!((y.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, c, h, w) = (3, 4, 5, 2);
        let mut x = Tensor::<f64>::zeros(n, c, h, w);
        for v in x.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut bn = BatchNorm2d::<f64>::new("bn", c);
        for ci in 0..c {
            bn.gamma.value_mut().data_mut()[ci] = rng.gen_range(0.5..1.5);
            bn.beta.value_mut().data_mut()[ci] = rng.gen_range(-0.5..0.5);
        }
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();

        for ci in 0..c {
            // Two passes: mean first, then variance, straight from the definition.
            let mut vals = Vec::new();
            for ni in 0..n {
                vals.extend_from_slice(x.plane(ni, ci));
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            let g = bn.gamma.value().data()[ci];
            let b = bn.beta.value().data()[ci];
            for ni in 0..n {
                for (i, &xv) in x.plane(ni, ci).iter().enumerate() {
                    let want = g * (xv - mean) / (var + 1e-5).sqrt() + b;
                    let got = y.plane(ni, ci)[i];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn singleton_extent_in_train_mode_is_an_error() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        let x = Tensor::from_chw(1, 1, 1, vec![3.0]);
        assert!(bn.forward(&x, Mode::Train).is_err());
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }
}
