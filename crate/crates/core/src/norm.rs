//! Per-channel dataset normalization statistics.

use crate::tensor::{Scalar, Tensor};

/// Channel-wise mean and standard deviation, computed once over a dataset
/// and applied to every model input and regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-5;

impl NormStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population mean/std per channel over every pixel of every tensor.
    /// Standard deviations are floored at 1e-5.
    pub fn compute<'a, E: Scalar>(tensors: impl Iterator<Item = &'a Tensor<E>>) -> Self {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sumsq: Vec<f64> = Vec::new();
        for t in tensors {
            let (n, c, h, w) = t.dims();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sumsq = vec![0.0; c];
            }
            assert_eq!(sum.len(), c, "NormStats channel count changed mid-stream");
            for ni in 0..n {
                for ci in 0..c {
                    for &v in t.plane(ni, ci) {
                        let v = v.as_f64();
                        sum[ci] += v;
                        sumsq[ci] += v * v;
                    }
                }
            }
            count += n * h * w;
        }
        assert!(count > 0, "NormStats over an empty dataset");
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(ss, m)| ((ss / n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
            .collect();
        NormStats { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize<E: Scalar>(&self, x: &Tensor<E>) -> Tensor<E> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<E: Scalar>(&self, x: &Tensor<E>) -> Tensor<E> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply<E: Scalar>(&self, x: &Tensor<E>, f: impl Fn(f64, f64, f64) -> f64) -> Tensor<E> {
        let (n, c, h, w) = x.dims();
        assert_eq!(c, self.channels(), "NormStats channel count");
        let mut y = Tensor::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                let (m, s) = (self.mean[ci], self.std[ci]);
                for (o, &v) in y.plane_mut(ni, ci).iter_mut().zip(x.plane(ni, ci)) {
                    *o = E::from_f64(f(v.as_f64(), m, s));
                }
            }
        }
        y
    }

    /// Two f64 checkpoint records, `<prefix>.mean` and `<prefix>.std`.
    pub fn to_records(&self, prefix: &str) -> Vec<crate::checkpoint::Record> {
        vec![
            crate::checkpoint::Record::f64(
                format!("{prefix}.mean"),
                vec![self.mean.len()],
                self.mean.clone(),
            ),
            crate::checkpoint::Record::f64(
                format!("{prefix}.std"),
                vec![self.std.len()],
                self.std.clone(),
            ),
        ]
    }

    pub fn from_records(
        records: &[crate::checkpoint::Record],
        prefix: &str,
    ) -> crate::error::Result<Self> {
        let mean = crate::checkpoint::find(records, &format!("{prefix}.mean"))?
            .data
            .to_f64_vec();
        let std = crate::checkpoint::find(records, &format!("{prefix}.std"))?
            .data
            .to_f64_vec();
        if mean.len() != std.len() {
            return Err(crate::error::CoreError::Checkpoint(format!(
                "normalization stats disagree on channel count: {} vs {}",
                mean.len(),
                std.len()
            )));
        }
        Ok(NormStats { mean, std })
    }

    /// Gradient of `normalize` w.r.t. its input is 1/std per channel.
    pub fn normalize_backward<E: Scalar>(&self, grad_out: &Tensor<E>) -> Tensor<E> {
        let (n, c, h, w) = grad_out.dims();
        assert_eq!(c, self.channels(), "NormStats channel count");
        let mut g = Tensor::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                let s = self.std[ci];
                for (o, &v) in g.plane_mut(ni, ci).iter_mut().zip(grad_out.plane(ni, ci)) {
                    *o = E::from_f64(v.as_f64() / s);
                }
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sample_toy_set_gives_unit_std() {
        let a = Tensor::from_chw(1, 1, 1, vec![0.0f64]);
        let b = Tensor::from_chw(1, 1, 1, vec![2.0f64]);
        let s = NormStats::compute([&a, &b].into_iter());
        assert!((s.mean[0] - 1.0).abs() < 1e-12);
        assert!((s.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_is_floored_not_divided_to_infinity() {
        let a = Tensor::from_chw(2, 2, 2, vec![3.0f64; 8]);
        let s = NormStats::compute([&a].into_iter());
        assert_eq!(s.std[0], STD_FLOOR);
        let normed = s.normalize(&a);
        assert!(normed.is_finite());
        for &v in normed.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let x = Tensor::from_chw(2, 2, 2, vec![0.5, -1.0, 2.0, 0.0, 3.0, -2.5, 1.5, 4.0]);
        let s = NormStats {
            mean: vec![0.3, -0.2],
            std: vec![1.7, 0.4],
        };
        let back = s.denormalize(&s.normalize(&x));
        assert!(back.max_abs_diff(&x) < 1e-6);
    }
}
