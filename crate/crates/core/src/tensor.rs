//! Dense NCHW tensors over f32 (training) or f64 (gradient checking).

use num_traits::Float;
use std::fmt;

/// Element type for all kernels. f32 is the training precision, f64 exists so
/// finite-difference checks are not drowned in rounding noise.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Row-major (n, c, h, w) tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<E = f32> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![E::zero(); n * c * h * w],
        }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, v: E) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![v; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<E>) -> Self {
        assert_eq!(
            data.len(),
            n * c * h * w,
            "data length {} does not match shape ({n},{c},{h},{w})",
            data.len()
        );
        Tensor { n, c, h, w, data }
    }

    /// Builds a single-sample (1, c, h, w) tensor.
    pub fn from_chw(c: usize, h: usize, w: usize, data: Vec<E>) -> Self {
        Self::from_vec(1, c, h, w, data)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    #[inline(always)]
    pub fn off(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.off(n, c, y, x)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut E {
        let i = self.off(n, c, y, x);
        &mut self.data[i]
    }

    /// The (h*w) slice of one channel plane.
    pub fn plane(&self, n: usize, c: usize) -> &[E] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [E] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// The (c*h*w) slice of one sample.
    pub fn sample(&self, n: usize) -> &[E] {
        let chw = self.c * self.h * self.w;
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [E] {
        let chw = self.c * self.h * self.w;
        &mut self.data[n * chw..(n + 1) * chw]
    }

    pub fn fill(&mut self, v: E) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: E) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }

    /// Elementwise self += other.
    pub fn add_assign(&mut self, other: &Tensor<E>) {
        assert_eq!(self.dims(), other.dims(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// Elementwise self += s * other.
    pub fn add_scaled(&mut self, other: &Tensor<E>, s: E) {
        assert_eq!(self.dims(), other.dims(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * *b;
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.as_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }

    /// Mean of squared elements.
    pub fn mean_sq(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        s / self.data.len() as f64
    }

    /// Converts element precision, rounding through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// Stacks single-sample tensors along the batch dimension.
    pub fn stack(samples: &[&Tensor<E>]) -> Tensor<E> {
        assert!(!samples.is_empty(), "stack of zero tensors");
        let (n0, c, h, w) = samples[0].dims();
        assert_eq!(n0, 1, "stack expects single-sample tensors");
        let mut out = Tensor::zeros(samples.len(), c, h, w);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.dims(), (1, c, h, w), "stack shape mismatch");
            out.sample_mut(i).copy_from_slice(s.data());
        }
        out
    }

    /// Extracts sample `n` as a (1, c, h, w) tensor.
    pub fn slice_sample(&self, n: usize) -> Tensor<E> {
        Tensor::from_vec(1, self.c, self.h, self.w, self.sample(n).to_vec())
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{:?}>({}, {}, {}, {})",
            E::DTYPE,
            self.n,
            self.c,
            self.h,
            self.w
        )
    }
}
