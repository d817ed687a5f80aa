//! Dense NCHW tensors and the numerical kernels every other module is built from.
//!
//! A [`Tensor`] is always rank 4 (`batch, channels, rows, cols`) with row-major
//! contiguous storage. Float tensors carry activations and parameters; `i8` and
//! `i32` tensors carry the quantized network.

mod conv;
mod norm;
mod ops;
mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_reference, ConvGrads, ConvParams};
pub use norm::{batchnorm, batchnorm_train, batchnorm_train_backward, BatchNormParams, BnMode, BnTrainCache};
pub use ops::{add, add_assign, elementwise, relu, relu_backward_in_place, sigmoid, sigmoid_scalar, Elementwise};
pub use pool::{avgpool_same, max_unpool2x2, max_unpool2x2_backward, max_unpool2x2_fill, maxpool2x2, maxpool2x2_backward};

use crate::error::{Error, Result};

/// Logical dimensions of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Element domains a tensor may hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub const fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

/// Scalar types that can live in a [`Tensor`].
pub trait Element: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
    fn to_le_bytes_into(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn to_le_bytes_into(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for i8 {
    const DTYPE: DType = DType::I8;
    fn to_le_bytes_into(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        bytes[0] as i8
    }
}

impl Element for i32 {
    const DTYPE: DType = DType::I32;
    fn to_le_bytes_into(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        i32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

pub type TensorI8 = Tensor<i8>;
pub type TensorI32 = Tensor<i32>;

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::default(); shape.numel()] }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "{} elements supplied for shape {shape} ({} expected)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The contiguous `h*w` plane for `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape.c * self.shape.plane();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// Copies sample `n` out as a batch of one.
    pub fn select(&self, n: usize) -> Self {
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.sample(n).to_vec(),
        }
    }

    /// Concatenates equally shaped tensors along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * parts.len());
        let mut n = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::shape(format!("cannot stack {} with {}", p.shape, s)));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: Shape::new(n, s.c, s.h, s.w), data })
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }
}

impl Tensor<f32> {
    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    /// Checks the finite-values invariant, naming `what` on failure.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<f32>) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn scale(&mut self, k: f32) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// Horizontal mirror (columns reversed) of every plane.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        let w = self.shape.w;
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }

    /// Vertical mirror (rows reversed) of every plane.
    pub fn flip_vertical(&self) -> Self {
        let Shape { n, c, h, w } = self.shape;
        let mut out = self.clone();
        for p in 0..n * c {
            for y in 0..h {
                let src = &self.data[(p * h + (h - 1 - y)) * w..][..w];
                out.data[(p * h + y) * w..][..w].copy_from_slice(src);
            }
        }
        out
    }
}

#[cfg(debug_assertions)]
#[inline]
pub(crate) fn debug_check_finite(t: &Tensor<f32>, what: &str) {
    debug_assert!(t.data().iter().all(|v| v.is_finite()), "non-finite value in {what}");
}

#[cfg(not(debug_assertions))]
#[inline]
pub(crate) fn debug_check_finite(_: &Tensor<f32>, _: &str) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        let t = Tensor::<i8>::from_vec(Shape::new(1, 2, 1, 2), vec![1, 2, 3, 4]).unwrap();
        assert_eq!(t.at(0, 1, 0, 0), 3);
        assert_eq!(t.dtype(), DType::I8);
    }

    #[test]
    fn flips_are_involutions() {
        let t = Tensor::from_vec(Shape::new(1, 2, 2, 3), (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.flip_horizontal().at(0, 0, 0, 0), 2.0);
        assert_eq!(t.flip_vertical().at(0, 1, 0, 0), 9.0);
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
        assert_eq!(t.flip_vertical().flip_vertical(), t);
    }

    #[test]
    fn stack_and_select() {
        let a = Tensor::full(Shape::new(1, 1, 2, 2), 1.0f32);
        let b = Tensor::full(Shape::new(1, 1, 2, 2), 2.0f32);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 1, 2, 2));
        assert_eq!(s.select(1), b);
        let c = Tensor::full(Shape::new(1, 2, 2, 2), 0.0f32);
        assert!(Tensor::stack(&[&a, &c]).is_err());
    }

    #[test]
    fn ensure_finite_rejects_nan() {
        let mut t = Tensor::zeros(Shape::new(1, 1, 1, 2));
        assert!(t.ensure_finite("t").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(matches!(t.ensure_finite("t"), Err(Error::NonFinite(_))));
    }
}
