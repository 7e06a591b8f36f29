//! Dense rank-4 tensors in batch/channel/height/width layout.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Axis, OpError};

/// Scalar element type for tensors. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking).
pub trait Element:
    num_traits::Float + num_traits::NumAssignOps + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Extents of a rank-4 tensor: batch, channels, rows, columns.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of element (n, c, y, x): ((n·C + c)·H + y)·W + x.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn axes(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub(crate) fn check_axis(
        &self,
        op: &'static str,
        axis: Axis,
        expected: usize,
    ) -> Result<(), OpError> {
        let actual = match axis {
            Axis::Batch => self.n,
            Axis::Channel => self.c,
            Axis::Height => self.h,
            Axis::Width => self.w,
        };
        if actual != expected {
            return Err(OpError::AxisMismatch { op, axis, expected, actual });
        }
        Ok(())
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor. Values are immutable once produced by an operation;
/// mutation is reserved for parameter storage (optimizer updates, loading).
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Self {
        assert_eq!(
            data.len(),
            shape.len(),
            "data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![E::zero(); shape.len()] }
    }

    pub fn full(shape: Shape, value: E) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, E::one())
    }

    /// Ramp 0, 1, 2, ... in layout order. Handy in tests.
    pub fn ramp(shape: Shape) -> Self {
        let data = (0..shape.len()).map(|i| E::from_f64(i as f64)).collect();
        Tensor { shape, data }
    }

    /// Standard-normal samples scaled by `std`. Draws are made in f64 and
    /// narrowed, so a given rng stream yields the same values at either
    /// precision.
    pub fn randn<R: Rng>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                E::from_f64(v * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.shape.offset(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut E {
        let i = self.shape.offset(n, c, y, x);
        &mut self.data[i]
    }

    /// Contiguous (h·w) plane for one (n, c).
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[E] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn scalar(&self) -> E {
        assert_eq!(self.data.len(), 1, "scalar() on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Tensor<E> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Widen/narrow to another precision (used by gradient checking setups).
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}, {} elems)", self.shape, self.data.len())
    }
}

/// Dense integer label map of shape (n, h, w). Entries are class indices or
/// an ignore marker.
#[derive(Clone, PartialEq, Eq)]
pub struct Labels {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u32>,
}

impl Labels {
    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u32>) -> Self {
        assert_eq!(data.len(), n * h * w);
        Labels { n, h, w, data }
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u32) -> Self {
        Labels { n, h, w, data: vec![value; n * h * w] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u32 {
        self.data[(n * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, y: usize, x: usize) -> &mut u32 {
        &mut self.data[(n * self.h + y) * self.w + x]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }
}

impl fmt::Debug for Labels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Labels({}x{}x{})", self.n, self.h, self.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_maps_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.offset(0, 0, 0, 0), 0);
        assert_eq!(s.offset(0, 0, 0, 1), 1);
        assert_eq!(s.offset(0, 0, 1, 0), 5);
        assert_eq!(s.offset(0, 1, 0, 0), 20);
        assert_eq!(s.offset(1, 0, 0, 0), 60);
        assert_eq!(s.offset(1, 2, 3, 4), ((1 * 3 + 2) * 4 + 3) * 5 + 4);
    }

    #[test]
    fn data_length_matches_shape() {
        let t = Tensor::<f32>::zeros(Shape::new(2, 3, 4, 5));
        assert_eq!(t.len(), 120);
        assert_eq!(t.shape().len(), 120);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_wrong_length() {
        let _ = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]);
    }

    #[test]
    fn randn_is_precision_consistent() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::randn(Shape::new(1, 2, 3, 3), 1.0, &mut r1);
        let b = Tensor::<f64>::randn(Shape::new(1, 2, 3, 3), 1.0, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
