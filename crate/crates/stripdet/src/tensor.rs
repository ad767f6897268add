//! Dense rank-4 tensor in row-major (batch, channels, height, width) order.

use crate::error::{Error, Result};
use crate::real::Real;
use std::fmt;

/// Dimensions of a [`Tensor4`]: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims4 { n, c, h, w }
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Flat index of element (b, c, i, j); width is the innermost axis.
    #[inline]
    pub fn index(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.c + c) * self.h + i) * self.w + j
    }

    /// Flat offset of the (b, c) spatial plane.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> usize {
        (b * self.c + c) * self.h * self.w
    }

    /// Spatial element count per plane.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Dims4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor. Immutable after construction by convention:
/// ops return fresh tensors, mutation is confined to constructors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims4,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: Dims4) -> Self {
        Tensor4 {
            dims,
            data: vec![T::ZERO; dims.count()],
        }
    }

    pub fn filled(dims: Dims4, value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.count()],
        }
    }

    /// Build from explicit contents; the data length must equal the dim product.
    pub fn from_vec(dims: Dims4, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.count() {
            return Err(Error::LengthMismatch {
                expected: dims.count(),
                actual: data.len(),
            });
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn scalar(value: T) -> Self {
        Tensor4 {
            dims: Dims4::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.dims.index(b, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: T) {
        let idx = self.dims.index(b, c, i, j);
        self.data[idx] = v;
    }

    /// Spatial plane (b, c) as a contiguous h*w slice.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let start = self.dims.plane(b, c);
        &self.data[start..start + self.dims.plane_len()]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let start = self.dims.plane(b, c);
        let len = self.dims.plane_len();
        &mut self.data[start..start + len]
    }

    /// Row (b, c, i) as a contiguous w slice.
    #[inline]
    pub fn row(&self, b: usize, c: usize, i: usize) -> &[T] {
        let start = self.dims.index(b, c, i, 0);
        &self.data[start..start + self.dims.w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite_real())
    }

    /// Value of a 1x1x1x1 tensor.
    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.dims.count(), 1);
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}
