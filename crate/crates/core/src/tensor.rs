//! Dense rank-4 arrays in (N, C, H, W) row-major layout.

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor4`]: `f64` by default, `f32` as an opt-in.
pub trait Scalar: Float + Copy + Default + std::fmt::Debug + Send + Sync + 'static {}

impl Scalar for f64 {}
impl Scalar for f32 {}

pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T: Scalar = f64> {
    shape: Shape,
    data: Vec<T>,
}

pub type Tensor = Tensor4<f64>;

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    /// Checked constructor: length must match and every value must be finite.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape("tensor", &[numel(shape)], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor of shape {shape:?}")));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Unchecked constructor for internal kernels; panics on length mismatch.
    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), numel(shape), "tensor length for {shape:?}");
        Tensor4 { shape, data }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    /// Per-channel vector stored as (1, C, 1, 1).
    pub fn channel_vector(values: &[T]) -> Self {
        Tensor4 {
            shape: [1, values.len(), 1, 1],
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor4 {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape("zip", other)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        self.check_same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Precision conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("float cast"))
                .collect(),
        }
    }

    /// Copy of sample `n` as a (1, C, H, W) tensor.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor4 {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checked_constructor_rejects_bad_input() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let err = Tensor::from_vec([1, 1, 1, 2], vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(Tensor::from_vec([1, 1, 1, 1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::from_fn([2, 3, 4, 5], |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f64);
        assert_eq!(t.at([1, 2, 3, 4]), 1234.0);
        assert_eq!(t.data()[t.offset([1, 0, 0, 0])], 1000.0);
        assert_eq!(t.sample(1).at([0, 2, 3, 4]), 1234.0);
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -1.25, 3.0]).unwrap();
        let f: Tensor4<f32> = t.cast();
        assert_eq!(f.cast::<f64>(), t);
    }
}
