//! Dense tensors stored as flat row-major buffers.
//!
//! Everything in the network is one of these: 4D feature maps (N, C, H, W),
//! 2D matrices, 1D filter banks and biases. The element type is generic so
//! training runs in `f32` while gradient checks run in `f64`.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

use crate::error::{shape_err, Result};

/// Scalar element type for all tensor math.
pub trait Real:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` literal into this type.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A dense tensor with an explicit shape. Data is row-major: the last
/// dimension is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Batched activation tensor with shape (N, C, H, W).
pub type FeatureMap<T> = TensorData<T>;

impl<T: Real> TensorData<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        TensorData { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        TensorData { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(TensorData { shape: shape.to_vec(), data })
    }

    /// Scalar (single element) tensor.
    pub fn scalar(v: T) -> Self {
        TensorData { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interpret as (N, C, H, W); errors if the rank is not 4.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(op, format!("expected rank-4 tensor, got shape {:?}", self.shape))),
        }
    }

    /// Interpret as (rows, cols); errors if the rank is not 2.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err(op, format!("expected rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} ({} elements) as {:?}", self.shape, self.numel(), shape),
            ));
        }
        Ok(TensorData { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type, rounding through `f64`.
    pub fn cast<U: Real>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        TensorData { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Feature-map constructor with the (N, C, H, W) layout spelled out.
pub fn feature_map<T: Real>(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<FeatureMap<T>> {
    TensorData::from_vec(&[n, c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(TensorData::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(TensorData::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = TensorData::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshaped(&[4]).unwrap();
        assert_eq!(r.shape(), &[4]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }

    #[test]
    fn cast_roundtrip() {
        let t = TensorData::<f32>::from_vec(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let d: TensorData<f64> = t.cast();
        let back: TensorData<f32> = d.cast();
        assert_eq!(back, t);
    }
}
