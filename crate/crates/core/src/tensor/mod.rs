//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Values live in plain [`Tensor`]s; differentiable computation is recorded on
//! a [`Tape`] which hands out [`Var`] handles and replays the recorded
//! operations in reverse on [`Tape::backward`]. Gradients are available for
//! every leaf created with `requires_grad`, including leaves that carry input
//! coordinates rather than parameters.

mod kernels;
mod tape;

pub mod gradcheck;

pub use tape::{Gradients, Plane, Tape, Var};

use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{NemfError, NemfResult};

/// Element type of a [`Tensor`]: 32- or 64-bit IEEE floats.
pub trait Scalar:
    Float
    + FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn to_f32_le(self) -> [u8; 4] {
        (self.to_f64() as f32).to_le_bytes()
    }
    fn from_f32_le(bytes: [u8; 4]) -> Self {
        Self::of(f32::from_le_bytes(bytes) as f64)
    }
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor. The payload is shared behind an [`Arc`], so clones
/// are cheap and mutation is copy-on-write.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> NemfResult<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NemfError::InvalidShape {
                op: "from_vec",
                shape,
                reason: "zero extent".into(),
            });
        }
        if numel(&shape) != data.len() {
            return Err(NemfError::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("payload holds {} values", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel(shape)]),
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel(shape)]),
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::full(&[1], v)
    }

    /// Uniform draw in `[lo, hi)`. Values are sampled in f64 so that f32 and
    /// f64 tensors built from the same seeded stream stay comparable.
    pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::of(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    /// He/Kaiming uniform initialization with the given fan-in.
    pub fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Tensor::uniform(rng, shape, -bound, bound)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, v: bool) {
        self.requires_grad = v;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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
        if Arc::get_mut(&mut self.data).is_none() {
            self.data = Arc::new(self.data.as_ref().clone());
        }
        Arc::get_mut(&mut self.data).expect("unique after copy-on-write")
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same payload under a new shape; extent product must match.
    pub fn reshaped(&self, shape: &[usize]) -> NemfResult<Self> {
        if numel(shape) != self.numel() {
            return Err(NemfError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("source holds {} values", self.numel()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            requires_grad: false,
        }
    }
}

/// Row-major offset for a multi-index.
pub(crate) fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut off = 0;
    for (d, &i) in idx.iter().enumerate() {
        debug_assert!(i < shape[d]);
        off = off * shape[d] + i;
    }
    off
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_extent_product() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0f64; 5]).unwrap_err();
        assert!(matches!(err, NemfError::InvalidShape { .. }));
        let ok = Tensor::from_vec(vec![2, 3], vec![1.0f64; 6]).unwrap();
        assert_eq!(ok.numel(), 6);
    }

    #[test]
    fn reshape_shares_payload() {
        let t = Tensor::from_vec(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn flat_index_is_row_major() {
        assert_eq!(flat_index(&[2, 3, 4], &[1, 2, 3]), 23);
        assert_eq!(flat_index(&[2, 3, 4], &[0, 0, 0]), 0);
    }
}
