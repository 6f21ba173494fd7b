//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Everything continuous in the toolkit (features, encoder states, context
//! vectors, logits, parameters) lives in a [`Tensor`]. Differentiable
//! computations are recorded on a [`Tape`] and differentiated with
//! [`Tape::backward`].

mod gradcheck;
mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use gradcheck::{grad_check, grad_check_coords, ScalarFunction};
pub use kernels::{matmul_into, matmul_nt_into, matmul_tn_into};
pub use tape::{AttnSegment, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Floating point element type usable on a tape (`f32` for storage and
/// training, `f64` for gradient checks).
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    #[inline]
    fn cast(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a `[rows.len(), width]` matrix; every row must have `width` entries.
    pub fn from_rows(rows: &[Vec<T>], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} values, expected {width}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(&[rows.len(), width], data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Number of rows of a rank-2 tensor (1 for vectors, 1 for scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the innermost dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient has {} values, tensor {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::cast(v.as_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }
}

/// Numerically stable softmax of a single vector.
pub fn softmax<T: Float>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = x.to_vec();
    kernels::softmax_in_place(&mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    Ok(out)
}

/// Log-softmax of a single vector.
pub fn log_softmax<T: Float>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::invalid("log_softmax of an empty vector"));
    }
    let mut out = x.to_vec();
    kernels::log_softmax_in_place(&mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "log_softmax" });
    }
    Ok(out)
}

/// `log Σ exp(x)`, stable for large magnitudes.
pub fn logsumexp<T: Float>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = x.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let p = softmax(&[0.0f32, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[1000.0f32, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1] >= 0.0 && p[1] < 1e-6);
        assert!(softmax::<f32>(&[]).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = [0.3f64, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 17.25).collect();
        let a = softmax(&x).unwrap();
        let b = softmax(&shifted).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_shape_is_enforced() {
        let mut t = Tensor::<f32>::zeros(&[3]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0f32, 1.0, 1.0][..]));
    }
}
