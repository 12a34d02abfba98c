//! Dense f64 tensor type and reverse-mode autodiff graph.
//!
//! Everything is 64-bit and row-major. The op set is deliberately small:
//! exactly what the detection pipeline needs, each op with a registered
//! backward rule that is validated against central finite differences.

mod graph;
mod gradcheck;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{Graph, ReduceKind, ValId};

use std::fmt;

/// Errors raised by tensor construction and graph ops.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape extents.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// Two shapes cannot be aligned under trailing-dimension broadcasting.
    NotBroadcastable { a: Vec<usize>, b: Vec<usize> },
    /// Inner dimensions of a matrix product disagree.
    InnerDimMismatch { a: Vec<usize>, b: Vec<usize> },
    /// Input channel count of a convolution does not match the kernel.
    ChannelMismatch { input: usize, kernel: usize },
    /// A shape is invalid for the requested op (wrong rank, zero output extent, ...).
    InvalidShape(String),
    /// Axis index out of range or repeated.
    BadAxis { axis: usize, rank: usize },
    /// Reduction over a zero-sized extent.
    EmptyReduction,
    /// `log` saw a value <= 0.
    NonPositiveLog(f64),
    /// Non-finite value where a finite one is required.
    NonFinite,
    /// `backward` called twice on the same graph without reset.
    BackwardAlreadyRun,
    /// `backward` called on a non-scalar value.
    NotScalarLoss { numel: usize },
    /// Two forward passes of a supposedly deterministic builder disagreed.
    NonDeterministic,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {:?} implies {} values, got {}", shape, shape.iter().product::<usize>(), len)
            }
            TensorError::NotBroadcastable { a, b } => write!(f, "shapes {:?} and {:?} do not broadcast", a, b),
            TensorError::InnerDimMismatch { a, b } => write!(f, "matmul inner dims disagree: {:?} x {:?}", a, b),
            TensorError::ChannelMismatch { input, kernel } => {
                write!(f, "conv input has {} channels, kernel expects {}", input, kernel)
            }
            TensorError::InvalidShape(msg) => write!(f, "invalid shape: {}", msg),
            TensorError::BadAxis { axis, rank } => write!(f, "axis {} out of range for rank {}", axis, rank),
            TensorError::EmptyReduction => write!(f, "reduction over an empty extent"),
            TensorError::NonPositiveLog(v) => write!(f, "log of non-positive value {}", v),
            TensorError::NonFinite => write!(f, "non-finite value"),
            TensorError::BackwardAlreadyRun => write!(f, "backward already run on this graph"),
            TensorError::NotScalarLoss { numel } => write!(f, "backward needs a scalar loss, got {} elements", numel),
            TensorError::NonDeterministic => write!(f, "computation builder is not deterministic"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major f64 tensor.
///
/// Data is immutable once the tensor is on a [`Graph`]; only the `grad`
/// buffer is filled in later by `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, checking length and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// Same as [`Tensor::from_vec`] with `requires_grad` set.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::from_vec(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n], requires_grad: false, grad: None }
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    /// Uniform values in `[lo, hi)` drawn from `rng`.
    pub fn uniform<R: rand::Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value at a full multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &c) in idx.iter().enumerate() {
            debug_assert!(c < self.shape[i]);
            flat = flat * self.shape[i] + c;
        }
        self.data[flat]
    }

    /// Mark this tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape under trailing-dimension alignment.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::NotBroadcastable { a: a.to_vec(), b: b.to_vec() });
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if expanded to `out_shape`,
/// with stride 0 on broadcast dimensions.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides_of(shape);
    let offset = rank - shape.len();
    let mut s = vec![0usize; rank];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Walk every linear index of `out_shape` together with the source indices of
/// two broadcast operands. Index stepping is incremental (odometer walk).
pub(crate) fn zip_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for out_i in 0..numel {
        f(out_i, ai, bi);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += a_strides[d];
            bi += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ai -= out_shape[d] * a_strides[d];
            bi -= out_shape[d] * b_strides[d];
            coords[d] = 0;
        }
    }
}

/// Sum a gradient of `from_shape` down to `to_shape` (undo broadcasting).
pub(crate) fn reduce_grad_to_shape(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let to_numel: usize = to_shape.iter().product();
    let mut out = vec![0.0; to_numel];
    let t_strides = broadcast_strides(to_shape, from_shape);
    let f_strides_dummy = vec![0usize; from_shape.len()];
    zip_broadcast(from_shape, &t_strides, &f_strides_dummy, |from_i, to_i, _| {
        out[to_i] += grad[from_i];
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert_eq!(Tensor::from_vec(vec![2], vec![1.0, f64::NAN]), Err(TensorError::NonFinite));
        assert_eq!(Tensor::from_vec(vec![1], vec![f64::INFINITY]), Err(TensorError::NonFinite));
    }

    #[test]
    fn broadcast_shapes_align_trailing() {
        assert_eq!(broadcast_shape(&[2, 3, 1, 1], &[2, 3, 4, 4]).unwrap(), vec![2, 3, 4, 4]);
        assert_eq!(broadcast_shape(&[3], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[], &[5, 2]).unwrap(), vec![5, 2]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn reduce_grad_undoes_broadcast() {
        // grad of shape [2,2] summed down to [2,1]
        let g = [1.0, 2.0, 3.0, 4.0];
        let out = reduce_grad_to_shape(&g, &[2, 2], &[2, 1]);
        assert_eq!(out, vec![3.0, 7.0]);
        let out = reduce_grad_to_shape(&g, &[2, 2], &[2]);
        assert_eq!(out, vec![4.0, 6.0]);
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
    }
}
