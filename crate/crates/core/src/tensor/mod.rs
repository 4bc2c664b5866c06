//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are value-semantic (cheap to clone, storage behind an `Arc`).
//! Gradient tracking is opt-in: a tensor participates in autodiff only when
//! it was registered on a [`Tape`] as a leaf or produced by an operation on
//! tracked inputs. Operations on untracked tensors evaluate eagerly and
//! record nothing, which is how teacher networks and detached branches run.

mod ops;
mod tape;

pub mod gradcheck;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::Tape;

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

/// Numeric domain guard for division and normalization denominators.
pub const DOMAIN_EPS: f64 = 1e-12;

/// Scalar element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const BITS: u32;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Shape constructor rejected the extents (rank 1..=4, extents >= 1).
    InvalidShape { dims: Vec<usize>, reason: &'static str },
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Trailing-dimension broadcasting failed.
    NotBroadcastable { left: Vec<usize>, right: Vec<usize> },
    /// A value left the numeric domain (division by ~0, log of a
    /// non-positive value, sqrt of a negative value).
    NumericDomain { op: &'static str, detail: String },
    AxisOutOfRange { axis: usize, rank: usize },
    NonPositiveTemperature { value: f64 },
    /// `backward` requires a scalar loss.
    NonScalarLoss { numel: usize },
    /// The tensor is not attached to any tape.
    NoTape,
    /// Operands belong to two different tapes.
    TapeMismatch,
    /// Catch-all precondition failure for loss/operation arguments.
    InvalidArgument { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidShape { dims, reason } => {
                write!(f, "invalid shape {dims:?}: {reason}")
            }
            Self::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Self::NotBroadcastable { left, right } => {
                write!(f, "shapes {left:?} and {right:?} are not broadcastable")
            }
            Self::NumericDomain { op, detail } => write!(f, "{op}: numeric domain error: {detail}"),
            Self::AxisOutOfRange { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Self::NonPositiveTemperature { value } => {
                write!(f, "temperature must be positive, got {value}")
            }
            Self::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Self::NoTape => write!(f, "tensor is not attached to a tape"),
            Self::TapeMismatch => write!(f, "operands belong to different tapes"),
            Self::InvalidArgument { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major extents, rank 1 through 4, every extent >= 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "rank must be between 1 and 4",
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "every extent must be >= 1",
            });
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense tensor with optional gradient tracking.
pub struct Tensor<S: Scalar> {
    shape: Shape,
    values: Arc<Vec<S>>,
    node: Option<tape::NodeHandle<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: self.node.clone(),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Untracked tensor from raw row-major values.
    pub fn from_vec(dims: &[usize], values: Vec<S>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != values.len() {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "value count does not match shape element count",
            });
        }
        Ok(Tensor {
            shape,
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn scalar(v: S) -> Self {
        Tensor::from_vec(&[1], vec![v]).expect("scalar shape is valid")
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            values: Arc::new(vec![S::zero(); n]),
            node: None,
        })
    }

    pub fn full(dims: &[usize], v: S) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            values: Arc::new(vec![v; n]),
            node: None,
        })
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, S::one())
    }

    /// Identity matrix, used as the positive-pair mask in contrastive losses.
    pub fn eye(n: usize) -> Result<Self> {
        let mut v = vec![S::zero(); n * n];
        for i in 0..n {
            v[i * n + i] = S::one();
        }
        Tensor::from_vec(&[n, n], v)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// Single stored value of a scalar tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                numel: self.numel(),
            });
        }
        Ok(self.values[0])
    }

    /// Whether gradients flow through this tensor.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, severed from the tape: no gradient flows through the result.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    /// Gradient accumulated by the most recent `backward` on this tensor's
    /// tape, shaped like the tensor itself. `None` when untracked or when no
    /// gradient reached it.
    pub fn grad(&self) -> Option<Tensor<S>> {
        let handle = self.node.as_ref()?;
        let values = handle.grad_values()?;
        Some(Tensor {
            shape: self.shape.clone(),
            values: Arc::new(values),
            node: None,
        })
    }

    /// Runs reverse-mode accumulation from this scalar loss over its tape.
    pub fn backward(&self) -> Result<()> {
        let handle = self.node.as_ref().ok_or(TensorError::NoTape)?;
        handle.tape().backward(self)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.values)
    }

    pub(crate) fn node(&self) -> Option<&tape::NodeHandle<S>> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(
        shape: Shape,
        values: Arc<Vec<S>>,
        node: Option<tape::NodeHandle<S>>,
    ) -> Self {
        Tensor {
            shape,
            values,
            node,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_rank_and_zero_extents() {
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 2, 3, 4, 5]).is_err());
        assert!(Shape::new(&[2, 0]).is_err());
        assert_eq!(Shape::new(&[2, 3]).unwrap().numel(), 6);
    }

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(t.numel(), 4);
        assert!(!t.is_tracked());
    }

    #[test]
    fn detach_preserves_values_exactly() {
        let t = Tensor::<f64>::from_vec(&[3], vec![1.5, -2.25, 0.0]).unwrap();
        let d = t.detach();
        assert_eq!(d.values(), t.values());
        assert!(!d.is_tracked());
    }
}
