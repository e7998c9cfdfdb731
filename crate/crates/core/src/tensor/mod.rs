//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a flat row-major buffer of `f32` or `f64`
//! values. Operations on tensors record a computation graph; calling
//! [`Tensor::backward`] on a scalar result fills the `grad` slot of every
//! reachable tensor that was created with `requires_grad`. Training runs in
//! `f32`; the `f64` instantiation exists for finite-difference gradient
//! checking.

mod adam;
mod ops;

pub use adam::{adam_step, lr_schedule, AdamState};
pub use ops::{
    add, add_bias, binary_cross_entropy, conv2d, conv2d_transpose, linear, matmul, maxpool2d,
    mean_all, mul, relu, reshape, scale, sigmoid, softmax_cross_entropy, sub, sum_all, Padding,
};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type of a tensor: `f32` for training, `f64` for gradient checking.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;

    /// C <- alpha * A * B + beta * C with explicit strides, row-major buffers.
    ///
    /// # Safety
    /// `a`, `b`, and `c` must point to allocations holding at least the
    /// elements addressed by the given dimensions and strides, and `c` must
    /// not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Operation that produced a tensor; holds the inputs needed for backward.
enum Op<E: Scalar> {
    Leaf,
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Scale(Tensor<E>, E),
    /// Broadcast bias over the last axis.
    AddBias(Tensor<E>, Tensor<E>),
    Matmul(Tensor<E>, Tensor<E>),
    Relu(Tensor<E>),
    Sigmoid(Tensor<E>),
    Reshape(Tensor<E>),
    SumAll(Tensor<E>),
    MeanAll(Tensor<E>),
    Conv2d {
        input: Tensor<E>,
        kernel: Tensor<E>,
        stride: usize,
        padding: ops::Padding,
    },
    ConvTranspose2d {
        input: Tensor<E>,
        kernel: Tensor<E>,
        stride: usize,
    },
    MaxPool2d {
        input: Tensor<E>,
        /// Flat input index of the max for each output cell.
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Tensor<E>,
        labels: Vec<usize>,
    },
    BinaryCrossEntropy {
        pred: Tensor<E>,
        target: Vec<E>,
    },
}

struct Inner<E: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Handle to a node in the computation graph. Cloning is cheap and aliases
/// the same storage.
pub struct Tensor<E: Scalar = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}", self.inner.shape)?;
        if self.len() <= 8 {
            write!(f, ", data={:?}", *self.data())?;
        }
        write!(f, ")")
    }
}

impl<E: Scalar> Tensor<E> {
    fn new(data: Vec<E>, shape: Vec<usize>, requires_grad: bool, op: Op<E>) -> Self {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in tensor of shape {shape:?}"
        );
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::new(data, shape.to_vec(), false, Op::Leaf))
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::new(data, shape.to_vec(), true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(vec![E::ZERO; numel], shape.to_vec(), false, Op::Leaf)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(vec![value; numel], shape.to_vec(), false, Op::Leaf)
    }

    pub fn scalar(value: E) -> Self {
        Self::new(vec![value], vec![1], false, Op::Leaf)
    }

    fn result(data: Vec<E>, shape: Vec<usize>, op: Op<E>) -> Self {
        let requires_grad = op.any_parent_requires_grad();
        Self::new(data, shape, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer; used by the optimizer. The graph
    /// must not be mid-backward when this is called.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Stable identity of the underlying node, for use as a map key.
    pub fn node_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn accumulate_grad(&self, contribution: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar. Fills `grad` on every
    /// reachable tensor with `requires_grad`; contributions from multiple
    /// uses of the same tensor accumulate additively.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: self.shape().to_vec(),
            });
        }
        let order = topo_order(self);
        self.accumulate_grad(&[E::ONE]);
        for node in order.iter().rev() {
            let grad = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue, // no downstream use contributed
            };
            node.inner.op.backward(&grad, node);
        }
        Ok(())
    }
}

impl Tensor<f32> {
    /// Exact double-precision copy of the values; the result is a plain
    /// leaf with no graph history.
    pub fn widen(&self) -> Tensor<f64> {
        let data: Vec<f64> = self.data().iter().map(|&v| f64::from(v)).collect();
        Tensor::new(data, self.shape().to_vec(), false, Op::Leaf)
    }
}

impl Tensor<f64> {
    /// Values rounded to nearest `f32`; the result is a plain leaf with no
    /// graph history.
    pub fn narrow(&self) -> Tensor<f32> {
        let data: Vec<f32> = self.data().iter().map(|&v| v as f32).collect();
        Tensor::new(data, self.shape().to_vec(), false, Op::Leaf)
    }
}

/// Topological order over the subgraph that requires gradients.
fn topo_order<E: Scalar>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // Iterative DFS; second stack entry marks post-order emission.
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, emit)) = stack.pop() {
        if emit {
            order.push(node);
            continue;
        }
        if !node.requires_grad() || !visited.insert(node.node_id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for parent in node.inner.op.parents() {
            stack.push((parent, false));
        }
    }
    order
}

impl<E: Scalar> Op<E> {
    fn parents(&self) -> Vec<Tensor<E>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::AddBias(a, b) => vec![a.clone(), b.clone()],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![a.clone()],
            Op::Conv2d { input, kernel, .. } | Op::ConvTranspose2d { input, kernel, .. } => {
                vec![input.clone(), kernel.clone()]
            }
            Op::MaxPool2d { input, .. } => vec![input.clone()],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits.clone()],
            Op::BinaryCrossEntropy { pred, .. } => vec![pred.clone()],
        }
    }

    fn any_parent_requires_grad(&self) -> bool {
        self.parents().iter().any(|p| p.requires_grad())
    }
}
