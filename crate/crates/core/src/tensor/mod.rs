//! Dense 4-D tensors and a tape-based reverse-mode differentiator.
//!
//! Every tensor is laid out as `batch × channel × height × width`, row-major.
//! Storage is shared behind an [`Arc`], so cloning a tensor is cheap and a
//! produced tensor is never mutated in place by any operator. Training runs
//! in `f32`; `f64` exists so gradients can be checked by finite differences.

mod denormal;
mod graph;
pub mod gradcheck;
pub(crate) mod kernels;
mod params;

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

pub use denormal::FlushDenormals;
pub use graph::{BnMode, BnStats, Graph, OpKind, Var};
pub(crate) use graph::relmse_value;
pub use params::{ParamStore, TensorMap};

/// Errors raised by tensor construction and operator preconditions.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {actual} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar 1x1x1x1 tensor, got {0}")]
    NonScalarLoss(Shape),
    #[error("backward: node {node} references input {input} that is not earlier on the tape (cycle)")]
    Cycle { node: usize, input: usize },
    #[error("batch_norm: inference mode requires initialised running statistics")]
    UninitialisedRunningStats,
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
}

/// Floating-point element type usable by the tensor core.
pub trait Scalar:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c ← a·b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
    /// `trans_a`/`trans_b` mean the operand is stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds checked above; strides describe dense row-major
                // (or transposed) matrices inside those slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `(n, c, h, w)` extent of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

    /// Shape used for per-channel vectors (biases, BN affine terms).
    pub const fn vector(len: usize) -> Self {
        Shape::new(1, len, 1, 1)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Immutable dense tensor with shared storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                shape,
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape,
            data: Arc::new((0..shape.numel()).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn make_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Same data, different (equal-volume) shape.
    pub fn reshape(&self, shape: Shape) -> Result<Self, TensorError> {
        if shape.numel() != self.shape.numel() {
            return Err(TensorError::DataLength {
                shape,
                expected: shape.numel(),
                actual: self.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// Channel plane `(n, c)` as a slice.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                    .collect(),
            ),
        }
    }

    /// Copies channels `[start, start + count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self, TensorError> {
        let s = self.shape;
        if start + count > s.c {
            return Err(TensorError::InvalidArgument {
                op: "slice_channels",
                detail: format!("channels {start}..{} out of range for {s}", start + count),
            });
        }
        let p = s.plane();
        let mut out = Vec::with_capacity(s.n * count * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            out.extend_from_slice(&self.data[base..base + count * p]);
        }
        Tensor::from_vec(Shape::new(s.n, count, s.h, s.w), out)
    }

    /// Copies the spatial window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self, TensorError> {
        let s = self.shape;
        if y0 + h > s.h || x0 + w > s.w {
            return Err(TensorError::InvalidArgument {
                op: "crop",
                detail: format!("window {h}x{w} at ({y0},{x0}) exceeds {s}"),
            });
        }
        let mut out = Vec::with_capacity(s.n * s.c * h * w);
        for nc in 0..s.n * s.c {
            let plane = &self.data[nc * s.plane()..(nc + 1) * s.plane()];
            for y in y0..y0 + h {
                out.extend_from_slice(&plane[y * s.w + x0..y * s.w + x0 + w]);
            }
        }
        Tensor::from_vec(Shape::new(s.n, s.c, h, w), out)
    }

    /// Stacks tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = items.first().ok_or(TensorError::InvalidArgument {
            op: "stack_batch",
            detail: "no tensors".into(),
        })?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_batch",
                    detail: format!("{} vs {}", t.shape, s),
                });
            }
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), data)
    }

    /// Joins tensors along the channel axis.
    pub fn concat_channels(items: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = items.first().ok_or(TensorError::InvalidArgument {
            op: "concat_channels",
            detail: "no tensors".into(),
        })?;
        let s = first.shape;
        for t in items {
            if (t.shape.n, t.shape.h, t.shape.w) != (s.n, s.h, s.w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{} vs {}", t.shape, s),
                });
            }
        }
        let c: usize = items.iter().map(|t| t.shape.c).sum();
        let mut data = Vec::with_capacity(s.n * c * s.plane());
        for n in 0..s.n {
            for t in items {
                let block = t.shape.c * s.plane();
                data.extend_from_slice(&t.data[n * block..(n + 1) * block]);
            }
        }
        Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), data)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor({}, {:?}", self.shape, preview)?;
        if self.len() > 8 {
            write!(f, " …")?;
        }
        write!(f, ")")
    }
}
