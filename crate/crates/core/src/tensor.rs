//! Rank-4 NCHW tensors and the element types they carry.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Element type usable in tensors: `f64` for training graphs, `f32` for
/// inference and the feature codec.
pub trait Element: Float + Default + Send + Sync + fmt::Debug + 'static {
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Train64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Infer32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Element width of a computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Train64,
    Infer32,
}

impl Precision {
    pub fn bytes_per_element(self) -> usize {
        match self {
            Precision::Train64 => 8,
            Precision::Infer32 => 4,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {len} elements cannot fill shape {shape}")]
    ElementCount {
        op: &'static str,
        shape: Shape,
        len: usize,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward already ran on this graph; record a new forward pass first")]
    BackwardTwice,
    #[error("backward: node {0} is not a scalar")]
    NotScalar(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// (batch, channel, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
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

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW tensor with an optional gradient buffer of the same shape.
///
/// Per-channel vectors (bias, batch-norm parameters) are stored with shape
/// `(1, C, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::ElementCount {
                op: "tensor",
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
            grad: None,
        }
    }

    /// Per-channel vector stored as `(1, len, 1, 1)`.
    pub fn vector(values: Vec<T>) -> Self {
        Tensor {
            shape: Shape::new(1, values.len(), 1, 1),
            data: values,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::vector(vec![value])
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                dim: "element count",
                expected: self.data.len(),
                actual: g.len(),
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(TensorError::ElementCount {
                op: "reshape",
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Copies the leading `n_keep` batch entries and `c_keep` channels.
    ///
    /// For a convolution weight `[c_out, c_in, k, k]` this is the active
    /// prefix slice `[0..c_out', 0..c_in', :, :]`.
    pub fn slice_prefix(&self, n_keep: usize, c_keep: usize) -> Result<Self> {
        let s = self.shape;
        if n_keep > s.n {
            return Err(TensorError::ShapeMismatch {
                op: "slice_prefix",
                dim: "batch",
                expected: s.n,
                actual: n_keep,
            });
        }
        if c_keep > s.c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_prefix",
                dim: "channel",
                expected: s.c,
                actual: c_keep,
            });
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(n_keep * c_keep * plane);
        for n in 0..n_keep {
            let start = n * s.c * plane;
            data.extend_from_slice(&self.data[start..start + c_keep * plane]);
        }
        Ok(Tensor {
            shape: Shape::new(n_keep, c_keep, s.h, s.w),
            data,
            grad: None,
        })
    }

    /// Batch entries `start..start + len`.
    pub fn batch_range(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.shape.n {
            return Err(TensorError::ShapeMismatch {
                op: "batch_range",
                dim: "batch",
                expected: self.shape.n,
                actual: start + len,
            });
        }
        let per = self.shape.c * self.shape.plane();
        Ok(Tensor {
            shape: Shape::new(len, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * per..(start + len) * per].to_vec(),
            grad: None,
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "stack",
            reason: "no tensors".into(),
        })?;
        let s = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for t in parts {
            for (dim, e, a) in [("channel", s.c, t.shape.c), ("height", s.h, t.shape.h), ("width", s.w, t.shape.w)] {
                if e != a {
                    return Err(TensorError::ShapeMismatch {
                        op: "stack",
                        dim,
                        expected: e,
                        actual: a,
                    });
                }
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
            grad: None,
        })
    }

    /// Population variance of all elements.
    pub fn variance(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        self.data
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n
    }

    /// Little-endian element bytes, the form hashed and persisted.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::PRECISION.bytes_per_element());
        match T::PRECISION {
            Precision::Train64 => {
                for v in &self.data {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
            Precision::Infer32 => {
                for v in &self.data {
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
        }
        out
    }
}
