use std::cell::Cell;
use std::fmt;

use super::NumericsError;

/// Storage precision applied to every op result.
///
/// Values are held in `f64`; in `F32` mode each freshly computed buffer is
/// rounded to the nearest `f32`, which gives 32-bit storage semantics while
/// keeping a single code path. `F64` is used for gradient verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
}

pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

/// Run `f` with the given precision on the current thread, restoring the old one.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            set_precision(self.0);
        }
    }
    let _restore = Restore(precision());
    set_precision(p);
    f()
}

/// Round to the active precision and reject non-finite values.
pub(crate) fn finish(op: &'static str, data: &mut [f64]) -> Result<(), NumericsError> {
    let round = precision() == Precision::F32;
    for v in data.iter_mut() {
        if round {
            *v = *v as f32 as f64;
        }
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op });
        }
    }
    Ok(())
}

/// Dense row-major tensor. Scalars have shape `[1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidShape(shape));
        }
        if numel(&shape) != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "new",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`], additionally enforcing finiteness and the active precision.
    pub fn checked(shape: Vec<usize>, mut data: Vec<f64>) -> Result<Self, NumericsError> {
        finish("tensor", &mut data)?;
        Tensor::new(shape, data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self, NumericsError> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                expected: shape.to_vec(),
                got: self.shape.clone(),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_leading(&self, start: usize, end: usize) -> Result<Self, NumericsError> {
        if start >= end || end > self.shape[0] {
            return Err(NumericsError::OutOfRange {
                op: "slice_leading",
                index: end,
                bound: self.shape[0],
            });
        }
        let row = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor { shape, data: self.data[start * row..end * row].to_vec() })
    }

    /// Concatenate along the leading axis; trailing extents must agree.
    pub fn concat_leading(parts: &[Tensor]) -> Result<Self, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty("concat_leading"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_leading",
                    expected: first.shape.clone(),
                    got: p.shape.clone(),
                });
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Round every element to the active precision.
    pub fn rounded(mut self) -> Self {
        if precision() == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self
    }
}
