//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable value: every operation returns a new tensor.
//! Shapes are lists of positive sizes; the empty shape denotes a scalar.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("expected a one-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "vector must be non-empty");
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Rank-2 tensor from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(cols > 0 && rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones_like(other: &Tensor) -> Self {
        Self::full(&other.shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row of scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Fails with the first non-finite index.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| TensorError::Domain {
            op: "stack",
            detail: "no tensors to stack".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Split the leading axis into separate tensors.
    pub fn unstack(&self) -> Vec<Tensor> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return vec![self.clone()];
        };
        let size = rest.iter().product::<usize>();
        (0..n)
            .map(|i| Tensor {
                shape: rest.to_vec(),
                data: self.data[i * size..(i + 1) * size].to_vec(),
            })
            .collect()
    }
}

/// Elementwise operations for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Abs,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

/// Output shape of a binary elementwise op: equal shapes, or one side a
/// one-element tensor that expands over the other.
pub(crate) fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(a.to_vec())
    } else if nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

fn binary_apply(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = binary_shape(op, &a.shape, &b.shape)?;
    let n = shape.iter().product::<usize>();
    let ai = |i: usize| if a.len() == 1 { a.data[0] } else { a.data[i] };
    let bi = |i: usize| if b.len() == 1 { b.data[0] } else { b.data[i] };
    let data = (0..n).map(|i| f(ai(i), bi(i))).collect();
    Tensor::new(shape, data)
}

/// Untraced elementwise evaluation with domain checks.
pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op.is_binary(), b) {
        (true, None) => {
            return Err(TensorError::Domain {
                op: "elementwise",
                detail: format!("{op:?} needs two operands"),
            })
        }
        (false, Some(_)) => {
            return Err(TensorError::Domain {
                op: "elementwise",
                detail: format!("{op:?} takes one operand"),
            })
        }
        _ => {}
    }
    match op {
        Elementwise::Add => binary_apply("add", a, b.unwrap(), |x, y| x + y),
        Elementwise::Sub => binary_apply("sub", a, b.unwrap(), |x, y| x - y),
        Elementwise::Mul => binary_apply("mul", a, b.unwrap(), |x, y| x * y),
        Elementwise::Div => {
            let b = b.unwrap();
            if b.data.iter().any(|&v| v == 0.0) {
                return Err(TensorError::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
            binary_apply("div", a, b, |x, y| x / y)
        }
        Elementwise::Exp => Ok(a.map(f64::exp)),
        Elementwise::Log => {
            if let Some(v) = a.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {v}"),
                });
            }
            Ok(a.map(f64::ln))
        }
        Elementwise::Tanh => Ok(a.map(f64::tanh)),
        Elementwise::Abs => Ok(a.map(f64::abs)),
    }
}

/// `C = A · B` for row-major slices, `A: m×k`, `B: k×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, 0.0);
}

/// `C = A · B + beta · C` with explicit row/column strides, which lets
/// callers pass transposed views without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every index reachable with the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Untraced rank-2 matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_componentwise() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[3.0, 4.0]);
        let c = elementwise(Elementwise::Add, &a, Some(&b)).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let x = Tensor::vector(&[0.3, -1.5, 7.0]);
        let y = elementwise(Elementwise::Mul, &x, Some(&Tensor::ones_like(&x))).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn exp_inverts_log() {
        let x = Tensor::vector(&[0.5, 2.0]);
        let l = elementwise(Elementwise::Log, &x, None).unwrap();
        let y = elementwise(Elementwise::Exp, &l, None).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn domain_and_shape_errors() {
        let x = Tensor::vector(&[1.0, 0.0]);
        assert!(matches!(
            elementwise(Elementwise::Log, &x, None),
            Err(TensorError::Domain { .. })
        ));
        assert!(matches!(
            elementwise(Elementwise::Div, &x, Some(&x)),
            Err(TensorError::Domain { .. })
        ));
        let y = Tensor::vector(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            elementwise(Elementwise::Add, &x, Some(&y)),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scalar_expands() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let y = elementwise(Elementwise::Mul, &x, Some(&Tensor::scalar(3.0))).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0]);
        assert_eq!(y.shape(), &[2]);
    }

    #[test]
    fn matmul_examples() {
        let m = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
        let r = matmul(
            &Tensor::matrix(&[&[1.0, 1.0]]),
            &Tensor::matrix(&[&[1.0], &[1.0]]),
        )
        .unwrap();
        assert_eq!(r.data(), &[2.0]);
        assert!(matches!(
            matmul(&m, &Tensor::matrix(&[&[1.0, 2.0, 3.0]])),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn constructor_validates() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let t = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert_eq!(t.check_finite(), Err(TensorError::NonFinite { index: 0 }));
    }
}
