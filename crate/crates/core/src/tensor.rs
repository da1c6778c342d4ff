//! Dense row-major tensors and the arithmetic kernels the rest of the crate builds on.
//!
//! Every reduction runs in a fixed order (left to right over the reduced index), so
//! results are bit-reproducible between runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]: `f32` for experiments, `f64` for gradient oracles.
pub trait Scalar: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// Storage size of one element in bytes.
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}.. ({} elements)", &self.data[..SHOWN], self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("expects {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Construct without validation; callers guarantee `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = *self.shape.first().unwrap_or(&1);
        if start >= end || end > rows {
            return Err(Error::InvalidArgument(format!(
                "row range {start}..{end} invalid for {rows} rows"
            )));
        }
        let stride = self.data.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Gather rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = *self.shape.first().unwrap_or(&1);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::InvalidArgument(format!(
                "row selection {rows:?} invalid for {n} rows"
            )));
        }
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != first.shape.len() || p.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }
}

/// Standard matrix product of `a: [m, k]` and `b: [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm_acc(m, k, n, &a.data, &b.data, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c[m, n] += a[m, k] * b[k, n]`. Each output accumulates over `k` in increasing order.
#[inline]
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<'a, T> From<&'a Tensor<T>> for Operand<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        Operand::Tensor(t)
    }
}

fn apply<T: Scalar>(op: BinaryOp, x: T, y: T) -> Result<T> {
    Ok(match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => {
            if y == T::zero() {
                return Err(Error::DivisionByZero);
            }
            x / y
        }
        BinaryOp::Max => {
            if x >= y {
                x
            } else {
                y
            }
        }
    })
}

/// Elementwise binary operation against an equally shaped tensor or a scalar.
pub fn elementwise<'a, T: Scalar>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: impl Into<Operand<'a, T>>,
) -> Result<Tensor<T>> {
    let data = match b.into() {
        Operand::Tensor(b) => {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    op: "elementwise",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            a.data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| apply(op, x, y))
                .collect::<Result<Vec<T>>>()?
        }
        Operand::Scalar(s) => a
            .data
            .iter()
            .map(|&x| apply(op, x, s))
            .collect::<Result<Vec<T>>>()?,
    };
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Reduce over `axes` (all axes when empty). Reduced axes are removed from the shape.
pub fn reduce<T: Scalar>(op: ReduceOp, a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = a.rank();
    for &axis in axes {
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
    }
    let reduced: Vec<bool> = (0..rank)
        .map(|d| axes.is_empty() || axes.contains(&d))
        .collect();
    let out_shape: Vec<usize> = (0..rank)
        .filter(|&d| !reduced[d])
        .map(|d| a.shape[d])
        .collect();
    let out_len: usize = out_shape.iter().product();
    let count = a.data.len() / out_len;

    let mut acc: Vec<Option<T>> = vec![None; out_len];
    let mut index = vec![0usize; rank];
    for &v in &a.data {
        let mut o = 0;
        for d in 0..rank {
            if !reduced[d] {
                o = o * a.shape[d] + index[d];
            }
        }
        acc[o] = Some(match (acc[o], op) {
            (None, _) => v,
            (Some(s), ReduceOp::Sum | ReduceOp::Mean) => s + v,
            (Some(s), ReduceOp::Max) => {
                if v > s {
                    v
                } else {
                    s
                }
            }
        });
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < a.shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    let scale = T::of(count as f64);
    let data = acc
        .into_iter()
        .map(|v| {
            let v = v.unwrap_or_else(T::zero);
            if op == ReduceOp::Mean {
                v / scale
            } else {
                v
            }
        })
        .collect();
    Ok(Tensor::from_parts(out_shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
    }

    #[test]
    fn matmul_row_col() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::<f64>::zeros(&[2, 2]);
        let b = t(&[2, 3], &[1., -2., 3., 4., 5., 6.]);
        assert!(matmul(&z, &b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = t(&[2, 3], &[0.; 6]);
        let b = t(&[2, 3], &[0.; 6]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[2], &[1., 2.]);
        let b = t(&[2], &[3., 4.]);
        assert_eq!(elementwise(BinaryOp::Add, &a, &b).unwrap().data(), &[4., 6.]);
        assert_eq!(elementwise(BinaryOp::Mul, &a, Operand::Scalar(1.0)).unwrap(), a);
        let c = t(&[2], &[-1., 2.]);
        assert_eq!(
            elementwise(BinaryOp::Max, &c, Operand::Scalar(0.0)).unwrap().data(),
            &[0., 2.]
        );
    }

    #[test]
    fn elementwise_errors() {
        let a = t(&[2], &[1., 2.]);
        let z = t(&[2], &[1., 0.]);
        assert!(matches!(
            elementwise(BinaryOp::Div, &a, &z),
            Err(Error::DivisionByZero)
        ));
        assert!(matches!(
            elementwise(BinaryOp::Div, &a, Operand::Scalar(0.0)),
            Err(Error::DivisionByZero)
        ));
        let c = t(&[3], &[1., 2., 3.]);
        assert!(matches!(
            elementwise(BinaryOp::Add, &a, &c),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn reduce_examples() {
        let a = t(&[3], &[1., 2., 3.]);
        assert_eq!(reduce(ReduceOp::Sum, &a, &[]).unwrap().data(), &[6.]);
        assert_eq!(
            reduce(ReduceOp::Mean, &t(&[1], &[5.]), &[]).unwrap().data(),
            &[5.]
        );
        let m = t(&[2, 2], &[1., 9., 3., 4.]);
        let r = reduce(ReduceOp::Max, &m, &[1]).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[9., 4.]);
        let s0 = reduce(ReduceOp::Sum, &m, &[0]).unwrap();
        assert_eq!(s0.data(), &[4., 13.]);
    }

    #[test]
    fn reduce_invalid_axis() {
        let a = t(&[3], &[1., 2., 3.]);
        assert!(matches!(
            reduce(ReduceOp::Sum, &a, &[1]),
            Err(Error::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn new_rejects_bad_len() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }
}
