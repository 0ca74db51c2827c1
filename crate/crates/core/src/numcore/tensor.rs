use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};

/// Dense row-major `f64` array.
///
/// A `Tensor` is a plain value: gradient tracking lives on the
/// [`Tape`](super::Tape) that records operations over it.
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

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose output length is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(-bound..bound))
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for axis of length {n}");
                acc * n + i
            })
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Tensor {
        let r = self.rank();
        assert!(r >= 2, "transpose_last2 needs rank >= 2");
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.numel() / (m * n).max(1);
        let mut out = vec![0.0; self.numel()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Tensor { shape, data: out }
    }

    /// Matrix product with the same broadcasting rules as [`Var::matmul`](super::Var::matmul).
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(self.shape(), rhs.shape())?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(&self.data, &rhs.data, &mut out);
        Ok(Tensor::from_parts(plan.out_shape.clone(), out))
    }

    /// Selects index `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Tensor {
        let (outer, n, inner) = axis_split(&self.shape, axis);
        assert!(index < n);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            data.extend_from_slice(&self.data[base..base + inner]);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor { shape, data }
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (outer, n, inner) = axis_split(&self.shape, axis);
        if start + len > n {
            return Err(Error::shape(
                "narrow",
                format!("range {}..{} on axis of length {}", start, start + len, n),
            ));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Resolved dimensions of a (possibly batched) matrix product.
///
/// Supported operand ranks: `[.., k] x [k, n]` (leading axes of the lhs are
/// flattened into rows), `[B, m, k] x [B, k, n]`, and `[m, k] x [B, k, n]`.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub lhs_batched: bool,
    pub rhs_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::shape("matmul", format!("{a:?} x {b:?}"));
        match (a.len(), b.len()) {
            (ra, 2) if ra >= 2 => {
                let k = a[ra - 1];
                if k != b[0] {
                    return Err(mismatch());
                }
                let m = a[..ra - 1].iter().product();
                let mut out_shape = a[..ra - 1].to_vec();
                out_shape.push(b[1]);
                Ok(MatmulPlan {
                    batch: 1,
                    m,
                    k,
                    n: b[1],
                    lhs_batched: false,
                    rhs_batched: false,
                    out_shape,
                })
            }
            (3, 3) => {
                if a[0] != b[0] || a[2] != b[1] {
                    return Err(mismatch());
                }
                Ok(MatmulPlan {
                    batch: a[0],
                    m: a[1],
                    k: a[2],
                    n: b[2],
                    lhs_batched: true,
                    rhs_batched: true,
                    out_shape: vec![a[0], a[1], b[2]],
                })
            }
            (2, 3) => {
                if a[1] != b[1] {
                    return Err(mismatch());
                }
                Ok(MatmulPlan {
                    batch: b[0],
                    m: a[0],
                    k: a[1],
                    n: b[2],
                    lhs_batched: false,
                    rhs_batched: true,
                    out_shape: vec![b[0], a[0], b[2]],
                })
            }
            _ => Err(mismatch()),
        }
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn lhs<'a>(&self, a: &'a [f64], b: usize) -> &'a [f64] {
        let sz = self.m * self.k;
        if self.lhs_batched {
            &a[b * sz..(b + 1) * sz]
        } else {
            &a[..sz]
        }
    }

    fn rhs<'a>(&self, x: &'a [f64], b: usize) -> &'a [f64] {
        let sz = self.k * self.n;
        if self.rhs_batched {
            &x[b * sz..(b + 1) * sz]
        } else {
            &x[..sz]
        }
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            gemm(
                MatRef::new(self.lhs(a, bi), m, k),
                MatRef::new(self.rhs(b, bi), k, n),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }

    /// Accumulates `dA += dC B^T` and `dB += A^T dC` into the given buffers.
    pub fn backward(
        &self,
        a: &[f64],
        b: &[f64],
        dc: &[f64],
        da: Option<&mut [f64]>,
        db: Option<&mut [f64]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(da) = da {
            for bi in 0..self.batch {
                let dst = if self.lhs_batched {
                    &mut da[bi * m * k..(bi + 1) * m * k]
                } else {
                    &mut da[..m * k]
                };
                gemm(
                    MatRef::new(&dc[bi * m * n..(bi + 1) * m * n], m, n),
                    MatRef::new(self.rhs(b, bi), k, n).t(),
                    1.0,
                    dst,
                );
            }
        }
        if let Some(db) = db {
            for bi in 0..self.batch {
                let dst = if self.rhs_batched {
                    &mut db[bi * k * n..(bi + 1) * k * n]
                } else {
                    &mut db[..k * n]
                };
                gemm(
                    MatRef::new(self.lhs(a, bi), m, k).t(),
                    MatRef::new(&dc[bi * m * n..(bi + 1) * m * n], m, n),
                    1.0,
                    dst,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new([1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn transpose_last2_batched() {
        let t = Tensor::from_fn([2, 2, 3], |i| i as f64);
        let tt = t.transpose_last2();
        assert_eq!(tt.shape(), &[2, 3, 2]);
        assert_eq!(tt.at(&[1, 2, 0]), t.at(&[1, 0, 2]));
        assert_eq!(tt.transpose_last2(), t);
    }

    #[test]
    fn matmul_broadcast_lhs() {
        let w = Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let x = Tensor::from_fn([3, 2, 2], |i| i as f64);
        let y = w.matmul(&x).unwrap();
        // swapping rows of each batch matrix
        assert_eq!(y.at(&[2, 0, 1]), x.at(&[2, 1, 1]));
        assert_eq!(y.at(&[2, 1, 0]), x.at(&[2, 0, 0]));
    }

    #[test]
    fn narrow_and_select() {
        let t = Tensor::from_fn([2, 3, 2], |i| i as f64);
        let n = t.narrow(1, 1, 2).unwrap();
        assert_eq!(n.shape(), &[2, 2, 2]);
        assert_eq!(n.at(&[1, 0, 1]), t.at(&[1, 1, 1]));
        let s = t.select(2, 1);
        assert_eq!(s.shape(), &[2, 3]);
        assert_eq!(s.at(&[1, 2]), t.at(&[1, 2, 1]));
        assert!(t.narrow(1, 2, 2).is_err());
    }
}
