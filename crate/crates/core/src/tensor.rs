//! Dense row-major tensors.
//!
//! Storage is always an `f64` buffer. A tensor tagged [`DType::F32`] rounds
//! every freshly computed element through `f32`, which reproduces single
//! precision results while keeping one code path. Nothing here mutates its
//! inputs; every operation returns a new tensor except [`Tensor::reshape`],
//! which reuses the buffer it consumes.

use std::fmt;

use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sampling distribution for [`Tensor::seeded_fill`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: "tensors have rank >= 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: "every dimension must be >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("buffer holds {} elements", data.len()),
            });
        }
        let data = match dtype {
            DType::F64 => data,
            DType::F32 => data.into_iter().map(|x| dtype.round(x)).collect(),
        };
        Ok(Self { shape, data, dtype })
    }

    /// Builds a tensor whose shape is already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, dtype }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![value; n], DType::F64))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Deterministic for a fixed `(shape, distribution, seed)`.
    pub fn seeded_fill(shape: &[usize], dist: Distribution, seed: u64) -> Result<Self> {
        let n = check_shape(shape)?;
        let mut rng = SeededRng::new(seed, 0);
        Ok(Self::fill_from(shape, n, dist, &mut rng))
    }

    /// Like [`Tensor::seeded_fill`] but draws from an existing stream.
    pub fn sample(shape: &[usize], dist: Distribution, rng: &mut SeededRng) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::fill_from(shape, n, dist, rng))
    }

    fn fill_from(shape: &[usize], n: usize, dist: Distribution, rng: &mut SeededRng) -> Self {
        let data = (0..n)
            .map(|_| match dist {
                Distribution::Normal { mean, std } => {
                    if std == 0.0 {
                        mean
                    } else {
                        mean + std * rng.normal()
                    }
                }
                Distribution::Uniform { lo, hi } => rng.uniform(lo, hi),
            })
            .collect();
        Self::from_parts(shape.to_vec(), data, DType::F64)
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

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Re-tags the tensor, rounding the buffer when narrowing to `f32`.
    pub fn to_dtype(&self, dtype: DType) -> Self {
        let data = self.data.iter().map(|&x| dtype.round(x)).collect();
        Self::from_parts(self.shape.clone(), data, dtype)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Zero-copy change of shape.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
            dtype: self.dtype,
        })
    }

    fn check_dtype(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.dtype != other.dtype {
            return Err(Error::DType {
                op,
                lhs: self.dtype,
                rhs: other.dtype,
            });
        }
        Ok(())
    }

    /// Matrix product over the last two axes.
    ///
    /// Leading axes must match exactly, except that a rank-2 right operand is
    /// shared by every leading index of the left operand.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_dtype(other, "matmul")?;
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (k2, n) = (other.shape[other.rank() - 2], other.shape[other.rank() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let lead = &self.shape[..self.rank() - 2];
        let batches: usize = lead.iter().product();
        let shared_rhs = other.rank() == 2;
        if !shared_rhs && other.shape[..other.rank() - 2] != *lead {
            return Err(mismatch());
        }

        let mut out = vec![0.0; batches * m * n];
        if shared_rhs {
            // rows of every batch are independent, fold them together
            gemm(&self.data, &other.data, &mut out, batches * m, k, n);
        } else {
            for b in 0..batches {
                gemm(
                    &self.data[b * m * k..(b + 1) * m * k],
                    &other.data[b * k * n..(b + 1) * k * n],
                    &mut out[b * m * n..(b + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(self.finish(shape, out))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::Rank {
                op: "transpose",
                min: 2,
                shape: self.shape.clone(),
            });
        }
        let r = self.rank();
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batches = self.numel() / (m * n);
        let mut out = vec![0.0; self.numel()];
        for b in 0..batches {
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
        Ok(Self::from_parts(shape, out, self.dtype))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest singular value of a matrix by single-vector power iteration on
    /// `AᵀA`, started from a seeded Gaussian vector.
    pub fn spectral_norm(&self, iters: usize, seed: u64) -> Result<f64> {
        if self.rank() != 2 {
            return Err(Error::Rank {
                op: "spectral_norm",
                min: 2,
                shape: self.shape.clone(),
            });
        }
        if iters == 0 {
            return Err(Error::Precondition("spectral_norm needs iters >= 1".into()));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        if self.data.iter().all(|&x| x == 0.0) {
            return Ok(0.0);
        }
        let mut rng = SeededRng::new(seed, 0);
        let mut x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        normalize_in_place(&mut x);
        let mut ax = vec![0.0; m];
        let mut sigma = 0.0;
        for _ in 0..iters {
            matvec(&self.data, &x, &mut ax, m, n);
            sigma = norm(&ax);
            if sigma == 0.0 {
                // start vector fell in the null space; restart on a basis vector
                x.iter_mut().for_each(|v| *v = 0.0);
                let col = (0..n)
                    .max_by(|&a, &b| {
                        col_norm(&self.data, a, m, n).total_cmp(&col_norm(&self.data, b, m, n))
                    })
                    .unwrap_or(0);
                x[col] = 1.0;
                continue;
            }
            let mut next = vec![0.0; n];
            matvec_t(&self.data, &ax, &mut next, m, n);
            if normalize_in_place(&mut next) == 0.0 {
                break;
            }
            x = next;
        }
        matvec(&self.data, &x, &mut ax, m, n);
        Ok(norm(&ax).max(sigma))
    }

    pub fn elementwise(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        self.check_dtype(other, "elementwise")?;
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "elementwise",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
        };
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(self.finish(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&x| f(x)).collect();
        self.finish(self.shape.clone(), data)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| x.max(0.0))
    }

    /// Sum over one axis; the axis is removed unless it is the only one.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Rank {
                op: "sum_axis",
                min: axis + 1,
                shape: self.shape.clone(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.finish(shape, out))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self.shape.get(axis).unwrap_or(&1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last_axis(&self) -> Tensor {
        let n = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = if x.is_finite() || *x > 0.0 {
                    (*x - max).exp()
                } else {
                    0.0
                };
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.finish(self.shape.clone(), out)
    }

    /// Flattens all leading axes into rows: `[.., n] -> [rows, n]`.
    pub fn flatten_rows(self) -> Tensor {
        let n = self.last_dim();
        let rows = self.numel() / n;
        Tensor {
            shape: vec![rows, n],
            data: self.data,
            dtype: self.dtype,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn finish(&self, shape: Vec<usize>, mut data: Vec<f64>) -> Tensor {
        if self.dtype == DType::F32 {
            data.iter_mut().for_each(|x| *x = DType::F32.round(*x));
        }
        Tensor {
            shape,
            data,
            dtype: self.dtype,
        }
    }
}

// out[m, n] = a[m, k] @ b[k, n], i-k-j order so the inner loop is contiguous
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn matvec(a: &[f64], x: &[f64], out: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        out[i] = a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

fn matvec_t(a: &[f64], y: &[f64], out: &mut [f64], m: usize, n: usize) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..m {
        for j in 0..n {
            out[j] += a[i * n + j] * y[i];
        }
    }
}

fn col_norm(a: &[f64], col: usize, m: usize, n: usize) -> f64 {
    (0..m).map(|i| a[i * n + col].powi(2)).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `x` to unit length in place and returns its former norm.
pub(crate) fn normalize_in_place(x: &mut [f64]) -> f64 {
    let n = norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::seeded_fill(shape, Distribution::Normal { mean: 0.0, std: 1.0 }, seed).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).unwrap().matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::eye(2).unwrap()).unwrap(), a);
        let row = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 1);
        let b = random(&[7, 3], 2);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_batched_and_shared_rhs() {
        let a = random(&[2, 3, 4], 3);
        let b = random(&[2, 4, 5], 4);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for batch in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let s: f64 = (0..4)
                        .map(|p| a.at(&[batch, i, p]) * b.at(&[batch, p, j]))
                        .sum();
                    assert!((c.at(&[batch, i, j]) - s).abs() < 1e-12);
                }
            }
        }
        let w = random(&[4, 2], 5);
        assert_eq!(a.matmul(&w).unwrap().shape(), &[2, 3, 2]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = random(&[2, 3], 1).matmul(&random(&[4, 2], 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transpose_cases() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(a.transpose().unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        let r = random(&[3, 5], 9);
        let t = r.transpose().unwrap();
        assert_eq!(t.transpose().unwrap(), r);
        for i in 0..5 {
            for j in 0..3 {
                assert_eq!(t.at(&[i, j]), r.at(&[j, i]));
            }
        }
        assert!(matches!(
            Tensor::ones(&[3]).unwrap().transpose(),
            Err(Error::Rank { .. })
        ));
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Tensor::zeros(&[3, 3]).unwrap().frobenius_norm(), 0.0);
        assert_eq!(
            Tensor::from_rows(&[&[3.0, 4.0]]).unwrap().frobenius_norm(),
            5.0
        );
        let a = random(&[4, 4], 10);
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                s += a.at(&[i, j]) * a.at(&[i, j]);
            }
        }
        assert!((a.frobenius_norm() - s.sqrt()).abs() < 1e-12);
        let sq = a.mul(&a).unwrap().sum();
        assert!((a.frobenius_norm().powi(2) - sq).abs() <= 1e-12 * sq);
    }

    #[test]
    fn spectral_norm_known_values() {
        let i3 = Tensor::eye(3).unwrap();
        assert!((i3.spectral_norm(100, 0).unwrap() - 1.0).abs() < 1e-6);
        let d = Tensor::from_rows(&[&[5.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!((d.spectral_norm(100, 0).unwrap() - 5.0).abs() < 1e-6);
        assert_eq!(Tensor::zeros(&[3, 2]).unwrap().spectral_norm(5, 0).unwrap(), 0.0);
        assert!(Tensor::eye(2).unwrap().spectral_norm(0, 0).is_err());
    }

    #[test]
    fn spectral_norm_is_deterministic_and_bounded() {
        let a = random(&[6, 4], 12);
        let s1 = a.spectral_norm(50, 3).unwrap();
        assert_eq!(s1, a.spectral_norm(50, 3).unwrap());
        assert!(s1 <= a.frobenius_norm() + 1e-12);
    }

    #[test]
    fn elementwise_reduce_softmax() {
        let x = random(&[2, 3], 4);
        assert_eq!(x.add(&Tensor::zeros(&[2, 3]).unwrap()).unwrap(), x);
        let u = Tensor::ones(&[1, 4]).unwrap().softmax_last_axis();
        assert_eq!(u.data(), &[0.25; 4]);
        let s = Tensor::ones(&[2, 3]).unwrap().sum_axis(1).unwrap();
        assert_eq!((s.shape(), s.data()), (&[2usize][..], &[3.0, 3.0][..]));
        assert!(x.add(&Tensor::ones(&[3, 2]).unwrap()).is_err());
        let m = Tensor::ones(&[2, 3]).unwrap().mean_axis(0).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let t = Tensor::new(vec![1, 3], vec![0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(t.softmax_last_axis().data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn seeded_fill_properties() {
        let z = Tensor::seeded_fill(&[10], Distribution::Normal { mean: 0.0, std: 0.0 }, 1).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        let a = random(&[32], 5);
        assert_eq!(a, random(&[32], 5));
        let big = Tensor::seeded_fill(
            &[100_000],
            Distribution::Normal { mean: 2.0, std: 1.0 },
            77,
        )
        .unwrap();
        let mean = big.sum() / 1e5;
        assert!((mean - 2.0).abs() < 0.02, "{mean}");
        let u = Tensor::seeded_fill(&[1000], Distribution::Uniform { lo: -1.0, hi: 2.0 }, 3).unwrap();
        assert!(u.data().iter().all(|&x| (-1.0..2.0).contains(&x)));
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::zeros(&[]).is_err());
    }

    #[test]
    fn reshape_is_zero_copy() {
        let a = random(&[2, 6], 1);
        let ptr = a.data().as_ptr();
        let b = a.reshape(vec![3, 4]).unwrap();
        assert_eq!(b.data().as_ptr(), ptr);
        assert!(b.reshape(vec![5]).is_err());
    }

    #[test]
    fn f32_tensors_round_results() {
        let a = Tensor::with_dtype(vec![1], vec![0.1], DType::F32).unwrap();
        assert_eq!(a.data()[0], 0.1f32 as f64);
        let b = a.scale(3.0);
        assert_eq!(b.data()[0], (0.1f32 as f64 * 3.0) as f32 as f64);
        assert!(a.add(&Tensor::ones(&[1]).unwrap()).is_err());
    }
}
