//! Dense row-major `f64` tensors and the handful of linear-algebra kernels
//! the rest of the crate is built on.

use std::fmt;

use crate::error::{Error, Result};

/// Relative pivot threshold below which [`Tensor::inverse`] reports a
/// singular matrix.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Dense real tensor. `data.len()` always equals the product of `shape`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape(
                    "Tensor::from_rows",
                    format!("row {i} has {} entries, expected {cols}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("Tensor::item", format!("expected one element, shape is {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape("Tensor::reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape("dims2", format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// In-place `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * *b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    /// `self × other` for an m×k and a k×n matrix.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// `selfᵀ × other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Self> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", format!("({k}x{m})^T times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let brow = &other.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// `self × otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} times ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Self::matrix(m, n, out)
    }

    /// Sum of elementwise products of two same-shaped tensors.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        if self.data.is_empty() {
            return Err(Error::shape("dot", "empty operands"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_inner(&self, other: &Tensor) -> Result<f64> {
        self.dims2()?;
        self.same_shape(other, "frobenius_inner")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.l2_norm()
    }

    pub fn trace(&self) -> Result<f64> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::shape("trace", format!("{r}x{c} is not square")));
        }
        Ok((0..r).map(|i| self.data[i * c + i]).sum())
    }

    /// Inverse by LU decomposition with partial pivoting.
    ///
    /// The matrix is declared singular when a pivot magnitude does not exceed
    /// `PIVOT_TOLERANCE` times the largest absolute entry of the input.
    pub fn inverse(&self) -> Result<Self> {
        let (n, c) = self.dims2()?;
        if n != c {
            return Err(Error::shape("inverse", format!("{n}x{c} is not square")));
        }
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let threshold = PIVOT_TOLERANCE * scale;

        let mut lu = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let (pivot_row, pivot) = (col..n)
                .map(|r| (r, lu[r * n + col]))
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .expect("non-empty pivot range");
            if pivot.is_nan() || pivot.abs() <= threshold {
                return Err(Error::Singular { pivot: pivot.abs(), threshold });
            }
            if pivot_row != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot_row * n + j);
                }
                perm.swap(col, pivot_row);
            }
            for r in col + 1..n {
                let factor = lu[r * n + col] / pivot;
                lu[r * n + col] = factor;
                if factor != 0.0 {
                    for j in col + 1..n {
                        lu[r * n + j] -= factor * lu[col * n + j];
                    }
                }
            }
        }

        // Solve L U x = P e_j for each unit vector.
        let mut inv = vec![0.0; n * n];
        let mut x = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                x[i] = if perm[i] == j { 1.0 } else { 0.0 };
            }
            for i in 0..n {
                let mut s = x[i];
                for p in 0..i {
                    s -= lu[i * n + p] * x[p];
                }
                x[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[i];
                for p in i + 1..n {
                    s -= lu[i * n + p] * x[p];
                }
                x[i] = s / lu[i * n + i];
            }
            for i in 0..n {
                inv[i * n + j] = x[i];
            }
        }
        Self::matrix(n, n, inv)
    }

    /// Vertically stacks matrices with a common column count.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let cols = match parts.first() {
            Some(t) => t.dims2()?.1,
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            let (r, c) = t.dims2()?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("column count {c} differs from {cols}")));
            }
            rows += r;
            data.extend_from_slice(&t.data);
        }
        Self::matrix(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    fn lcg_matrix(r: usize, c: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..r * c)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let r = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let c = Tensor::from_rows(&[[0.0], [5.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = lcg_matrix(3, 4, 1);
        let b = lcg_matrix(4, 2, 2);
        assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
        let at = a.transpose().unwrap();
        assert_eq!(at.matmul_tn(&b).unwrap(), naive_matmul(&a, &b));
        let bt = b.transpose().unwrap();
        let nt = a.matmul_nt(&bt).unwrap();
        for (x, y) in nt.data().iter().zip(naive_matmul(&a, &b).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn dot_and_norms() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        let b = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(a.dot(&b).unwrap(), 0.0);
        let c = Tensor::vector(vec![1.0, 1.0]);
        let d = Tensor::vector(vec![2.0, 2.0]);
        assert_eq!(c.dot(&d).unwrap(), 4.0);
        assert!(a.dot(&Tensor::vector(vec![1.0])).is_err());
        assert_eq!(Tensor::vector(vec![3.0, 4.0]).l2_norm(), 5.0);
        assert_eq!(Tensor::diag(&[1.0, 2.0, 3.0]).trace().unwrap(), 6.0);
    }

    #[test]
    fn frobenius_inner_examples() {
        let i2 = Tensor::eye(2);
        assert_eq!(i2.frobenius_inner(&i2).unwrap(), 2.0);
        assert_eq!(i2.frobenius_inner(&Tensor::diag(&[1.0, 0.0])).unwrap(), 1.0);
        assert!(i2.frobenius_inner(&Tensor::eye(3)).is_err());
    }

    #[test]
    fn inverse_of_scalar_matrix() {
        let inv = Tensor::eye(3).scale(2.0).inverse().unwrap();
        assert_eq!(inv, Tensor::eye(3).scale(0.5));
    }

    #[test]
    fn inverse_round_trip() {
        let mut a = lcg_matrix(5, 5, 9);
        for i in 0..5 {
            a.data_mut()[i * 5 + i] += 3.0;
        }
        let inv = a.inverse().unwrap();
        for prod in [inv.matmul(&a).unwrap(), a.matmul(&inv).unwrap()] {
            for (x, y) in prod.data().iter().zip(Tensor::eye(5).data()) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn inverse_detects_singularity() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(matches!(a.inverse(), Err(Error::Singular { .. })));
        assert!(matches!(Tensor::zeros(&[2, 2]).inverse(), Err(Error::Singular { .. })));
        assert!(matches!(Tensor::zeros(&[2, 3]).inverse(), Err(Error::Shape { .. })));
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }
}
