//! Batch second-order statistics: cross-correlation, covariance and the
//! entry-mean "mean norm" used by the cross-correlation losses.
//!
//! Expectations are batch means with the population (1/n) convention.
//! Each statistic has a plain version on [`Tensor`]s and a differentiable
//! version that records onto a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Divisor used by the mean norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanNormDivisor {
    /// Mean over every entry of the supplied matrix (p·q).
    #[default]
    Entries,
    /// Fixed 1/n² with n the batch size, regardless of the matrix shape.
    BatchSquared,
}

fn check_batch_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (n, h) = a.dims2()?;
    if b.shape() != a.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if n == 0 {
        return Err(Error::DegenerateBatch(format!("{op}: empty batch")));
    }
    Ok((n, h))
}

/// `(1/n)·Aᵀ B` for two n×h batches.
pub fn cross_correlation(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, _) = check_batch_pair("cross_correlation", a, b)?;
    Ok(a.matmul_tn(b)?.scale(1.0 / n as f64))
}

/// Population covariance `(1/n)(Z − z̄)ᵀ(Z − z̄)` of an n×h batch.
pub fn covariance(z: &Tensor) -> Result<Tensor> {
    let (n, h) = z.dims2()?;
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("covariance needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; h];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = z.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut c = centered.matmul_tn(&centered)?.scale(1.0 / n as f64);
    // Exact symmetry; the kernel already computes both triangles identically
    // but this keeps the invariant independent of summation order.
    for i in 0..h {
        for j in 0..i {
            let v = c.get2(i, j);
            c.data_mut()[j * h + i] = v;
        }
    }
    Ok(c)
}

/// Mean of all entries of `c`.
pub fn mean_norm(c: &Tensor) -> Result<f64> {
    let (p, q) = c.dims2()?;
    if p == 0 || q == 0 {
        return Err(Error::shape("mean_norm", "empty matrix"));
    }
    Ok(c.sum() / (p * q) as f64)
}

/// Mean norm with an explicit divisor convention; `batch` is only used by
/// [`MeanNormDivisor::BatchSquared`].
pub fn mean_norm_with(c: &Tensor, divisor: MeanNormDivisor, batch: usize) -> Result<f64> {
    match divisor {
        MeanNormDivisor::Entries => mean_norm(c),
        MeanNormDivisor::BatchSquared => {
            c.dims2()?;
            Ok(c.sum() / (batch * batch) as f64)
        }
    }
}

/// Differentiable [`cross_correlation`].
pub fn cross_correlation_node(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (n, _) = check_batch_pair("cross_correlation", tape.value(a), tape.value(b))?;
    let at = tape.transpose(a)?;
    let prod = tape.matmul(at, b)?;
    Ok(tape.scale(prod, 1.0 / n as f64))
}

/// Differentiable [`covariance`].
pub fn covariance_node(tape: &mut Tape, z: Var) -> Result<Var> {
    let (n, _) = tape.value(z).dims2()?;
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("covariance needs at least 2 rows, got {n}")));
    }
    let ones = tape.constant(Tensor::full(&[1, n], -1.0 / n as f64));
    let neg_mean = tape.matmul(ones, z)?;
    let centered = tape.add_row(z, neg_mean)?;
    let ct = tape.transpose(centered)?;
    let prod = tape.matmul(ct, centered)?;
    Ok(tape.scale(prod, 1.0 / n as f64))
}

/// Differentiable [`mean_norm_with`].
pub fn mean_norm_node(tape: &mut Tape, c: Var, divisor: MeanNormDivisor, batch: usize) -> Result<Var> {
    let (p, q) = tape.value(c).dims2()?;
    if p == 0 || q == 0 {
        return Err(Error::shape("mean_norm", "empty matrix"));
    }
    let denom = match divisor {
        MeanNormDivisor::Entries => (p * q) as f64,
        MeanNormDivisor::BatchSquared => (batch * batch) as f64,
    };
    let s = tape.sum(c);
    Ok(tape.scale(s, 1.0 / denom))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_correlation_examples() {
        let i2 = Tensor::eye(2);
        assert_eq!(cross_correlation(&i2, &i2).unwrap(), Tensor::eye(2).scale(0.5));
        let ones = Tensor::full(&[2, 2], 1.0);
        assert_eq!(cross_correlation(&ones, &ones).unwrap(), ones);
        assert!(cross_correlation(&i2, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn covariance_examples() {
        let z = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(covariance(&z).unwrap(), Tensor::diag(&[1.0, 0.0]));
        let same = Tensor::from_rows(&[[0.3, -2.0, 5.0]; 4]).unwrap();
        assert_eq!(covariance(&same).unwrap(), Tensor::zeros(&[3, 3]));
        assert!(matches!(covariance(&Tensor::zeros(&[1, 3])), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn mean_norm_examples() {
        let c = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(mean_norm(&c).unwrap(), 2.5);
        assert_eq!(mean_norm(&Tensor::zeros(&[3, 2])).unwrap(), 0.0);
        assert_eq!(mean_norm_with(&c, MeanNormDivisor::BatchSquared, 4).unwrap(), 10.0 / 16.0);
    }

    #[test]
    fn graph_versions_match_plain() {
        let z = Tensor::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.5], [-2.0, 1.0, 0.0]]).unwrap();
        let w = Tensor::from_rows(&[[1.0, 2.0, 3.0], [0.0, -1.0, 1.0], [2.0, 2.0, -2.0]]).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let wv = tape.leaf(w.clone());
        let c = covariance_node(&mut tape, zv).unwrap();
        let x = cross_correlation_node(&mut tape, zv, wv).unwrap();
        let m = mean_norm_node(&mut tape, x, MeanNormDivisor::Entries, 3).unwrap();
        let plain_c = covariance(&z).unwrap();
        for (a, b) in tape.value(c).data().iter().zip(plain_c.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(tape.value(x), &cross_correlation(&z, &w).unwrap());
        let expect = mean_norm(&cross_correlation(&z, &w).unwrap()).unwrap();
        assert!((tape.scalar(m).unwrap() - expect).abs() < 1e-15);
    }
}
