//! Cholesky helpers and the multivariate normal log density.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter levels tried, in order, after a plain factorization fails.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// A Cholesky factor together with the diagonal jitter that was needed.
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L z = b` for the lower factor.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l_dirty();
        l.solve_lower_triangular(b).expect("nonsingular Cholesky factor")
    }

    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        l.solve_lower_triangular(b).expect("nonsingular Cholesky factor")
    }
}

/// Factorizes `m`, escalating a diagonal jitter proportional to the mean
/// diagonal through [`JITTER_LADDER`] on failure.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<Factor> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let n = m.nrows();
    let scale = if n == 0 { 1.0 } else { m.diagonal().mean().abs().max(f64::MIN_POSITIVE) };
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = a.cholesky() {
            return Ok(Factor { chol, jitter });
        }
    }
    Err(Error::Conditioning(format!(
        "{n}×{n} covariance is not positive definite even with relative jitter {:e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

/// `log N(y; mean, cov)` computed through a Cholesky factor.
pub fn mvn_log_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if y.len() != mean.len() || cov.nrows() != y.len() || cov.ncols() != y.len() {
        return Err(Error::structural("dimension mismatch in normal log density"));
    }
    let factor = cholesky_jittered(cov)?;
    let z = factor.solve_lower(&(y - mean));
    let n = y.len() as f64;
    Ok(-0.5 * (n * (2.0 * PI).ln() + factor.log_det() + z.norm_squared()))
}

/// `log N(y; mean, σ²·I)` without building a matrix.
pub fn iid_normal_log_density(y: &DVector<f64>, mean: &DVector<f64>, var: f64) -> f64 {
    let n = y.len() as f64;
    let ss: f64 = y.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * (n * (2.0 * PI * var).ln() + ss / var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_density() {
        let y = DVector::from_vec(vec![1.3]);
        let m = DVector::from_vec(vec![0.5]);
        let v = 2.0;
        let cov = DMatrix::from_element(1, 1, v);
        let expected = -0.5 * (2.0 * PI * v).ln() - 0.5 * 0.8f64.powi(2) / v;
        assert!((mvn_log_density(&y, &m, &cov).unwrap() - expected).abs() < 1e-14);
        assert!((iid_normal_log_density(&y, &m, v) - expected).abs() < 1e-14);
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let f = cholesky_jittered(&m).unwrap();
        assert!(f.jitter > 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_jittered(&bad), Err(Error::Conditioning(_))));
    }
}
