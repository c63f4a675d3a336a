//! Convergence diagnostics for MCMC output.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Value reported when between-chain spread meets zero within-chain spread.
pub const PSRF_SENTINEL: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Psrf {
    pub per_coordinate: Vec<f64>,
    pub multivariate: f64,
}

/// Gelman–Rubin potential scale reduction factors.
///
/// Each chain is an `n × p` matrix. Per coordinate, with `W` the mean
/// within-chain variance and `B/n` the variance of the chain means,
/// `R = √(((n−1)/n·W + B/n)/W)`. The multivariate factor is
/// `√((n−1)/n + (m+1)/m·λ_max(W⁻¹B/n))`.
pub fn gelman_rubin(chains: &[DMatrix<f64>]) -> Result<Psrf> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::domain(format!("need at least 2 chains, got {m}")));
    }
    let (n, p) = chains[0].shape();
    if chains.iter().any(|c| c.shape() != (n, p)) {
        return Err(Error::structural("chains must have equal lengths and widths"));
    }
    if n < 10 {
        return Err(Error::domain(format!("need at least 10 samples per chain, got {n}")));
    }
    let nf = n as f64;
    let mf = m as f64;
    let means: Vec<_> = chains.iter().map(|c| c.row_mean()).collect();
    let grand = means.iter().fold(nalgebra::RowDVector::zeros(p), |a, b| a + b) / mf;

    let mut w = DMatrix::zeros(p, p);
    for (c, mean) in chains.iter().zip(&means) {
        let mut centered = c.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean;
        }
        w += centered.tr_mul(&centered) / (nf - 1.0);
    }
    w /= mf;
    let mut b_over_n = DMatrix::zeros(p, p);
    for mean in &means {
        let d = mean - &grand;
        b_over_n += d.tr_mul(&d);
    }
    b_over_n /= mf - 1.0;

    let per_coordinate = (0..p)
        .map(|j| {
            let wj = w[(j, j)];
            let bj = b_over_n[(j, j)];
            if wj > 0.0 {
                (((nf - 1.0) / nf * wj + bj) / wj).sqrt()
            } else if bj > 0.0 {
                PSRF_SENTINEL
            } else {
                ((nf - 1.0) / nf).sqrt()
            }
        })
        .collect();

    let multivariate = multivariate_psrf(&w, &b_over_n, nf, mf);
    Ok(Psrf {
        per_coordinate,
        multivariate,
    })
}

fn multivariate_psrf(w: &DMatrix<f64>, b_over_n: &DMatrix<f64>, n: f64, m: f64) -> f64 {
    let base = (n - 1.0) / n;
    let p = w.nrows();
    let max_w = w.diagonal().max();
    let max_b = b_over_n.diagonal().max();
    if !(max_b > 0.0) {
        return base.sqrt();
    }
    if !(max_w > 0.0) {
        return PSRF_SENTINEL;
    }
    // Floor W so the generalized eigenproblem stays defined.
    let floor = 1e-12 * max_w;
    let mut wf = w.clone();
    for i in 0..p {
        if wf[(i, i)] < floor {
            wf[(i, i)] = floor;
        }
    }
    let Some(chol) = wf.cholesky() else {
        return PSRF_SENTINEL;
    };
    // λ_max(W⁻¹B) = λ_max(L⁻¹ B L⁻ᵀ).
    let l = chol.l();
    let linv_b = l.solve_lower_triangular(b_over_n).expect("nonsingular factor");
    let sym = l
        .solve_lower_triangular(&linv_b.transpose())
        .expect("nonsingular factor");
    let sym = (&sym + sym.transpose()) * 0.5;
    let lambda = sym.symmetric_eigenvalues().max();
    if lambda.is_nan() {
        return PSRF_SENTINEL;
    }
    let lambda = lambda.max(0.0);
    let r = (base + (m + 1.0) / m * lambda).sqrt();
    if r.is_finite() {
        r.min(PSRF_SENTINEL)
    } else {
        PSRF_SENTINEL
    }
}

/// Biased-normalized autocorrelation up to `max_lag`. The flag marks a
/// constant series, for which every lag beyond zero is reported as 0.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Result<(Vec<f64>, bool)> {
    let n = x.len();
    if n <= max_lag {
        return Err(Error::domain(format!("series of length {n} is too short for lag {max_lag}")));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let denom: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if !(denom > 0.0) {
        let mut acf = vec![0.0; max_lag + 1];
        acf[0] = 1.0;
        return Ok((acf, true));
    }
    let acf = (0..=max_lag)
        .map(|lag| {
            let s: f64 = (0..n - lag).map(|t| (x[t] - mean) * (x[t + lag] - mean)).sum();
            s / denom
        })
        .collect();
    Ok((acf, false))
}
