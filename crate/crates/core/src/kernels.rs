//! Stationary covariance functions shared by the code emulator and the
//! discrepancy term.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    #[serde(rename = "gauss")]
    Gauss,
    #[serde(rename = "exp")]
    Exp,
    #[serde(rename = "matern3_2")]
    Matern32,
    #[serde(rename = "matern5_2")]
    Matern52,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Gauss,
        KernelFamily::Exp,
        KernelFamily::Matern32,
        KernelFamily::Matern52,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            KernelFamily::Gauss => "gauss",
            KernelFamily::Exp => "exp",
            KernelFamily::Matern32 => "matern3_2",
            KernelFamily::Matern52 => "matern5_2",
        }
    }

    /// Unit-variance correlation at a lengthscale-normalized distance `h ≥ 0`.
    pub fn correlation(&self, h: f64) -> f64 {
        match self {
            KernelFamily::Gauss => (-0.5 * h * h).exp(),
            KernelFamily::Exp => (-0.5 * h).exp(),
            KernelFamily::Matern32 => {
                let a = 3f64.sqrt() * h;
                (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern52 => {
                let a = 5f64.sqrt() * h;
                (1.0 + a + 5.0 * h * h / 3.0) * (-a).exp()
            }
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelFamily::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::domain(format!(
                    "unknown kernel {s:?}; expected one of gauss, exp, matern3_2, matern5_2"
                ))
            })
    }
}

/// A kernel family with its variance and lengthscales.
///
/// A single lengthscale is applied to every input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::domain(format!("kernel variance must be positive, got {variance}")));
        }
        if lengthscales.is_empty() {
            return Err(Error::structural("kernel needs at least one lengthscale"));
        }
        if let Some(bad) = lengthscales.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::domain(format!("kernel lengthscales must be positive, got {bad}")));
        }
        Ok(Self {
            family,
            variance,
            lengthscales,
        })
    }

    pub fn isotropic(family: KernelFamily, variance: f64, lengthscale: f64) -> Result<Self> {
        Self::new(family, variance, vec![lengthscale])
    }

    /// Covariance at distance `d` for an isotropic kernel.
    pub fn value(&self, d: f64) -> Result<f64> {
        if !(d >= 0.0) {
            return Err(Error::domain(format!("distance must be nonnegative, got {d}")));
        }
        if self.lengthscales.len() != 1 {
            return Err(Error::structural(
                "scalar distance requires an isotropic kernel",
            ));
        }
        Ok(self.variance * self.family.correlation(d / self.lengthscales[0]))
    }

    fn check_dim(&self, q: usize) -> Result<()> {
        if self.lengthscales.len() == 1 || self.lengthscales.len() == q {
            Ok(())
        } else {
            Err(Error::structural(format!(
                "kernel has {} lengthscales but inputs have {q} columns",
                self.lengthscales.len()
            )))
        }
    }

    /// Lengthscale-normalized Euclidean distance between two points.
    #[inline]
    pub fn scaled_distance(&self, a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
        let iso = self.lengthscales.len() == 1;
        a.zip(b)
            .enumerate()
            .map(|(k, (ak, bk))| {
                let l = if iso { self.lengthscales[0] } else { self.lengthscales[k] };
                let z = (ak - bk) / l;
                z * z
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `K[i, j] = σ²·ρ(‖(A_i − B_j)/ψ‖)`.
    pub fn covariance_matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.ncols() != b.ncols() {
            return Err(Error::structural(format!(
                "point sets have {} and {} columns",
                a.ncols(),
                b.ncols()
            )));
        }
        self.check_dim(a.ncols())?;
        Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
            let h = self.scaled_distance(a.row(i).iter().copied(), b.row(j).iter().copied());
            self.variance * self.family.correlation(h)
        }))
    }

    /// Symmetric covariance of a point set with itself; only the lower
    /// triangle is computed and mirrored.
    pub fn covariance_symmetric(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(a.ncols())?;
        let n = a.nrows();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.variance;
            for j in 0..i {
                let h = self.scaled_distance(a.row(i).iter().copied(), a.row(j).iter().copied());
                let v = self.variance * self.family.correlation(h);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }
}
