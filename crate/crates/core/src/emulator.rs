//! Gaussian-process emulator of the simulator.
//!
//! The process has a constant trend `β` and covariance `σ_f²·(R_ψ + g·I)`
//! where `R_ψ` is a unit-variance correlation evaluated on inputs mapped to
//! the unit cube of the design bounds and `g` is a small relative nugget.
//! Given `ψ`, both `β` (generalized least squares) and `σ_f²` are profiled
//! out in closed form; `ψ` is found by multi-start bounded Nelder–Mead on
//! the log-lengthscales.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Table;
use crate::design::{rescale, DesignOfExperiments, Provenance};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::optim::NelderMead;

/// Relative nugget levels tried in order when factorization fails.
pub const NUGGET_LADDER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Lengthscale search box in unit-cube coordinates.
pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-2, 10.0);

/// `log N(y; β·1, K + σ²·g·I)` where `K` is the kernel covariance of the
/// rows of `points` (in whatever coordinates the kernel expects).
pub fn gp_log_marginal_likelihood(
    points: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: &KernelSpec,
    beta: f64,
    nugget: f64,
) -> Result<f64> {
    if points.nrows() != y.len() {
        return Err(Error::structural("design rows and outputs differ in length"));
    }
    let mut cov = kernel.covariance_symmetric(points)?;
    for i in 0..y.len() {
        cov[(i, i)] += kernel.variance * nugget;
    }
    let chol = cov.cholesky().ok_or_else(|| {
        Error::Conditioning("emulator covariance is not positive definite".into())
    })?;
    let resid = y.map(|v| v - beta);
    let z = chol.l_dirty().solve_lower_triangular(&resid).expect("nonsingular factor");
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (y.len() as f64 * (2.0 * PI).ln() + log_det + z.norm_squared()))
}

/// Closed-form profile of `β` and `σ_f²` at fixed lengthscales.
#[derive(Clone)]
struct Profile {
    beta: f64,
    variance: f64,
    nugget: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_likelihood: f64,
}

fn variance_floor(y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.mean();
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    1e-12 * var + 1e-300
}

fn profile_at(
    unit: &DMatrix<f64>,
    y: &DVector<f64>,
    family: KernelFamily,
    lengthscales: &[f64],
    nuggets: &[f64],
) -> Option<Profile> {
    let corr = KernelSpec::new(family, 1.0, lengthscales.to_vec()).ok()?;
    let base = corr.covariance_symmetric(unit).ok()?;
    let n = y.len();
    for &g in nuggets {
        let mut c = base.clone();
        for i in 0..n {
            c[(i, i)] += g;
        }
        let Some(chol) = c.cholesky() else { continue };
        let l = chol.l_dirty();
        let ones = DVector::from_element(n, 1.0);
        let u = l.solve_lower_triangular(&ones)?;
        let w = l.solve_lower_triangular(y)?;
        let constant = y.iter().all(|v| *v == y[0]);
        let (beta, alpha) = if constant {
            (y[0], DVector::zeros(n))
        } else {
            let beta = u.dot(&w) / u.norm_squared();
            (beta, &w - &u * beta)
        };
        let quad = alpha.norm_squared();
        let variance = (quad / n as f64).max(variance_floor(y));
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_likelihood =
            -0.5 * (n as f64 * (2.0 * PI * variance).ln() + log_det + quad / variance);
        if !log_likelihood.is_finite() {
            continue;
        }
        return Some(Profile {
            beta,
            variance,
            nugget: g,
            chol,
            alpha,
            log_likelihood,
        });
    }
    None
}

/// Options for [`fit_emulator`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub family: KernelFamily,
    pub restarts: usize,
    pub seed: u64,
    /// Explicit starting lengthscales; replaces the random starts when set.
    pub starts: Option<Vec<Vec<f64>>>,
}

impl FitOptions {
    pub fn new(family: KernelFamily) -> Self {
        Self {
            family,
            restarts: 5,
            seed: 0,
            starts: None,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A fitted emulator. Immutable; safe to share across threads.
#[derive(Clone)]
pub struct EmulatorModel {
    design: DesignOfExperiments,
    unit: DMatrix<f64>,
    outputs: DVector<f64>,
    input_dim: usize,
    kernel: KernelSpec,
    beta: f64,
    nugget: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_likelihood: f64,
}

impl std::fmt::Debug for EmulatorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmulatorModel")
            .field("n", &self.outputs.len())
            .field("input_dim", &self.input_dim)
            .field("kernel", &self.kernel)
            .field("beta", &self.beta)
            .field("nugget", &self.nugget)
            .finish()
    }
}

fn check_training(design: &DesignOfExperiments, input_dim: usize, y: &DVector<f64>) -> Result<()> {
    if design.n() != y.len() {
        return Err(Error::structural(format!(
            "design has {} rows but {} outputs",
            design.n(),
            y.len()
        )));
    }
    if input_dim > design.dim() {
        return Err(Error::structural("input dimension exceeds design width"));
    }
    if y.is_empty() {
        return Err(Error::domain("an emulator needs at least one training point"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("emulator outputs must be finite"));
    }
    Ok(())
}

/// Fits an emulator by maximizing the profile likelihood over lengthscales.
pub fn fit_emulator(
    design: &DesignOfExperiments,
    input_dim: usize,
    y: &DVector<f64>,
    opts: &FitOptions,
) -> Result<EmulatorModel> {
    check_training(design, input_dim, y)?;
    let unit = rescale(&design.points, &design.lower, &design.upper)?;
    let q = design.dim();

    if y.iter().all(|v| *v == y[0]) {
        return EmulatorModel::from_hyperparameters(design.clone(), input_dim, y.clone(), opts.family, vec![1.0; q], None);
    }

    let (lo, hi) = (LENGTHSCALE_BOUNDS.0.ln(), LENGTHSCALE_BOUNDS.1.ln());
    let starts: Vec<Vec<f64>> = match &opts.starts {
        Some(s) => s.iter().map(|v| v.iter().map(|l| l.ln().clamp(lo, hi)).collect()).collect(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            (0..opts.restarts.max(1))
                .map(|_| (0..q).map(|_| rng.random_range(lo..hi)).collect())
                .collect()
        }
    };
    let lower = vec![lo; q];
    let upper = vec![hi; q];
    let nm = NelderMead {
        ftol: 1e-8,
        max_evals: 600 * q.max(1),
        initial_step: 0.15,
        restarts: 3,
    };

    let results: Vec<Option<(Vec<f64>, f64)>> = starts
        .par_iter()
        .map(|start| {
            let objective = |logl: &[f64]| {
                let ls: Vec<f64> = logl.iter().map(|v| v.exp()).collect();
                profile_at(&unit, y, opts.family, &ls, &NUGGET_LADDER)
                    .map(|p| -p.log_likelihood)
                    .unwrap_or(f64::INFINITY)
            };
            let m = nm.minimize(objective, start, &lower, &upper);
            m.value.is_finite().then(|| (m.x, m.value))
        })
        .collect();

    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in results.into_iter().flatten() {
        if best.as_ref().map_or(true, |b| r.1 < b.1) {
            best = Some(r);
        }
    }
    let (logl, _) = best.ok_or_else(|| {
        Error::Conditioning("emulator covariance could not be factorized for any restart".into())
    })?;
    let ls: Vec<f64> = logl.iter().map(|v| v.exp()).collect();
    EmulatorModel::from_hyperparameters(design.clone(), input_dim, y.clone(), opts.family, ls, None)
}

#[derive(Serialize, Deserialize)]
struct EmulatorManifest {
    family: KernelFamily,
    variance: f64,
    lengthscales: Vec<f64>,
    beta: f64,
    nugget: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    input_dim: usize,
    n_params: usize,
    provenance: Provenance,
    log_likelihood: f64,
}

impl EmulatorModel {
    /// Builds the emulator at given lengthscales, profiling `β` and `σ_f²`.
    /// With `nugget = None` the nugget ladder is walked until factorization
    /// succeeds.
    pub fn from_hyperparameters(
        design: DesignOfExperiments,
        input_dim: usize,
        y: DVector<f64>,
        family: KernelFamily,
        lengthscales: Vec<f64>,
        nugget: Option<f64>,
    ) -> Result<Self> {
        check_training(&design, input_dim, &y)?;
        if lengthscales.len() != design.dim() && lengthscales.len() != 1 {
            return Err(Error::structural("one lengthscale per design column is required"));
        }
        let unit = rescale(&design.points, &design.lower, &design.upper)?;
        let ladder: Vec<f64> = match nugget {
            Some(g) => vec![g],
            None => NUGGET_LADDER.to_vec(),
        };
        let p = profile_at(&unit, &y, family, &lengthscales, &ladder).ok_or_else(|| {
            Error::Conditioning(format!(
                "emulator covariance not factorizable up to nugget {:e}",
                ladder[ladder.len() - 1]
            ))
        })?;
        let kernel = KernelSpec::new(family, p.variance, lengthscales)?;
        Ok(Self {
            design,
            unit,
            outputs: y,
            input_dim,
            kernel,
            beta: p.beta,
            nugget: p.nugget,
            chol: p.chol,
            alpha: p.alpha,
            log_likelihood: p.log_likelihood,
        })
    }

    pub fn design(&self) -> &DesignOfExperiments {
        &self.design
    }

    pub fn outputs(&self) -> &DVector<f64> {
        &self.outputs
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_params(&self) -> usize {
        self.design.dim() - self.input_dim
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn variance(&self) -> f64 {
        self.kernel.variance
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// Profile log-likelihood at the stored hyperparameters.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Lower Cholesky factor of `R_ψ(D) + g·I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    fn correlation(&self) -> KernelSpec {
        KernelSpec {
            family: self.kernel.family,
            variance: 1.0,
            lengthscales: self.kernel.lengthscales.clone(),
        }
    }

    fn to_unit(&self, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if t.ncols() != self.design.dim() {
            return Err(Error::structural(format!(
                "prediction points have {} columns, emulator expects {}",
                t.ncols(),
                self.design.dim()
            )));
        }
        rescale(t, &self.design.lower, &self.design.upper)
    }

    /// `L⁻¹ R(D, T)` for prediction points `T`.
    fn projected_cross(&self, unit_t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cross = self.correlation().covariance_matrix(&self.unit, unit_t)?;
        Ok(self
            .chol
            .l_dirty()
            .solve_lower_triangular(&cross)
            .expect("nonsingular factor"))
    }

    /// Conditional mean and full covariance at the rows of `t`.
    pub fn predict(&self, t: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let unit_t = self.to_unit(t)?;
        let v = self.projected_cross(&unit_t)?;
        let mean = v.tr_mul(&self.alpha).add_scalar(self.beta);
        let prior = self.correlation().covariance_symmetric(&unit_t)?;
        let mut cov = (prior - v.tr_mul(&v)) * self.kernel.variance;
        // Exact symmetry for downstream factorizations.
        let m = cov.nrows();
        for i in 0..m {
            for j in 0..i {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
        }
        Ok((mean, cov))
    }

    /// Conditional mean and marginal variances only.
    pub fn predict_marginal(&self, t: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let unit_t = self.to_unit(t)?;
        let v = self.projected_cross(&unit_t)?;
        let mean = v.tr_mul(&self.alpha).add_scalar(self.beta);
        let var = DVector::from_iterator(
            v.ncols(),
            v.column_iter()
                .map(|c| (self.kernel.variance * (1.0 - c.norm_squared())).max(0.0)),
        );
        Ok((mean, var))
    }

    /// Serializes to `<stem>.json` (hyperparameters and bounds) and
    /// `<stem>.csv` (design rows with their outputs in column `y`).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let manifest = EmulatorManifest {
            family: self.kernel.family,
            variance: self.kernel.variance,
            lengthscales: self.kernel.lengthscales.clone(),
            beta: self.beta,
            nugget: self.nugget,
            lower: self.design.lower.clone(),
            upper: self.design.upper.clone(),
            input_dim: self.input_dim,
            n_params: self.n_params(),
            provenance: self.design.provenance,
            log_likelihood: self.log_likelihood,
        };
        let jpath = dir.join(format!("{stem}.json"));
        std::fs::write(&jpath, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&jpath, e))?;
        let mut headers = DesignOfExperiments::headers(self.input_dim, self.n_params());
        headers.push("y".into());
        let mut m = self.design.points.clone().insert_column(self.design.dim(), 0.0);
        m.set_column(self.design.dim(), &self.outputs);
        Table::from_matrix(headers, &m).write_csv(&dir.join(format!("{stem}.csv")))
    }

    /// Restores an emulator written by [`EmulatorModel::save`] without refitting.
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let jpath = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&jpath).map_err(|e| Error::io(&jpath, e))?;
        let man: EmulatorManifest = serde_json::from_str(&text)?;
        let table = Table::read_csv(&dir.join(format!("{stem}.csv")))?;
        let m = table.to_matrix();
        let q = man.input_dim + man.n_params;
        if m.ncols() != q + 1 {
            return Err(Error::structural("emulator CSV width does not match its manifest"));
        }
        let design = DesignOfExperiments::new(
            m.columns(0, q).into_owned(),
            man.lower,
            man.upper,
            man.provenance,
        )?;
        let y = m.column(q).into_owned();
        let unit = rescale(&design.points, &design.lower, &design.upper)?;
        let kernel = KernelSpec::new(man.family, man.variance, man.lengthscales)?;
        let corr = KernelSpec::new(man.family, 1.0, kernel.lengthscales.clone())?;
        let mut c = corr.covariance_symmetric(&unit)?;
        for i in 0..y.len() {
            c[(i, i)] += man.nugget;
        }
        let chol = c
            .cholesky()
            .ok_or_else(|| Error::Conditioning("stored emulator is not factorizable".into()))?;
        let resid = y.map(|v| v - man.beta);
        let alpha = chol.l_dirty().solve_lower_triangular(&resid).expect("nonsingular factor");
        Ok(Self {
            design,
            unit,
            outputs: y,
            input_dim: man.input_dim,
            kernel,
            beta: man.beta,
            nugget: man.nugget,
            chol,
            alpha,
            log_likelihood: man.log_likelihood,
        })
    }
}
