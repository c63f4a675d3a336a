//! Expected-improvement enrichment of an emulator design.
//!
//! Each step calibrates briefly, fits a GP to the sum of squares
//! `SS(θ) = Σ_i (y_i − F(x_i, θ))²` at the θ-slices of the current design,
//! picks the candidate θ maximizing expected improvement, runs the code at
//! `(x_i, θ*)` for every observation and refits the emulator.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibration::{calibrate, derive_seed};
use crate::design::{random_lhs, unscale, DesignOfExperiments};
use crate::emulator::{fit_emulator, EmulatorModel, FitOptions};
use crate::error::{Error, Result};
use crate::kernels::KernelFamily;
use crate::models::{BandSelect, StatModel};
use crate::priors::PriorSet;
use crate::sampler::EstimOptions;

/// Floor applied to the predictive standard deviation.
pub const SD_FLOOR: f64 = 1e-12;

/// `(f_min − μ)·Φ(z) + s·φ(z)` with `z = (f_min − μ)/s`.
pub fn expected_improvement(mu: f64, sd: f64, f_min: f64) -> f64 {
    let s = sd.max(SD_FLOOR);
    let d = f_min - mu;
    let z = d / s;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let phi = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    (d * n.cdf(z) + s * phi).max(0.0)
}

/// EI of an objective emulator at each candidate row.
pub fn expected_improvement_at(objective: &EmulatorModel, f_min: f64, candidates: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (mu, var) = objective.predict_marginal(candidates)?;
    Ok(DVector::from_iterator(
        mu.len(),
        mu.iter().zip(var.iter()).map(|(m, v)| expected_improvement(*m, v.sqrt(), f_min)),
    ))
}

/// The candidate with the largest EI (first on ties).
pub fn maximize_ei(objective: &EmulatorModel, f_min: f64, candidates: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
    if candidates.nrows() == 0 {
        return Err(Error::domain("no EI candidates"));
    }
    let ei = expected_improvement_at(objective, f_min, candidates)?;
    let best = ei.imax();
    Ok((candidates.row(best).iter().copied().collect(), ei[best]))
}

#[derive(Debug, Clone)]
pub struct SeqDesignOptions {
    /// Points to add.
    pub k: usize,
    /// Fresh LHS candidates per step.
    pub candidates: usize,
    /// Budget of each short calibration.
    pub estim: EstimOptions,
    pub seed: u64,
}

impl SeqDesignOptions {
    /// Short-run defaults: 100 Gibbs, 600 MH, burn-in 200.
    pub fn new(k: usize, theta_init: Vec<f64>) -> Self {
        let mut estim = EstimOptions::new(100, 600, theta_init);
        estim.burn_in = 200;
        Self {
            k,
            candidates: 1000,
            estim,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeqStep {
    pub theta: Vec<f64>,
    pub ei: f64,
    pub ss: f64,
    pub design_rows: usize,
}

#[derive(Debug, Clone)]
pub struct SeqDesignResult {
    pub model: StatModel,
    pub trace: Vec<SeqStep>,
    /// True when a step stopped because the best EI fell below `1e-12`.
    pub converged: bool,
}

/// Distinct θ-slices of an emulator design, in first-appearance order.
pub fn theta_slices(emulator: &EmulatorModel) -> Vec<Vec<f64>> {
    let d = emulator.input_dim();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for row in emulator.design().points.row_iter() {
        let theta: Vec<f64> = row.iter().skip(d).copied().collect();
        if !out.contains(&theta) {
            out.push(theta);
        }
    }
    out
}

/// `Σ_i (y_i − μ(x_i, θ))²` through the emulator mean.
pub fn sum_of_squares(model: &StatModel, emulator: &EmulatorModel, theta: &[f64]) -> Result<f64> {
    let rows = StatModel::joint_rows(model.data().x(), theta);
    let (mu, _) = emulator.predict_marginal(&rows)?;
    Ok((model.data().y() - mu).norm_squared())
}

fn in_theta_support(priors: &PriorSet, theta: &[f64]) -> bool {
    priors
        .priors()
        .iter()
        .zip(theta)
        .all(|(p, t)| p.log_density(*t) > f64::NEG_INFINITY)
}

/// Enriches the design of an emulator-based model.
pub fn sequential_design(model: &StatModel, priors: &PriorSet, opts: &SeqDesignOptions) -> Result<SeqDesignResult> {
    if !model.kind().uses_emulator() {
        return Err(Error::Unsupported("design enrichment needs an emulator-based model".into()));
    }
    let code = model
        .code()
        .cloned()
        .ok_or_else(|| Error::Unsupported("design enrichment needs the simulator to run new points".into()))?;
    let mut current = model.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let d = model.data().dim();
    let p = model.layout().p;

    for step in 0..opts.k {
        let em = current.emulator().expect("emulator model").clone();
        let mut estim = opts.estim.clone();
        estim.seed = derive_seed(opts.seed, 2 * step as u64);
        let short = calibrate(&current, priors, &estim, BandSelect::Err, None)?;

        let slices = theta_slices(&em);
        let ss: Vec<f64> = slices
            .iter()
            .map(|t| sum_of_squares(&current, &em, t))
            .collect::<Result<_>>()?;
        let f_min = ss.iter().copied().fold(f64::INFINITY, f64::min);
        let lower = em.design().lower[d..].to_vec();
        let upper = em.design().upper[d..].to_vec();
        let theta_points = DMatrix::from_fn(slices.len(), p, |i, j| slices[i][j]);
        let obj_design = DesignOfExperiments::new(theta_points, lower.clone(), upper.clone(), em.design().provenance)?;
        let objective = fit_emulator(
            &obj_design,
            0,
            &DVector::from_vec(ss),
            &FitOptions::new(KernelFamily::Matern52).seed(derive_seed(opts.seed, 2 * step as u64 + 1)),
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 2 * step as u64 + 1));
        let lhs = unscale(&random_lhs(opts.candidates.max(1), p, &mut rng), &lower, &upper)?;
        let mut cands: Vec<Vec<f64>> = lhs.row_iter().map(|r| r.iter().copied().collect()).collect();
        // Posterior draws focus the search where the short run concentrated.
        let pooled = short.pooled_samples();
        let stride = (pooled.nrows() / 200).max(1);
        for row in pooled.row_iter().step_by(stride) {
            let theta: Vec<f64> = row.iter().take(p).copied().collect();
            if theta.iter().enumerate().all(|(j, t)| *t >= lower[j] && *t <= upper[j]) {
                cands.push(theta);
            }
        }
        cands.retain(|t| in_theta_support(priors, t));
        let cand_mat = DMatrix::from_fn(cands.len(), p, |i, j| cands[i][j]);
        let (theta_star, ei_star) = maximize_ei(&objective, f_min, &cand_mat)?;
        if ei_star < 1e-12 {
            converged = true;
            break;
        }

        let x = current.data().x();
        let n = x.nrows();
        let mut new_y = Vec::with_capacity(n);
        for i in 0..n {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            new_y.push(code.eval(&xi, &theta_star)?);
        }
        let old = em.design();
        let mut points = old.points.clone().resize_vertically(old.n() + n, 0.0);
        points.rows_mut(old.n(), n).copy_from(&StatModel::joint_rows(x, &theta_star));
        let design = DesignOfExperiments::new(points, old.lower.clone(), old.upper.clone(), old.provenance)?;
        let outputs = DVector::from_iterator(old.n() + n, em.outputs().iter().copied().chain(new_y));
        // Warm start from the current lengthscales.
        let mut fit = FitOptions::new(em.kernel().family);
        fit.starts = Some(vec![em.kernel().lengthscales.clone()]);
        let refit = fit_emulator(&design, d, &outputs, &fit)?;
        current = current.with_new_emulator(Arc::new(refit))?;
        let ss_star = sum_of_squares(&current, current.emulator().expect("emulator"), &theta_star)?;
        trace.push(SeqStep {
            theta: theta_star,
            ei: ei_star,
            ss: ss_star,
            design_rows: design.n(),
        });
    }
    Ok(SeqDesignResult {
        model: current,
        trace,
        converged,
    })
}
