//! Calibration runs, point estimators, leave-one-out validation and
//! forecasting.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::{gelman_rubin, Psrf};
use crate::error::{Error, Result};
use crate::models::{normal_quantile, Band, BandSelect, StatModel};
use crate::priors::PriorSet;
use crate::sampler::{run_chains, ChainResult, EstimOptions};

/// Band level used for reported intervals and CV coverage.
pub const LEVEL: f64 = 0.95;

/// Derives a well-mixed 64-bit seed from a master seed and an index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-coordinate proposal multipliers equal to the prior standard deviations.
pub fn prior_proposal_scale(priors: &PriorSet) -> Vec<f64> {
    priors.std_devs()
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub model: StatModel,
    pub priors: PriorSet,
    pub opts: EstimOptions,
    pub chains: Vec<ChainResult>,
    pub map: Vec<f64>,
    pub map_log_post: f64,
    pub mean: Vec<f64>,
    pub band_select: BandSelect,
    pub bands: Vec<Band>,
    pub psrf: Option<Psrf>,
    pub cv: Option<CvReport>,
}

impl CalibrationResult {
    /// `(MAP, posterior mean)`.
    pub fn estimators(&self) -> (&[f64], &[f64]) {
        (&self.map, &self.mean)
    }

    /// Retained samples of every chain stacked in chain order.
    pub fn pooled_samples(&self) -> DMatrix<f64> {
        let p = self.map.len();
        let rows: usize = self.chains.iter().map(|c| c.mh.samples.nrows()).sum();
        let mut out = DMatrix::zeros(rows, p);
        let mut r = 0;
        for c in &self.chains {
            let n = c.mh.samples.nrows();
            out.rows_mut(r, n).copy_from(&c.mh.samples);
            r += n;
        }
        out
    }

    /// Posterior standard deviations of the pooled samples.
    pub fn posterior_sd(&self) -> Vec<f64> {
        let s = self.pooled_samples();
        s.column_iter().map(|c| c.variance().sqrt()).collect()
    }

    pub fn accept_gibbs_mean(&self) -> f64 {
        self.chains.iter().map(ChainResult::accept_gibbs_mean).sum::<f64>() / self.chains.len() as f64
    }

    pub fn accept_mh_mean(&self) -> f64 {
        self.chains.iter().map(ChainResult::accept_mh).sum::<f64>() / self.chains.len() as f64
    }
}

/// MAP (argmax of the stored log posterior, first occurrence wins) and the
/// pooled mean of the retained samples.
pub fn estimators(chains: &[ChainResult]) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let mut best: Option<(usize, usize, f64)> = None;
    let mut total = 0usize;
    let mut sum: Option<Vec<f64>> = None;
    for (ci, c) in chains.iter().enumerate() {
        for (i, lp) in c.mh.log_post.iter().enumerate() {
            if best.map_or(true, |b| *lp > b.2) {
                best = Some((ci, i, *lp));
            }
        }
        let s = sum.get_or_insert_with(|| vec![0.0; c.mh.samples.ncols()]);
        for row in c.mh.samples.row_iter() {
            for (acc, v) in s.iter_mut().zip(row.iter()) {
                *acc += v;
            }
        }
        total += c.mh.samples.nrows();
    }
    let (ci, i, lp) = best.ok_or_else(|| Error::State("no retained samples".into()))?;
    let map = chains[ci].mh.samples.row(i).iter().copied().collect();
    let mean = sum.expect("nonempty").into_iter().map(|s| s / total as f64).collect();
    Ok((map, lp, mean))
}

fn check_inputs(model: &StatModel, priors: &PriorSet, opts: &EstimOptions) -> Result<()> {
    if priors.layout() != model.layout() {
        return Err(Error::structural(format!(
            "{} priors for a model with {} parameter slots",
            priors.priors().len(),
            model.layout().total()
        )));
    }
    if opts.theta_init.len() != model.layout().total() {
        return Err(Error::structural(format!(
            "thetaInit has {} entries, the model has {} parameter slots",
            opts.theta_init.len(),
            model.layout().total()
        )));
    }
    if priors.log_density(&opts.theta_init)? == f64::NEG_INFINITY {
        return Err(Error::Initialization("thetaInit lies outside the prior support".into()));
    }
    Ok(())
}

fn sample_posterior(model: &StatModel, priors: &PriorSet, opts: &EstimOptions) -> Result<Vec<ChainResult>> {
    check_inputs(model, priors, opts)?;
    let target = |v: &[f64]| model.log_posterior(priors, v);
    run_chains(&target, opts)
}

/// Samples the posterior and summarizes it.
pub fn calibrate(
    model: &StatModel,
    priors: &PriorSet,
    opts: &EstimOptions,
    band_select: BandSelect,
    cv: Option<CvOptions>,
) -> Result<CalibrationResult> {
    let chains = sample_posterior(model, priors, opts)?;
    let (map, map_log_post, mean) = estimators(&chains)?;
    let bands = model.predictive_bands(&map, LEVEL, band_select)?;
    let psrf = if chains.len() > 1 && chains[0].mh.samples.nrows() >= 10 {
        let mats: Vec<_> = chains.iter().map(|c| c.mh.samples.clone()).collect();
        Some(gelman_rubin(&mats)?)
    } else {
        None
    };
    let cv = match cv {
        Some(o) => Some(cross_validate_loo(model, priors, opts, o.n_cv, o.seed)?),
        None => None,
    };
    Ok(CalibrationResult {
        model: model.clone(),
        priors: priors.clone(),
        opts: opts.clone(),
        chains,
        map,
        map_log_post,
        mean,
        band_select,
        bands,
        psrf,
        cv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvOptions {
    pub n_cv: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvRow {
    pub index: usize,
    pub predicted: f64,
    pub real: f64,
    pub error: f64,
    pub lo: f64,
    pub hi: f64,
}

impl CvRow {
    pub fn covered(&self) -> bool {
        self.real >= self.lo && self.real <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub method: &'static str,
    pub rows: Vec<CvRow>,
    pub rmse: f64,
    pub cover_rate: f64,
}

impl CvReport {
    pub fn from_rows(rows: Vec<CvRow>) -> Self {
        let n = rows.len() as f64;
        let rmse = (rows.iter().map(|r| (r.predicted - r.real).powi(2)).sum::<f64>() / n).sqrt();
        let cover_rate = rows.iter().filter(|r| r.covered()).count() as f64 / n;
        Self {
            method: "loo",
            rows,
            rmse,
            cover_rate,
        }
    }
}

/// Leave-one-out validation on `n_cv` observations chosen without
/// replacement. Each fold recalibrates on the remaining data and predicts
/// the held-out point at the fold MAP with the measurement-error band.
pub fn cross_validate_loo(
    model: &StatModel,
    priors: &PriorSet,
    opts: &EstimOptions,
    n_cv: usize,
    seed: u64,
) -> Result<CvReport> {
    let n = model.data().n();
    if n_cv == 0 || n_cv > n {
        return Err(Error::domain(format!("nCV must lie in [1, {n}], got {n_cv}")));
    }
    if n < 3 {
        return Err(Error::domain("leave-one-out needs at least 3 observations"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, n_cv).into_vec();
    indices.sort_unstable();
    let z = normal_quantile(LEVEL)?;
    let rows: Vec<Result<CvRow>> = indices
        .par_iter()
        .enumerate()
        .map(|(fold, &i)| {
            let fold_model = model.with_data(model.data().without(i)?)?;
            let mut fold_opts = opts.clone();
            fold_opts.seed = derive_seed(seed, fold as u64);
            let chains = sample_posterior(&fold_model, priors, &fold_opts)?;
            let (map, _, _) = estimators(&chains)?;
            let x = model.data().x().rows(i, 1).into_owned();
            let m = fold_model.moments_at(&x, &map)?;
            let var = m.noise_var + m.discrepancy_cov.as_ref().map_or(0.0, |d| d[(0, 0)]);
            let predicted = m.mean[0];
            let real = model.data().y()[i];
            let half = z * var.sqrt();
            Ok(CvRow {
                index: i,
                predicted,
                real,
                error: (predicted - real).abs(),
                lo: predicted - half,
                hi: predicted + half,
            })
        })
        .collect();
    Ok(CvReport::from_rows(rows.into_iter().collect::<Result<_>>()?))
}

/// Band table over the calibration inputs followed by new inputs.
#[derive(Debug, Clone)]
pub struct Forecast {
    pub x: DMatrix<f64>,
    pub region: Vec<&'static str>,
    pub bands: Vec<Band>,
}

/// MAP plug-in prediction over the observed inputs and `x_new`.
pub fn forecast(result: &CalibrationResult, x_new: &DMatrix<f64>) -> Result<Forecast> {
    forecast_at(&result.model, &result.map, result.band_select, x_new)
}

/// Plug-in prediction at a fixed parameter vector.
pub fn forecast_at(model: &StatModel, values: &[f64], band_select: BandSelect, x_new: &DMatrix<f64>) -> Result<Forecast> {
    let d = model.data().dim();
    if x_new.ncols() != d && x_new.nrows() > 0 {
        return Err(Error::structural(format!(
            "new inputs have {} columns, observations have {d}",
            x_new.ncols()
        )));
    }
    let calib = model.predictive_bands(values, LEVEL, band_select)?;
    let n = model.data().n();
    let m = x_new.nrows();
    let fresh = if m > 0 {
        Some(model.bands_at(x_new, values, LEVEL, band_select)?)
    } else {
        None
    };
    let mut x = DMatrix::zeros(n + m, d);
    x.rows_mut(0, n).copy_from(model.data().x());
    if m > 0 {
        x.rows_mut(n, m).copy_from(x_new);
    }
    let stack = |a: &nalgebra::DVector<f64>, b: Option<&nalgebra::DVector<f64>>| {
        nalgebra::DVector::from_iterator(n + m, a.iter().chain(b.into_iter().flat_map(|v| v.iter())).copied())
    };
    let bands = calib
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let f = fresh.as_ref().map(|f| &f[k]);
            Band {
                kind: c.kind,
                mean: stack(&c.mean, f.map(|f| &f.mean)),
                lo: stack(&c.lo, f.map(|f| &f.lo)),
                hi: stack(&c.hi, f.map(|f| &f.hi)),
            }
        })
        .collect();
    let region = std::iter::repeat("calibration")
        .take(n)
        .chain(std::iter::repeat("forecast").take(m))
        .collect();
    Ok(Forecast { x, region, bands })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code::Simulator;
    use crate::data::ObservationSet;
    use crate::kernels::KernelFamily;
    use crate::priors::PriorSpec;
    use std::sync::Arc;

    /// `f(x, θ) = θ·x`.
    #[derive(Debug)]
    struct Linear;
    impl Simulator for Linear {
        fn input_dim(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
            Ok(theta[0] * x[0])
        }
        fn describe(&self) -> String {
            "linear".into()
        }
    }

    fn linear_model(xs: &[f64], ys: &[f64]) -> StatModel {
        let data = ObservationSet::from_1d(xs, ys).unwrap();
        StatModel::with_code(crate::models::ModelKind::Model1, data, Arc::new(Linear), KernelFamily::Gauss).unwrap()
    }

    #[test]
    fn seeds_are_distinct() {
        let a: Vec<u64> = (0..100).map(|i| derive_seed(42, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(a.len(), b.len());
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
    }

    #[test]
    fn conjugate_posterior_mean() {
        // y = θ·x + ε with the noise variance pinned by a very tight prior,
        // θ ~ N(0, 1): the posterior mean of θ is Σxy / (Σx² + σ²).
        let xs = [0.5, 1.0, 1.5, 2.0];
        let ys = [0.61, 1.05, 1.38, 2.11];
        let model = linear_model(&xs, &ys);
        let s2 = 0.04;
        let priors = PriorSet::new(
            vec![PriorSpec::gaussian(0.0, 1.0).unwrap(), PriorSpec::gamma(1e8, s2 / 1e8).unwrap()],
            model.layout(),
        )
        .unwrap();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let post_mean = sxy / (sxx + s2);
        let post_var = s2 / (sxx + s2);
        let mut opts = EstimOptions::new(1000, 20_000, vec![0.5, s2]);
        opts.burn_in = 2000;
        opts.proposal_scale = Some(vec![0.2, s2 * 1e-4]);
        opts.seed = 4;
        let r = calibrate(&model, &priors, &opts, BandSelect::Err, None).unwrap();
        let samples = r.pooled_samples();
        let col: Vec<f64> = samples.column(0).iter().copied().collect();
        let (acf, _) = crate::diagnostics::autocorrelation(&col, 200).unwrap();
        let tau = 1.0 + 2.0 * acf[1..].iter().take_while(|r| **r > 0.05).sum::<f64>();
        let n_eff = col.len() as f64 / tau;
        assert!(
            (r.mean[0] - post_mean).abs() < 4.0 * (post_var / n_eff).sqrt(),
            "{} vs {post_mean}",
            r.mean[0]
        );
    }

    #[test]
    fn map_and_mean_bookkeeping() {
        let model = linear_model(&[1.0, 2.0, 3.0], &[1.0, 2.1, 2.9]);
        let priors = PriorSet::new(
            vec![PriorSpec::gaussian(1.0, 1.0).unwrap(), PriorSpec::gamma(1.0, 0.1).unwrap()],
            model.layout(),
        )
        .unwrap();
        let mut opts = EstimOptions::new(200, 600, vec![1.0, 0.05]);
        opts.burn_in = 100;
        opts.n_chains = 2;
        opts.proposal_scale = Some(prior_proposal_scale(&priors));
        let r = calibrate(&model, &priors, &opts, BandSelect::Err, None).unwrap();
        let max = r
            .chains
            .iter()
            .flat_map(|c| c.mh.log_post.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.map_log_post, max);
        let mean_of_means: Vec<f64> = (0..2)
            .map(|j| r.chains.iter().map(|c| c.mh.samples.column(j).mean()).sum::<f64>() / 2.0)
            .collect();
        for j in 0..2 {
            assert!((r.mean[j] - mean_of_means[j]).abs() < 1e-12);
        }
        let lp_mean = model.log_posterior(&priors, &r.mean).unwrap();
        assert!(r.map_log_post >= lp_mean - 1.0);
        assert!(r.psrf.is_some());
    }

    #[test]
    fn single_sample_estimators() {
        let model = linear_model(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let priors = PriorSet::new(
            vec![PriorSpec::gaussian(1.0, 1.0).unwrap(), PriorSpec::gamma(1.0, 0.1).unwrap()],
            model.layout(),
        )
        .unwrap();
        let mut opts = EstimOptions::new(10, 10, vec![1.0, 0.05]);
        opts.burn_in = 9;
        let r = calibrate(&model, &priors, &opts, BandSelect::Err, None).unwrap();
        assert_eq!(r.map, r.mean);
    }

    #[test]
    fn layout_mismatch() {
        let model = linear_model(&[1.0, 2.0], &[1.0, 2.0]);
        let priors = PriorSet::new(
            vec![
                PriorSpec::gaussian(1.0, 1.0).unwrap(),
                PriorSpec::gaussian(1.0, 1.0).unwrap(),
                PriorSpec::gamma(1.0, 0.1).unwrap(),
            ],
            crate::data::ParameterLayout::new(2, false),
        )
        .unwrap();
        let opts = EstimOptions::new(10, 10, vec![1.0, 1.0, 0.1]);
        assert!(matches!(
            calibrate(&model, &priors, &opts, BandSelect::Err, None),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn cv_report_arithmetic() {
        let rows = vec![CvRow {
            index: 3,
            predicted: 1.5,
            real: 1.2,
            error: 0.3,
            lo: 1.0,
            hi: 2.0,
        }];
        let r = CvReport::from_rows(rows);
        assert!((r.rmse - 0.3).abs() < 1e-15);
        assert_eq!(r.cover_rate, 1.0);
    }

    #[test]
    fn loo_on_noiseless_toy() {
        let xs: Vec<f64> = (1..=8).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.8 * x).collect();
        let model = linear_model(&xs, &ys);
        let s2 = 1e-4;
        let priors = PriorSet::new(
            vec![PriorSpec::gaussian(0.8, 0.1).unwrap(), PriorSpec::unif(s2 * 0.999, s2 * 1.001).unwrap()],
            model.layout(),
        )
        .unwrap();
        let mut opts = EstimOptions::new(200, 800, vec![0.8, s2]);
        opts.burn_in = 200;
        opts.proposal_scale = Some(vec![0.01, 1e-7]);
        let r = cross_validate_loo(&model, &priors, &opts, 8, 1).unwrap();
        assert_eq!(r.rows.len(), 8);
        for row in &r.rows {
            assert!(row.error < 3.0 * 1.96 * s2.sqrt(), "{row:?}");
        }
        let recomputed = (r.rows.iter().map(|x| x.error * x.error).sum::<f64>() / 8.0).sqrt();
        assert!((recomputed - r.rmse).abs() < 1e-12);
        assert!(cross_validate_loo(&model, &priors, &opts, 9, 1).is_err());
        assert!(cross_validate_loo(&model, &priors, &opts, 0, 1).is_err());
    }

    #[test]
    fn forecast_regions() {
        let model = linear_model(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.1]);
        let priors = PriorSet::new(
            vec![PriorSpec::gaussian(1.0, 1.0).unwrap(), PriorSpec::gamma(1.0, 0.1).unwrap()],
            model.layout(),
        )
        .unwrap();
        let mut opts = EstimOptions::new(100, 300, vec![1.0, 0.05]);
        opts.proposal_scale = Some(prior_proposal_scale(&priors));
        let r = calibrate(&model, &priors, &opts, BandSelect::Err, None).unwrap();
        let empty = forecast(&r, &DMatrix::zeros(0, 1)).unwrap();
        assert_eq!(empty.region, vec!["calibration"; 3]);
        assert_eq!(empty.bands[0].mean, r.bands[0].mean);
        let x_new = DMatrix::from_column_slice(2, 1, &[4.0, 5.0]);
        let f = forecast(&r, &x_new).unwrap();
        assert_eq!(f.region[3], "forecast");
        assert_eq!(f.bands[0].mean[4], r.map[0] * 5.0);
        assert_eq!(f.bands[0].lo.rows(0, 3), r.bands[0].lo.rows(0, 3));
        assert!(forecast(&r, &DMatrix::zeros(2, 2)).is_err());
    }
}
