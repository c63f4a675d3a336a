//! Two-stage adaptive MCMC.
//!
//! Stage one is a componentwise random-walk Metropolis-within-Gibbs whose
//! per-coordinate scales `k_j` adapt every 100 iterations. Its samples give
//! an empirical covariance `S`, which stage two uses for joint Gaussian
//! proposals `N(x, t·S)`, again with `t` adapted every 100 iterations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;

/// Adaptation window length.
pub const ADAPT_EVERY: usize = 100;
/// Target band for the cumulative acceptance rate.
pub const TARGET_BAND: (f64, f64) = (0.25, 0.5);

#[derive(Debug, Clone, PartialEq)]
pub struct EstimOptions {
    pub n_gibbs: usize,
    pub n_mh: usize,
    pub theta_init: Vec<f64>,
    /// Regulation factors for `k_j` (stage one) and `t` (stage two).
    pub r: [f64; 2],
    /// Initial proposal covariance; only its diagonal drives stage one.
    pub sig: DMatrix<f64>,
    pub n_chains: usize,
    pub burn_in: usize,
    /// Optional per-coordinate multipliers on the stage-one standard
    /// deviations; all ones when absent.
    pub proposal_scale: Option<Vec<f64>>,
    /// Start stage two at `theta_init` instead of the last stage-one state.
    pub mh_restart_init: bool,
    pub seed: u64,
}

impl EstimOptions {
    pub fn new(n_gibbs: usize, n_mh: usize, theta_init: Vec<f64>) -> Self {
        let p = theta_init.len();
        Self {
            n_gibbs,
            n_mh,
            theta_init,
            r: [0.1, 0.1],
            sig: DMatrix::identity(p, p),
            n_chains: 1,
            burn_in: 0,
            proposal_scale: None,
            mh_restart_init: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.theta_init.len();
        if p == 0 {
            return Err(Error::structural("thetaInit is empty"));
        }
        if self.sig.shape() != (p, p) {
            return Err(Error::structural(format!(
                "sig is {}×{} but thetaInit has {p} entries",
                self.sig.nrows(),
                self.sig.ncols()
            )));
        }
        if (&self.sig - self.sig.transpose()).amax() > 1e-12 * self.sig.amax().max(1.0) {
            return Err(Error::domain("sig must be symmetric"));
        }
        if self.sig.diagonal().iter().any(|v| !(*v > 0.0)) {
            return Err(Error::domain("sig must have a positive diagonal"));
        }
        if self.n_mh == 0 || self.burn_in >= self.n_mh {
            return Err(Error::domain(format!(
                "need Nmh > burnIn >= 0 (Nmh = {}, burnIn = {})",
                self.n_mh, self.burn_in
            )));
        }
        if self.n_chains == 0 {
            return Err(Error::domain("Nchains must be at least 1"));
        }
        if self.r.iter().any(|r| !(*r >= 0.0 && *r < 1.0)) {
            return Err(Error::domain(format!("r components must lie in [0, 1), got {:?}", self.r)));
        }
        if let Some(s) = &self.proposal_scale {
            if s.len() != p || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::domain("proposal scales must be positive, one per parameter"));
            }
        }
        if self.theta_init.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("thetaInit must be finite"));
        }
        Ok(())
    }

    fn scales(&self) -> Vec<f64> {
        self.proposal_scale
            .clone()
            .unwrap_or_else(|| vec![1.0; self.theta_init.len()])
    }
}

/// Evaluates a fallible target, turning domain and conditioning failures
/// into zero density.
fn eval_target<F>(target: &F, x: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    match target(x) {
        Ok(v) if v.is_nan() => Ok(f64::NEG_INFINITY),
        Ok(v) => Ok(v),
        Err(Error::Domain(_)) | Err(Error::Conditioning(_)) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// Metropolis acceptance: accept when `ln u ≤ proposed − current`.
pub fn accept(current: f64, proposed: f64, u: f64) -> bool {
    if !(proposed > f64::NEG_INFINITY) {
        return false;
    }
    let delta = proposed - current;
    !delta.is_nan() && u.ln() <= delta
}

fn adapt(scale: f64, accepted: usize, iterations: usize, r: f64) -> f64 {
    let rate = accepted as f64 / iterations as f64;
    if rate < TARGET_BAND.0 {
        scale * (1.0 - r)
    } else if rate > TARGET_BAND.1 {
        scale * (1.0 + r)
    } else {
        scale
    }
}

#[derive(Debug, Clone)]
pub struct GibbsOutput {
    pub samples: DMatrix<f64>,
    pub log_post: Vec<f64>,
    pub accepted: Vec<usize>,
    pub accept_rates: Vec<f64>,
    /// `k_j` after each adaptation window, first entry is the initial value.
    pub k_trace: Vec<Vec<f64>>,
}

/// Stage one. Coordinate `j` proposes `N(x_j, k_j·sig_jj·scale_j²)`.
pub fn metropolis_within_gibbs<F, R>(target: &F, opts: &EstimOptions, rng: &mut R) -> Result<GibbsOutput>
where
    F: Fn(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    let p = opts.theta_init.len();
    let mut x = opts.theta_init.clone();
    let mut cur = eval_target(target, &x)?;
    if !cur.is_finite() {
        return Err(Error::Initialization(format!(
            "log posterior is not finite at thetaInit = {:?}",
            opts.theta_init
        )));
    }
    let base_sd: Vec<f64> = opts
        .scales()
        .iter()
        .enumerate()
        .map(|(j, s)| s * opts.sig[(j, j)].sqrt())
        .collect();
    let mut k = vec![1.0f64; p];
    let mut accepted = vec![0usize; p];
    let mut samples = DMatrix::zeros(opts.n_gibbs, p);
    let mut log_post = Vec::with_capacity(opts.n_gibbs);
    let mut k_trace = vec![k.clone()];
    for i in 1..=opts.n_gibbs {
        for j in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let old = x[j];
            x[j] = old + k[j].sqrt() * base_sd[j] * z;
            let prop = eval_target(target, &x)?;
            if accept(cur, prop, u) {
                cur = prop;
                accepted[j] += 1;
            } else {
                x[j] = old;
            }
        }
        samples.row_mut(i - 1).copy_from_slice(&x);
        log_post.push(cur);
        if i % ADAPT_EVERY == 0 {
            for j in 0..p {
                k[j] = adapt(k[j], accepted[j], i, opts.r[0]);
            }
            k_trace.push(k.clone());
        }
    }
    let n = opts.n_gibbs.max(1) as f64;
    Ok(GibbsOutput {
        samples,
        log_post,
        accept_rates: accepted.iter().map(|a| *a as f64 / n).collect(),
        accepted,
        k_trace,
    })
}

/// Empirical covariance of the rows of `samples` (denominator `n − 1`),
/// with the diagonal floored at `1e-12·max(diag)`. The flag reports a
/// degenerate (all-zero) covariance.
pub fn learned_covariance(samples: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let (n, p) = samples.shape();
    if n < 2 {
        return Err(Error::domain(format!("need at least 2 samples for a covariance, got {n}")));
    }
    let mean = samples.row_mean();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut s = centered.tr_mul(&centered) / (n as f64 - 1.0);
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    let max_diag = s.diagonal().max();
    let floor = 1e-12 * max_diag;
    for i in 0..p {
        if s[(i, i)] < floor {
            s[(i, i)] = floor;
        }
    }
    Ok((s, !(max_diag > 0.0)))
}

#[derive(Debug, Clone)]
pub struct MhOutput {
    /// Retained samples after burn-in.
    pub samples: DMatrix<f64>,
    pub log_post: Vec<f64>,
    pub accepted: usize,
    pub accept_rate: f64,
    /// `t` after each adaptation window, first entry is the initial value.
    pub t_trace: Vec<f64>,
}

/// Stage two: joint proposals `N(x, t·cov)`.
pub fn metropolis_hastings<F, R>(
    target: &F,
    start: &[f64],
    cov: &DMatrix<f64>,
    opts: &EstimOptions,
    rng: &mut R,
) -> Result<MhOutput>
where
    F: Fn(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    let p = start.len();
    let chol = cholesky_jittered(cov)?.chol.l();
    let mut x = DVector::from_column_slice(start);
    let mut cur = eval_target(target, start)?;
    if !cur.is_finite() {
        return Err(Error::Initialization(format!(
            "log posterior is not finite at the stage-two start {start:?}"
        )));
    }
    let kept = opts.n_mh - opts.burn_in;
    let mut samples = DMatrix::zeros(kept, p);
    let mut log_post = Vec::with_capacity(kept);
    let mut t = 1.0f64;
    let mut t_trace = vec![t];
    let mut accepted = 0usize;
    for i in 1..=opts.n_mh {
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u: f64 = rng.random();
        let prop = &x + (&chol * z) * t.sqrt();
        let lp = eval_target(target, prop.as_slice())?;
        if accept(cur, lp, u) {
            x = prop;
            cur = lp;
            accepted += 1;
        }
        if i > opts.burn_in {
            samples.row_mut(i - 1 - opts.burn_in).copy_from_slice(x.as_slice());
            log_post.push(cur);
        }
        if i % ADAPT_EVERY == 0 {
            t = adapt(t, accepted, i, opts.r[1]);
            t_trace.push(t);
        }
    }
    Ok(MhOutput {
        samples,
        log_post,
        accepted,
        accept_rate: accepted as f64 / opts.n_mh as f64,
        t_trace,
    })
}

/// Everything one chain produced.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub chain: usize,
    pub gibbs: GibbsOutput,
    pub mh: MhOutput,
    /// Stage-two proposal covariance before the `t` factor.
    pub covariance: DMatrix<f64>,
    pub covariance_degenerate: bool,
}

impl ChainResult {
    pub fn accept_mh(&self) -> f64 {
        self.mh.accept_rate
    }

    /// Mean of the per-coordinate stage-one rates.
    pub fn accept_gibbs_mean(&self) -> f64 {
        let r = &self.gibbs.accept_rates;
        r.iter().sum::<f64>() / r.len() as f64
    }
}

/// Summary stored in run manifests.
#[derive(Debug, Clone, Serialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub accept_gibbs: Vec<f64>,
    pub accept_mh: f64,
    pub covariance_degenerate: bool,
    pub k_final: Vec<f64>,
    pub t_final: f64,
}

impl From<&ChainResult> for ChainSummary {
    fn from(c: &ChainResult) -> Self {
        Self {
            chain: c.chain,
            accept_gibbs: c.gibbs.accept_rates.clone(),
            accept_mh: c.mh.accept_rate,
            covariance_degenerate: c.covariance_degenerate,
            k_final: c.gibbs.k_trace.last().cloned().unwrap_or_default(),
            t_final: c.mh.t_trace.last().copied().unwrap_or(1.0),
        }
    }
}

/// The RNG stream for chain `c` under master seed `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs both stages for a single chain.
pub fn run_chain<F>(target: &F, opts: &EstimOptions, chain: usize) -> Result<ChainResult>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    opts.validate()?;
    let mut rng = chain_rng(opts.seed, chain);
    let gibbs = metropolis_within_gibbs(target, opts, &mut rng)?;
    let (covariance, degenerate) = if opts.n_gibbs >= 2 {
        learned_covariance(&gibbs.samples)?
    } else {
        (DMatrix::zeros(0, 0), true)
    };
    let covariance = if degenerate {
        // Fall back to the adapted stage-one proposal.
        let k = gibbs.k_trace.last().expect("initial k recorded");
        let s = opts.scales();
        DMatrix::from_fn(k.len(), k.len(), |i, j| {
            if i == j {
                k[i] * opts.sig[(i, i)] * s[i] * s[i]
            } else {
                0.0
            }
        })
    } else {
        covariance
    };
    let start: Vec<f64> = if opts.mh_restart_init || opts.n_gibbs == 0 {
        opts.theta_init.clone()
    } else {
        gibbs.samples.row(opts.n_gibbs - 1).iter().copied().collect()
    };
    let mh = metropolis_hastings(target, &start, &covariance, opts, &mut rng)?;
    Ok(ChainResult {
        chain,
        gibbs,
        mh,
        covariance,
        covariance_degenerate: degenerate,
    })
}

/// Runs `opts.n_chains` independent chains in parallel.
pub fn run_chains<F>(target: &F, opts: &EstimOptions) -> Result<Vec<ChainResult>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    opts.validate()?;
    let results: Vec<Result<ChainResult>> = (0..opts.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, opts, c))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(c, r)| {
            r.map_err(|e| match e {
                Error::Initialization(m) => Error::Initialization(format!("chain {c}: {m}")),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal(x: &[f64]) -> Result<f64> {
        Ok(-0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }

    #[test]
    fn acceptance_rule() {
        assert!(accept(0.0, 0.0, 1.0));
        assert!(!accept(0.0, -1e-12, 1.0));
        assert!(accept(0.0, 5.0, 0.5));
        assert!(!accept(0.0, f64::NEG_INFINITY, 0.0));
        assert!(!accept(0.0, f64::NAN, 0.0));
    }

    #[test]
    fn gibbs_on_standard_normal() {
        let mut opts = EstimOptions::new(5000, 1, vec![0.0]);
        opts.r = [0.1, 0.1];
        let mut rng = chain_rng(7, 0);
        let out = metropolis_within_gibbs(&std_normal, &opts, &mut rng).unwrap();
        let s = out.samples.column(0);
        let m = s.mean();
        let v = s.variance();
        assert!(m.abs() < 0.1, "{m}");
        assert!((0.8..=1.2).contains(&v), "{v}");
    }

    #[test]
    fn no_adaptation_keeps_k() {
        let mut opts = EstimOptions::new(1000, 1, vec![0.0, 0.0]);
        opts.r = [0.0, 0.0];
        opts.sig = DMatrix::identity(2, 2) * 100.0;
        let out = metropolis_within_gibbs(&std_normal, &opts, &mut chain_rng(1, 0)).unwrap();
        assert!(out.k_trace.iter().all(|k| k == &vec![1.0, 1.0]));
    }

    #[test]
    fn scales_stay_positive() {
        let mut opts = EstimOptions::new(3000, 3000, vec![0.0]);
        opts.r = [0.9, 0.9];
        opts.sig = DMatrix::from_element(1, 1, 1e4);
        let c = run_chain(&std_normal, &opts, 0).unwrap();
        assert!(c.gibbs.k_trace.iter().flatten().all(|k| *k > 0.0));
        assert!(c.mh.t_trace.iter().all(|t| *t > 0.0));
    }

    #[test]
    fn bad_start() {
        let opts = EstimOptions::new(10, 10, vec![0.0]);
        let target = |_: &[f64]| Ok(f64::NEG_INFINITY);
        assert!(matches!(run_chain(&target, &opts, 0), Err(Error::Initialization(_))));
    }

    #[test]
    fn domain_errors_are_rejections() {
        let opts = EstimOptions::new(200, 200, vec![0.5]);
        let target = |x: &[f64]| {
            if x[0] <= 0.0 {
                Err(Error::domain("negative"))
            } else {
                Ok(-x[0])
            }
        };
        let c = run_chain(&target, &opts, 0).unwrap();
        assert!(c.mh.samples.iter().all(|v| *v > 0.0));
        let fatal = |_: &[f64]| Err::<f64, _>(Error::State("broken".into()));
        assert!(run_chain(&fatal, &opts, 0).is_err());
    }

    #[test]
    fn covariance_examples() {
        let two = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let (s, degenerate) = learned_covariance(&two).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
        assert!(!degenerate);

        let constant = DMatrix::from_element(5, 3, 1.5);
        let (_, degenerate) = learned_covariance(&constant).unwrap();
        assert!(degenerate);

        let mut rng = chain_rng(3, 0);
        let draws = DMatrix::from_fn(10_000, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (s, _) = learned_covariance(&draws).unwrap();
        assert!((s - DMatrix::identity(2, 2)).amax() < 0.1);
        assert!(learned_covariance(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn burn_in_slicing() {
        let mut opts = EstimOptions::new(100, 500, vec![0.0]);
        opts.burn_in = 499;
        let c = run_chain(&std_normal, &opts, 0).unwrap();
        assert_eq!(c.mh.samples.nrows(), 1);
        assert_eq!(c.mh.log_post.len(), 1);
    }

    #[test]
    fn acceptance_counts_match_moves() {
        let mut opts = EstimOptions::new(600, 700, vec![0.3, -0.2]);
        opts.sig = DMatrix::identity(2, 2) * 4.0;
        let c = run_chain(&std_normal, &opts, 0).unwrap();
        let g = &c.gibbs.samples;
        for j in 0..2 {
            let mut moves = usize::from(g[(0, j)] != opts.theta_init[j]);
            moves += (1..g.nrows()).filter(|&i| g[(i, j)] != g[(i - 1, j)]).count();
            assert_eq!(moves, c.gibbs.accepted[j]);
        }
        let m = &c.mh.samples;
        let start = g.row(g.nrows() - 1).into_owned();
        let mut moves = usize::from(m.row(0) != start);
        moves += (1..m.nrows()).filter(|&i| m.row(i) != m.row(i - 1)).count();
        assert_eq!(moves, c.mh.accepted);
    }

    #[test]
    fn correlated_target_acceptance() {
        // 2-d normal with correlation 0.8, proposal covariance = truth.
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]);
        let prec = cov.clone().try_inverse().unwrap();
        let target = move |x: &[f64]| {
            let v = DVector::from_column_slice(x);
            Ok(-0.5 * (v.transpose() * &prec * &v)[(0, 0)])
        };
        let mut opts = EstimOptions::new(0, 5000, vec![0.0, 0.0]);
        opts.burn_in = 1000;
        let out = metropolis_hastings(&target, &[0.0, 0.0], &cov, &opts, &mut chain_rng(2, 0)).unwrap();
        assert!((0.2..=0.55).contains(&out.accept_rate), "{}", out.accept_rate);
    }

    #[test]
    fn chains_are_reproducible() {
        let mut opts = EstimOptions::new(200, 400, vec![0.1, 0.1]);
        opts.n_chains = 3;
        opts.seed = 99;
        let a = run_chains(&std_normal, &opts).unwrap();
        let b = run_chains(&std_normal, &opts).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mh.samples, y.mh.samples);
            assert_eq!(x.gibbs.samples, y.gibbs.samples);
        }
        assert_ne!(a[0].mh.samples, a[1].mh.samples);
        let single = run_chain(&std_normal, &opts, 2).unwrap();
        assert_eq!(single.mh.samples, a[2].mh.samples);
    }

    #[test]
    fn restart_at_init() {
        let mut opts = EstimOptions::new(300, 100, vec![2.0]);
        opts.mh_restart_init = true;
        opts.r = [0.0, 0.0];
        opts.sig = DMatrix::from_element(1, 1, 1e-30);
        // Negligible proposal steps keep the chain at the start point.
        let c = run_chain(&std_normal, &opts, 0).unwrap();
        assert!((c.mh.samples[(0, 0)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn stationary_distribution_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
        let mut opts = EstimOptions::new(0, 1_000_000, vec![0.0]);
        opts.r = [0.0, 0.0];
        let cov = DMatrix::from_element(1, 1, 2.4f64 * 2.4);
        let out = metropolis_hastings(&std_normal, &[0.0], &cov, &opts, &mut chain_rng(5, 0)).unwrap();
        let thinned: Vec<f64> = out.samples.column(0).iter().step_by(10).copied().collect();
        let n = thinned.len() as f64;
        let edges: Vec<f64> = (-9..=9).map(|i| i as f64 * 0.25).collect();
        let nd = Normal::new(0.0, 1.0).unwrap();
        let mut stat = 0.0;
        let mut prev = f64::NEG_INFINITY;
        for e in edges.iter().copied().chain(std::iter::once(f64::INFINITY)) {
            let expected = n * (nd.cdf(e) - nd.cdf(prev));
            let observed = thinned.iter().filter(|v| **v > prev && **v <= e).count() as f64;
            stat += (observed - expected).powi(2) / expected;
            prev = e;
        }
        let df = edges.len() as f64;
        let crit = ChiSquared::new(df).unwrap().inverse_cdf(0.999);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }
}
