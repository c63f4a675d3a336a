use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use bayescal::code::{oscillator, Oscillator};
use bayescal::data::ObservationSet;
use bayescal::design::joint_design;
use bayescal::emulator::{fit_emulator, EmulatorModel, FitOptions};
use bayescal::kernels::KernelFamily;
use bayescal::models::{normal_quantile, BandKind, BandSelect, ModelKind, StatModel};
use bayescal::priors::{PriorSet, PriorSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const TRUTH: [f64; 5] = [1.0, 0.3, 6.0, 0.05, FRAC_PI_2];

fn noisy_data(n: usize, seed: u64) -> ObservationSet {
    let t: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 / (n - 1) as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = t
        .iter()
        .map(|t| {
            let e: f64 = StandardNormal.sample(&mut rng);
            oscillator(*t, &TRUTH).unwrap() + 1e-2 * e
        })
        .collect();
    ObservationSet::from_1d(&t, &y).unwrap()
}

fn emulator(n: usize, seed: u64) -> EmulatorModel {
    let lo = [0.9, 0.15, 5.8, 48e-3, 1.49];
    let hi = [1.1, 0.45, 6.2, 52e-3, 1.6];
    let doe = joint_design(&[(0.0, 2.0)], &lo, &hi, n, seed).unwrap();
    let y = DVector::from_iterator(n, doe.points.row_iter().map(|r| oscillator(r[0], &[r[1], r[2], r[3], r[4], r[5]]).unwrap()));
    fit_emulator(&doe, 1, &y, &FitOptions::new(KernelFamily::Matern52).seed(seed)).unwrap()
}

fn with_noise(theta: &[f64], extra: &[f64]) -> Vec<f64> {
    theta.iter().chain(extra).copied().collect()
}

fn emulator_gap(data: &ObservationSet, n: usize) -> f64 {
    let m1 = StatModel::with_code(ModelKind::Model1, data.clone(), Arc::new(Oscillator), KernelFamily::Gauss).unwrap();
    let m2 = StatModel::with_emulator(ModelKind::Model2, data.clone(), Arc::new(emulator(n, 1)), None, KernelFamily::Gauss).unwrap();
    let v = with_noise(&TRUTH, &[1e-4]);
    (m1.log_likelihood(&v).unwrap() - m2.log_likelihood(&v).unwrap()).abs()
}

#[test]
fn emulator_log_likelihood_approaches_direct_code() {
    let data = noisy_data(50, 3);
    let gaps: Vec<f64> = [60, 100, 200].iter().map(|n| emulator_gap(&data, *n)).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
}

/// Slow: fits a 400-point emulator.
#[test]
#[ignore]
fn dense_emulator_log_likelihood_matches_direct_code() {
    let gap = emulator_gap(&noisy_data(50, 3), 400);
    assert!(gap < 0.5, "{gap}");
}

#[test]
fn discrepancy_band_has_nominal_marginal_coverage() {
    let data = noisy_data(12, 4);
    let m3 = StatModel::with_code(ModelKind::Model3, data, Arc::new(Oscillator), KernelFamily::Matern52).unwrap();
    let v = with_noise(&TRUTH, &[4e-4, 0.5, 1e-4]);
    let bands = m3.predictive_bands(&v, 0.95, BandSelect::Err).unwrap();
    let (mean, cov) = m3.model_mean_cov(&v).unwrap();
    let l = cov.cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 20_000;
    let mut inside = 0usize;
    for _ in 0..draws {
        let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(&mut rng));
        let y = &mean + &l * z;
        inside += (0..y.len()).filter(|&i| y[i] >= bands[0].lo[i] && y[i] <= bands[0].hi[i]).count();
    }
    let rate = inside as f64 / (draws * mean.len()) as f64;
    assert!((rate - 0.95).abs() < 0.005, "{rate}");
}

#[test]
fn full_model_bands_nest() {
    let data = noisy_data(10, 5);
    let em = Arc::new(emulator(40, 2));
    let m4 = StatModel::with_emulator(ModelKind::Model4, data, em, None, KernelFamily::Gauss).unwrap();
    let v = with_noise(&[1.02, 0.28, 6.1, 0.0505, 1.55], &[1e-3, 0.4, 1e-4]);
    let bands = m4.predictive_bands(&v, 0.95, BandSelect::All).unwrap();
    let get = |k: BandKind| bands.iter().find(|b| b.kind == k).unwrap();
    let (err, gp, total) = (get(BandKind::Err), get(BandKind::Gp), get(BandKind::Total));
    for i in 0..10 {
        for inner in [err, gp] {
            assert!(inner.lo[i] >= total.lo[i] && inner.hi[i] <= total.hi[i]);
        }
    }
    let z = normal_quantile(0.95).unwrap();
    let m = m4.moments_at(m4.data().x(), &v).unwrap();
    let var = m.total_cov().diagonal();
    for i in 0..10 {
        assert!((total.hi[i] - total.mean[i] - z * var[i].sqrt()).abs() < 1e-12);
    }
}

#[test]
fn log_posterior_is_prior_plus_likelihood() {
    let data = noisy_data(15, 6);
    let m3 = StatModel::with_code(ModelKind::Model3, data, Arc::new(Oscillator), KernelFamily::Gauss).unwrap();
    let priors = PriorSet::new(
        vec![
            PriorSpec::gaussian(1.0, 1e-3).unwrap(),
            PriorSpec::gaussian(0.3, 1e-3).unwrap(),
            PriorSpec::gaussian(6.0, 1e-3).unwrap(),
            PriorSpec::gaussian(0.05, 1e-5).unwrap(),
            PriorSpec::gaussian(FRAC_PI_2, 1e-2).unwrap(),
            PriorSpec::gamma(1.0, 1e-3).unwrap(),
            PriorSpec::unif(0.0, 1.0).unwrap(),
            PriorSpec::gamma(1.0, 1e-3).unwrap(),
        ],
        m3.layout(),
    )
    .unwrap();
    let v = with_noise(&[1.01, 0.31, 5.99, 0.0502, 1.56], &[2e-4, 0.3, 1.2e-4]);
    let prior: f64 = priors.priors().iter().zip(&v).map(|(p, x)| p.log_density(*x)).sum();
    let expected = prior + m3.log_likelihood(&v).unwrap();
    assert!((m3.log_posterior(&priors, &v).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn emulator_mean_at_design_rows_reproduces_outputs() {
    let em = emulator(30, 7);
    let (mu, var) = em.predict_marginal(&em.design().points).unwrap();
    let scale = em.outputs().amax();
    for i in 0..30 {
        assert!((mu[i] - em.outputs()[i]).abs() < 1e-3 * scale);
        assert!(var[i] <= 1e-3 * em.variance());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn model_covariances_are_symmetric_psd(
        s2d in 1e-6f64..1e-1,
        psi in 0.05f64..2.0,
        s2e in 1e-6f64..1e-1,
        family in prop::sample::select(KernelFamily::ALL.to_vec()),
    ) {
        let data = noisy_data(9, 9);
        let m3 = StatModel::with_code(ModelKind::Model3, data, Arc::new(Oscillator), family).unwrap();
        let v = with_noise(&TRUTH, &[s2d, psi, s2e]);
        let (_, cov) = m3.model_mean_cov(&v).unwrap();
        prop_assert_eq!(&cov, &cov.transpose());
        let min = cov.clone().symmetric_eigenvalues().min();
        prop_assert!(min >= s2e * (1.0 - 1e-8), "{} < {}", min, s2e);
        let ll = m3.log_likelihood(&v).unwrap();
        prop_assert!(ll.is_finite());
    }

    #[test]
    fn m1_band_width_depends_only_on_noise(s2e in 1e-8f64..1.0) {
        let m1 = StatModel::with_code(ModelKind::Model1, noisy_data(7, 1), Arc::new(Oscillator), KernelFamily::Gauss).unwrap();
        let v = with_noise(&TRUTH, &[s2e]);
        let b = &m1.predictive_bands(&v, 0.9, BandSelect::Err).unwrap()[0];
        let half = normal_quantile(0.9).unwrap() * s2e.sqrt();
        for i in 0..7 {
            prop_assert!((b.hi[i] - b.mean[i] - half).abs() <= 1e-12 * half.max(1.0));
            prop_assert!((b.mean[i] - b.lo[i] - half).abs() <= 1e-12 * half.max(1.0));
        }
        let x = DMatrix::from_column_slice(1, 1, &[0.5]);
        prop_assert!((m1.bands_at(&x, &v, 0.9, BandSelect::Err).unwrap()[0].mean[0] - oscillator(0.5, &TRUTH).unwrap()).abs() < 1e-15);
    }
}
