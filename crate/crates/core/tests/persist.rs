use std::sync::Arc;

use bayescal::calibration::{calibrate, forecast, CvOptions};
use bayescal::code::Simulator;
use bayescal::data::ObservationSet;
use bayescal::error::Result;
use bayescal::kernels::KernelFamily;
use bayescal::models::{BandSelect, ModelKind, StatModel};
use bayescal::persist::{chain_path, manifest, read_chain_csv, read_manifest, write_result};
use bayescal::priors::{PriorSet, PriorSpec};
use bayescal::sampler::EstimOptions;
use nalgebra::DMatrix;

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

fn run(n_chains: usize) -> bayescal::calibration::CalibrationResult {
    let x: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
    let y: Vec<f64> = x.iter().map(|x| 2.0 * x + 0.05 * (7.0 * x).sin()).collect();
    let data = ObservationSet::from_1d(&x, &y).unwrap();
    let model = StatModel::with_code(ModelKind::Model1, data, Arc::new(Linear), KernelFamily::Gauss).unwrap();
    let priors = PriorSet::new(
        vec![PriorSpec::gaussian(0.0, 10.0).unwrap(), PriorSpec::gamma(1.0, 0.01).unwrap()],
        model.layout(),
    )
    .unwrap();
    let mut o = EstimOptions::new(200, 800, vec![1.0, 0.01]);
    o.burn_in = 100;
    o.n_chains = n_chains;
    o.seed = 42;
    o.proposal_scale = Some(vec![0.5, 0.005]);
    calibrate(&model, &priors, &o, BandSelect::Err, Some(CvOptions { n_cv: 4, seed: 1 })).unwrap()
}

#[test]
fn result_directory_round_trips() {
    let res = run(3);
    let dir = tempfile::tempdir().unwrap();
    write_result(dir.path(), &res).unwrap();
    for c in &res.chains {
        let (names, samples, lp) = read_chain_csv(&chain_path(dir.path(), c.chain)).unwrap();
        assert_eq!(names, vec!["theta1", "sigma_e2"]);
        assert_eq!(samples, c.mh.samples);
        assert_eq!(lp, c.mh.log_post);
    }
    let m = read_manifest(dir.path()).unwrap();
    assert_eq!(m.map, res.map);
    assert_eq!(m.mean, res.mean);
    assert_eq!(m.accept_mh_mean, res.accept_mh_mean());
    assert_eq!(m.accept_gibbs_mean, res.accept_gibbs_mean());
    assert_eq!(m.psrf.unwrap().per_coordinate, res.psrf.clone().unwrap().per_coordinate);
    assert_eq!(m.cv.unwrap().n_cv, 4);
    for f in ["bands.csv", "cv.csv", "observations.csv", "gibbs_2.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn single_chain_manifest_has_no_psrf() {
    let res = run(1);
    assert!(manifest(&res).psrf.is_none());
    assert_eq!(res.chains[0].mh.samples.nrows(), 700);
}

#[test]
fn forecast_uses_the_map_slope() {
    let res = run(1);
    let x_new = DMatrix::from_column_slice(3, 1, &[2.0, 2.5, 3.0]);
    let f = forecast(&res, &x_new).unwrap();
    assert_eq!(f.region.iter().filter(|r| **r == "forecast").count(), 3);
    for (k, x) in [2.0, 2.5, 3.0].iter().enumerate() {
        assert!((f.bands[0].mean[12 + k] - res.map[0] * x).abs() < 1e-12);
    }
}
