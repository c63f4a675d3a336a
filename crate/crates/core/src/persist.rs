//! On-disk layout of a calibration run.
//!
//! ```text
//! <dir>/manifest.json     options, seeds, estimators, acceptance rates, PSRF
//! <dir>/chain_<c>.csv     retained stage-two samples with log_post
//! <dir>/gibbs_<c>.csv     stage-one samples with log_post
//! <dir>/bands.csv         predictive bands at the MAP
//! <dir>/cv.csv            leave-one-out rows, when requested
//! <dir>/observations.csv  the data the run used
//! <dir>/emulator.{json,csv}  emulator-based models only
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationResult, CvReport};
use crate::data::{format_float, Table};
use crate::diagnostics::Psrf;
use crate::error::{Error, Result};
use crate::models::{write_bands_csv, BandSelect, ModelKind};
use crate::priors::PriorSpec;
use crate::sampler::ChainSummary;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimSummary {
    pub n_gibbs: usize,
    pub n_mh: usize,
    pub burn_in: usize,
    pub n_chains: usize,
    pub theta_init: Vec<f64>,
    pub r: [f64; 2],
    pub sig: Vec<Vec<f64>>,
    pub proposal_scale: Option<Vec<f64>>,
    pub mh_restart_init: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvSummary {
    pub method: String,
    pub n_cv: usize,
    pub rmse: f64,
    pub cover_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsrfSummary {
    pub per_coordinate: Vec<f64>,
    pub multivariate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelKind,
    pub parameters: Vec<String>,
    pub priors: Vec<PriorSpec>,
    pub options: EstimSummary,
    pub map: Vec<f64>,
    pub map_log_post: f64,
    pub mean: Vec<f64>,
    /// Per chain and coordinate.
    pub accept_gibbs: Vec<Vec<f64>>,
    pub accept_mh: Vec<f64>,
    /// Means over chains (and coordinates for stage one).
    pub accept_gibbs_mean: f64,
    pub accept_mh_mean: f64,
    pub k_final: Vec<Vec<f64>>,
    pub t_final: Vec<f64>,
    pub covariance_degenerate: Vec<bool>,
    pub band_select: BandSelect,
    pub psrf: Option<PsrfSummary>,
    pub cv: Option<CvSummary>,
}

impl From<&Psrf> for PsrfSummary {
    fn from(p: &Psrf) -> Self {
        Self {
            per_coordinate: p.per_coordinate.clone(),
            multivariate: p.multivariate,
        }
    }
}

pub fn chain_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("chain_{chain}.csv"))
}

pub fn gibbs_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("gibbs_{chain}.csv"))
}

/// Writes samples as CSV with parameter columns and a final `log_post`.
pub fn write_chain_csv(path: &Path, names: &[String], samples: &DMatrix<f64>, log_post: &[f64]) -> Result<()> {
    let mut headers = names.to_vec();
    headers.push("log_post".into());
    let mut m = samples.clone().insert_column(samples.ncols(), 0.0);
    for (i, lp) in log_post.iter().enumerate() {
        m[(i, samples.ncols())] = *lp;
    }
    Table::from_matrix(headers, &m).write_csv(path)
}

/// Reads a chain CSV back as `(names, samples, log_post)`.
pub fn read_chain_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>, Vec<f64>)> {
    let t = Table::read_csv(path)?;
    let Some(last) = t.headers.last() else {
        return Err(Error::structural(format!("{}: empty header", path.display())));
    };
    if last != "log_post" {
        return Err(Error::structural(format!("{}: last column must be log_post", path.display())));
    }
    let m = t.to_matrix();
    let p = m.ncols() - 1;
    let names = t.headers[..p].to_vec();
    let log_post = m.column(p).iter().copied().collect();
    Ok((names, m.columns(0, p).into_owned(), log_post))
}

pub fn write_cv_csv(path: &Path, cv: &CvReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    w.write_record(["index", "predicted", "real", "error", "lo", "hi", "covered"])
        .map_err(csv_err)?;
    for r in &cv.rows {
        w.write_record([
            r.index.to_string(),
            format_float(r.predicted),
            format_float(r.real),
            format_float(r.error),
            format_float(r.lo),
            format_float(r.hi),
            r.covered().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn manifest(result: &CalibrationResult) -> RunManifest {
    let o = &result.opts;
    let summaries: Vec<ChainSummary> = result.chains.iter().map(ChainSummary::from).collect();
    RunManifest {
        model: result.model.kind(),
        parameters: result.model.layout().names(),
        priors: result.priors.priors().to_vec(),
        options: EstimSummary {
            n_gibbs: o.n_gibbs,
            n_mh: o.n_mh,
            burn_in: o.burn_in,
            n_chains: o.n_chains,
            theta_init: o.theta_init.clone(),
            r: o.r,
            sig: o.sig.row_iter().map(|r| r.iter().copied().collect()).collect(),
            proposal_scale: o.proposal_scale.clone(),
            mh_restart_init: o.mh_restart_init,
            seed: o.seed,
        },
        map: result.map.clone(),
        map_log_post: result.map_log_post,
        mean: result.mean.clone(),
        accept_gibbs: summaries.iter().map(|s| s.accept_gibbs.clone()).collect(),
        accept_mh: summaries.iter().map(|s| s.accept_mh).collect(),
        accept_gibbs_mean: result.accept_gibbs_mean(),
        accept_mh_mean: result.accept_mh_mean(),
        k_final: summaries.iter().map(|s| s.k_final.clone()).collect(),
        t_final: summaries.iter().map(|s| s.t_final).collect(),
        covariance_degenerate: summaries.iter().map(|s| s.covariance_degenerate).collect(),
        band_select: result.band_select,
        psrf: result.psrf.as_ref().map(PsrfSummary::from),
        cv: result.cv.as_ref().map(|c| CvSummary {
            method: c.method.into(),
            n_cv: c.rows.len(),
            rmse: c.rmse,
            cover_rate: c.cover_rate,
        }),
    }
}

/// Writes the full result directory, creating it when needed.
pub fn write_result(dir: &Path, result: &CalibrationResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = result.model.layout().names();
    for c in &result.chains {
        write_chain_csv(&chain_path(dir, c.chain), &names, &c.mh.samples, &c.mh.log_post)?;
        write_chain_csv(&gibbs_path(dir, c.chain), &names, &c.gibbs.samples, &c.gibbs.log_post)?;
    }
    write_bands_csv(&dir.join("bands.csv"), result.model.data().x(), &result.bands, None)?;
    if let Some(cv) = &result.cv {
        write_cv_csv(&dir.join("cv.csv"), cv)?;
    }
    result.model.data().write_csv(dir.join("observations.csv"))?;
    if let Some(em) = result.model.emulator() {
        em.save(dir, "emulator")?;
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest(result))?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
