//! Likelihoods and predictive bands for the four statistical models.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::code::Simulator;
use crate::data::{format_float, split_parameters, ObservationSet, ParameterLayout};
use crate::emulator::EmulatorModel;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::linalg::{iid_normal_log_density, mvn_log_density};
use crate::priors::PriorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Model1,
    Model2,
    Model3,
    Model4,
}

impl ModelKind {
    pub fn uses_emulator(self) -> bool {
        matches!(self, ModelKind::Model2 | ModelKind::Model4)
    }

    pub fn has_discrepancy(self) -> bool {
        matches!(self, ModelKind::Model3 | ModelKind::Model4)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Model1 => "model1",
            ModelKind::Model2 => "model2",
            ModelKind::Model3 => "model3",
            ModelKind::Model4 => "model4",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model1" => Ok(ModelKind::Model1),
            "model2" => Ok(ModelKind::Model2),
            "model3" => Ok(ModelKind::Model3),
            "model4" => Ok(ModelKind::Model4),
            other => Err(Error::domain(format!(
                "unknown model {other:?}; expected model1, model2, model3 or model4"
            ))),
        }
    }
}

/// Which band(s) to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandSelect {
    Err,
    #[serde(rename = "GP", alias = "gp")]
    Gp,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandKind {
    /// Measurement noise plus discrepancy.
    Err,
    /// Emulator uncertainty only.
    Gp,
    /// Every variance component together.
    Total,
}

impl BandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BandKind::Err => "err",
            BandKind::Gp => "GP",
            BandKind::Total => "total",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Band {
    pub kind: BandKind,
    pub mean: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

/// Mean and covariance components of a model at a set of inputs.
#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub gp_cov: Option<DMatrix<f64>>,
    pub discrepancy_cov: Option<DMatrix<f64>>,
    pub noise_var: f64,
}

impl Moments {
    pub fn total_cov(&self) -> DMatrix<f64> {
        let n = self.mean.len();
        let mut c = DMatrix::from_diagonal_element(n, n, self.noise_var);
        if let Some(g) = &self.gp_cov {
            c += g;
        }
        if let Some(d) = &self.discrepancy_cov {
            c += d;
        }
        c
    }
}

/// `z` such that a central normal interval at `level` is `±z·σ`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!("band level must be in (0, 1), got {level}")));
    }
    Ok(Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + 0.5 * level))
}

/// A statistical model bound to its data, simulator or emulator.
#[derive(Debug, Clone)]
pub struct StatModel {
    kind: ModelKind,
    data: ObservationSet,
    code: Option<Arc<dyn Simulator>>,
    emulator: Option<Arc<EmulatorModel>>,
    discrepancy: KernelFamily,
    layout: ParameterLayout,
}

impl StatModel {
    /// Model 1 or 3 on a directly evaluated simulator.
    pub fn with_code(
        kind: ModelKind,
        data: ObservationSet,
        code: Arc<dyn Simulator>,
        discrepancy: KernelFamily,
    ) -> Result<Self> {
        if kind.uses_emulator() {
            return Err(Error::structural(format!("{} needs an emulator, not a code", kind.as_str())));
        }
        if code.input_dim() != data.dim() {
            return Err(Error::structural(format!(
                "code takes {} inputs but observations have {} columns",
                code.input_dim(),
                data.dim()
            )));
        }
        let layout = ParameterLayout::new(code.n_params(), kind.has_discrepancy());
        Ok(Self {
            kind,
            data,
            code: Some(code),
            emulator: None,
            discrepancy,
            layout,
        })
    }

    /// Model 2 or 4 on a fitted emulator. The code, when given, is kept for
    /// design enrichment.
    pub fn with_emulator(
        kind: ModelKind,
        data: ObservationSet,
        emulator: Arc<EmulatorModel>,
        code: Option<Arc<dyn Simulator>>,
        discrepancy: KernelFamily,
    ) -> Result<Self> {
        if !kind.uses_emulator() {
            return Err(Error::structural(format!("{} evaluates the code directly", kind.as_str())));
        }
        if emulator.input_dim() != data.dim() {
            return Err(Error::structural(format!(
                "emulator takes {} inputs but observations have {} columns",
                emulator.input_dim(),
                data.dim()
            )));
        }
        if let Some(c) = &code {
            if c.input_dim() != emulator.input_dim() || c.n_params() != emulator.n_params() {
                return Err(Error::structural("code and emulator dimensions differ"));
            }
        }
        let layout = ParameterLayout::new(emulator.n_params(), kind.has_discrepancy());
        Ok(Self {
            kind,
            data,
            code,
            emulator: Some(emulator),
            discrepancy,
            layout,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn data(&self) -> &ObservationSet {
        &self.data
    }

    pub fn layout(&self) -> ParameterLayout {
        self.layout
    }

    pub fn code(&self) -> Option<&Arc<dyn Simulator>> {
        self.code.as_ref()
    }

    pub fn emulator(&self) -> Option<&Arc<EmulatorModel>> {
        self.emulator.as_ref()
    }

    pub fn discrepancy_family(&self) -> KernelFamily {
        self.discrepancy
    }

    /// Same model on different observations.
    pub fn with_data(&self, data: ObservationSet) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::structural("replacement observations change the input dimension"));
        }
        Ok(Self { data, ..self.clone() })
    }

    /// Same model with a replaced emulator.
    pub fn with_new_emulator(&self, emulator: Arc<EmulatorModel>) -> Result<Self> {
        Self::with_emulator(self.kind, self.data.clone(), emulator, self.code.clone(), self.discrepancy)
    }

    /// Emulator rows `(x_i, θ)` for every row of `x`.
    pub fn joint_rows(x: &DMatrix<f64>, theta: &[f64]) -> DMatrix<f64> {
        let (n, d) = x.shape();
        DMatrix::from_fn(n, d + theta.len(), |i, j| if j < d { x[(i, j)] } else { theta[j - d] })
    }

    /// Model moments at arbitrary inputs `x` for the slot vector `values`.
    pub fn moments_at(&self, x: &DMatrix<f64>, values: &[f64]) -> Result<Moments> {
        let parts = split_parameters(values, self.layout)?;
        if x.ncols() != self.data.dim() {
            return Err(Error::structural("input columns differ from the observations"));
        }
        let (mean, gp_cov) = match (&self.emulator, &self.code) {
            (Some(em), _) if self.kind.uses_emulator() => {
                let (m, c) = em.predict(&Self::joint_rows(x, parts.theta))?;
                (m, Some(c))
            }
            (_, Some(code)) => {
                let mut m = DVector::zeros(x.nrows());
                for i in 0..x.nrows() {
                    let row: Vec<f64> = x.row(i).iter().copied().collect();
                    m[i] = code.eval(&row, parts.theta)?;
                }
                (m, None)
            }
            _ => unreachable!("constructors guarantee a code or an emulator"),
        };
        let discrepancy_cov = match parts.discrepancy {
            Some((s2, psi)) => Some(KernelSpec::isotropic(self.discrepancy, s2, psi)?.covariance_symmetric(x)?),
            None => None,
        };
        Ok(Moments {
            mean,
            gp_cov,
            discrepancy_cov,
            noise_var: parts.noise_var,
        })
    }

    pub fn model_mean_cov(&self, values: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = self.moments_at(self.data.x(), values)?;
        let cov = m.total_cov();
        Ok((m.mean, cov))
    }

    pub fn log_likelihood(&self, values: &[f64]) -> Result<f64> {
        let m = self.moments_at(self.data.x(), values)?;
        if m.gp_cov.is_none() && m.discrepancy_cov.is_none() {
            return Ok(iid_normal_log_density(self.data.y(), &m.mean, m.noise_var));
        }
        mvn_log_density(self.data.y(), &m.mean, &m.total_cov())
    }

    /// Log prior plus log likelihood; the likelihood is skipped when the
    /// prior is zero.
    pub fn log_posterior(&self, priors: &PriorSet, values: &[f64]) -> Result<f64> {
        if priors.layout() != self.layout {
            return Err(Error::structural("prior set layout differs from the model layout"));
        }
        let lp = priors.log_density(values)?;
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        Ok(lp + self.log_likelihood(values)?)
    }

    /// Central bands at inputs `x`.
    pub fn bands_at(&self, x: &DMatrix<f64>, values: &[f64], level: f64, which: BandSelect) -> Result<Vec<Band>> {
        if which != BandSelect::Err && !self.kind.uses_emulator() {
            return Err(Error::Unsupported(format!(
                "the GP band needs an emulator-based model, {} has none",
                self.kind.as_str()
            )));
        }
        let z = normal_quantile(level)?;
        let m = self.moments_at(x, values)?;
        let n = m.mean.len();
        let diag = |c: &Option<DMatrix<f64>>| c.as_ref().map_or(DVector::zeros(n), |c| c.diagonal().map(|v| v.max(0.0)));
        let err_var = diag(&m.discrepancy_cov).add_scalar(m.noise_var);
        let gp_var = diag(&m.gp_cov);
        let band = |kind: BandKind, var: DVector<f64>| {
            let half = var.map(|v| z * v.sqrt());
            Band {
                kind,
                lo: &m.mean - &half,
                hi: &m.mean + &half,
                mean: m.mean.clone(),
            }
        };
        Ok(match which {
            BandSelect::Err => vec![band(BandKind::Err, err_var)],
            BandSelect::Gp => vec![band(BandKind::Gp, gp_var)],
            BandSelect::All => vec![
                band(BandKind::Err, err_var.clone()),
                band(BandKind::Gp, gp_var.clone()),
                band(BandKind::Total, err_var + gp_var),
            ],
        })
    }

    pub fn predictive_bands(&self, values: &[f64], level: f64, which: BandSelect) -> Result<Vec<Band>> {
        self.bands_at(self.data.x(), values, level, which)
    }
}

/// Writes bands as CSV with columns `x1..xd, [region,] mean, lo, hi, band_kind`.
pub fn write_bands_csv(path: &Path, x: &DMatrix<f64>, bands: &[Band], region: Option<&[&str]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let mut header: Vec<String> = (1..=x.ncols()).map(|k| format!("x{k}")).collect();
    if region.is_some() {
        header.push("region".into());
    }
    header.extend(["mean", "lo", "hi", "band_kind"].map(String::from));
    let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for b in bands {
        for i in 0..x.nrows() {
            let mut rec: Vec<String> = x.row(i).iter().map(|v| format_float(*v)).collect();
            if let Some(r) = region {
                rec.push(r[i].to_string());
            }
            rec.push(format_float(b.mean[i]));
            rec.push(format_float(b.lo[i]));
            rec.push(format_float(b.hi[i]));
            rec.push(b.kind.as_str().into());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
