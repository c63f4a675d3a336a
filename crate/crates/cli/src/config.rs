//! The JSON run configuration.
//!
//! Relative paths are resolved against the directory holding the
//! configuration file.

use std::path::{Path, PathBuf};

use bayescal::kernels::KernelFamily;
use bayescal::models::{BandSelect, ModelKind};
use bayescal::priors::PriorSpec;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Observations CSV with columns `x1..xd,y`.
    pub data: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<CodeBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emulator: Option<EmulatorConfig>,
    #[serde(default)]
    pub discrepancy: DiscrepancyConfig,
    pub priors: Vec<PriorSpec>,
    pub estim: EstimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_select: Option<BandSelect>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Parameter values for a band preview before calibration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview_params: Option<Vec<f64>>,
}

fn default_output() -> PathBuf {
    PathBuf::from("bayescal-out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CodeBinding {
    /// A simulator compiled into the binary, by name.
    Builtin(String),
    /// A child process reading `x1..xd θ1..θp` lines on stdin.
    Subprocess {
        command: Vec<String>,
        input_dim: usize,
        n_params: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_secs: Option<f64>,
    },
    /// Precomputed code runs without a live simulator.
    Files { doe: PathBuf, outputs: PathBuf },
}

impl CodeBinding {
    pub fn is_live(&self) -> bool {
        !matches!(self, CodeBinding::Files { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulatorConfig {
    #[serde(default = "default_emulator_kernel")]
    pub kernel: KernelFamily,
    /// A user design run through the live code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doe: Option<PathBuf>,
    /// Joint box, inputs first, for a generated design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    /// Defaults to ten points per dimension of the box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_emul: Option<usize>,
}

fn default_emulator_kernel() -> KernelFamily {
    KernelFamily::Matern52
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscrepancyConfig {
    pub kernel: KernelFamily,
}

impl Default for DiscrepancyConfig {
    fn default() -> Self {
        Self {
            kernel: KernelFamily::Gauss,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimConfig {
    pub n_gibbs: usize,
    pub n_mh: usize,
    pub theta_init: Vec<f64>,
    #[serde(default = "default_r")]
    pub r: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sig: Option<Vec<Vec<f64>>>,
    #[serde(default = "one")]
    pub n_chains: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default)]
    pub proposal_scale: ProposalScale,
    #[serde(default)]
    pub mh_restart_init: bool,
}

fn default_r() -> [f64; 2] {
    [0.1, 0.1]
}

fn one() -> usize {
    1
}

/// Per-coordinate proposal multipliers: `"prior"` (prior standard
/// deviations), `"unit"` (none) or explicit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProposalScale {
    Named(String),
    Explicit(Vec<f64>),
}

impl Default for ProposalScale {
    fn default() -> Self {
        ProposalScale::Named("prior".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    #[serde(default = "default_method")]
    pub method: String,
    pub n_cv: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_method() -> String {
    "loo".into()
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.check()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data);
        fix(&mut self.output);
        if let Some(CodeBinding::Files { doe, outputs }) = &mut self.code {
            fix(doe);
            fix(outputs);
        }
        if let Some(doe) = self.emulator.as_mut().and_then(|e| e.doe.as_mut()) {
            fix(doe);
        }
    }

    /// Checks that the code binding matches the model kind.
    pub fn check(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let kind = self.model.as_str();
        match (&self.code, self.model.uses_emulator()) {
            (None, _) => return bad(format!("{kind} needs a code binding")),
            (Some(CodeBinding::Files { .. }), false) => {
                return bad(format!("{kind} evaluates the code directly; a builtin or subprocess code is required"))
            }
            (Some(_), false) if self.emulator.is_some() => {
                return bad(format!("{kind} does not use an emulator; remove the emulator block"))
            }
            (Some(_), false) => {}
            (Some(CodeBinding::Files { .. }), true) => {
                if let Some(e) = &self.emulator {
                    if e.doe.is_some() || e.lower.is_some() || e.upper.is_some() || e.n_emul.is_some() {
                        return bad("precomputed code runs already fix the design; the emulator block takes only a kernel".into());
                    }
                }
            }
            (Some(_), true) => {
                let Some(e) = &self.emulator else {
                    return bad(format!("{kind} with a live code needs an emulator block"));
                };
                match (&e.doe, &e.lower, &e.upper, e.n_emul) {
                    (Some(_), None, None, None) => {}
                    (None, Some(l), Some(u), n) => {
                        if l.len() != u.len() {
                            return bad("emulator lower and upper bounds differ in length".into());
                        }
                        if n.is_some_and(|n| n < 2) {
                            return bad("emulator n_emul must be at least 2".into());
                        }
                    }
                    _ => return bad("emulator needs either doe, or lower and upper bounds".into()),
                }
            }
        }
        if let Some(CodeBinding::Builtin(name)) = &self.code {
            if name != "oscillator" {
                return bad(format!("unknown builtin code {name:?} (available: oscillator)"));
            }
        }
        if let ProposalScale::Named(s) = &self.estim.proposal_scale {
            if s != "prior" && s != "unit" {
                return bad(format!("proposal_scale must be \"prior\", \"unit\" or a list, not {s:?}"));
            }
        }
        if let Some(v) = &self.validation {
            if v.method != "loo" {
                return bad(format!("validation method {:?} is not supported (use \"loo\")", v.method));
            }
            if v.n_cv == 0 {
                return bad("validation n_cv must be positive".into());
            }
        }
        if let Some(sig) = &self.estim.sig {
            let p = self.estim.theta_init.len();
            if sig.len() != p || sig.iter().any(|r| r.len() != p) {
                return bad(format!("estim.sig must be {p}×{p}"));
            }
        }
        Ok(())
    }

    pub fn sig_matrix(&self) -> DMatrix<f64> {
        let p = self.estim.theta_init.len();
        match &self.estim.sig {
            Some(rows) => DMatrix::from_fn(p, p, |i, j| rows[i][j]),
            None => DMatrix::identity(p, p),
        }
    }

    pub fn band_select(&self) -> BandSelect {
        self.band_select.unwrap_or(if self.model.uses_emulator() {
            BandSelect::All
        } else {
            BandSelect::Err
        })
    }
}
