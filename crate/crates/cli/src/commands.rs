//! The subcommand workflows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use bayescal::calibration::{calibrate, derive_seed, forecast_at, prior_proposal_scale, CalibrationResult, CvOptions, LEVEL};
use bayescal::code::{ExternalCode, Oscillator, Simulator};
use bayescal::data::{format_float, ObservationSet, Table};
use bayescal::design::{joint_design, DesignOfExperiments};
use bayescal::emulator::{fit_emulator, EmulatorModel, FitOptions};
use bayescal::models::{write_bands_csv, StatModel};
use bayescal::persist::{read_manifest, write_result, RunManifest};
use bayescal::priors::PriorSet;
use bayescal::sampler::EstimOptions;
use bayescal::seqdesign::{sequential_design, SeqDesignOptions};
use nalgebra::{DMatrix, DVector};

use crate::config::{CodeBinding, ProposalScale, RunConfig};
use crate::CliError;

const DOE_SEED: u64 = 101;
const FIT_SEED: u64 = 100;
const CV_SEED: u64 = 102;
const DESIGN_SEED: u64 = 103;

/// A model ready to calibrate.
pub struct Built {
    pub model: StatModel,
    pub priors: PriorSet,
    pub estim: EstimOptions,
    pub code_description: String,
}

fn simulator(binding: &CodeBinding) -> Option<Arc<dyn Simulator>> {
    match binding {
        CodeBinding::Builtin(_) => Some(Arc::new(Oscillator)),
        CodeBinding::Subprocess {
            command,
            input_dim,
            n_params,
            timeout_secs,
        } => {
            let mut code = ExternalCode::new(command.clone(), *input_dim, *n_params).ok()?;
            if let Some(t) = timeout_secs {
                code = code.with_timeout(Duration::from_secs_f64(*t));
            }
            Some(Arc::new(code))
        }
        CodeBinding::Files { .. } => None,
    }
}

fn read_outputs(path: &Path) -> Result<DVector<f64>, CliError> {
    let t = Table::read_csv(path).map_err(CliError::config)?;
    let Some(col) = t.headers.iter().position(|h| h == "y") else {
        return Err(CliError::Config(format!("{}: no y column", path.display())));
    };
    Ok(DVector::from_iterator(t.rows.len(), t.rows.iter().map(|r| r[col])))
}

fn run_code(code: &dyn Simulator, design: &DesignOfExperiments, input_dim: usize) -> Result<DVector<f64>, CliError> {
    let mut y = Vec::with_capacity(design.n());
    for row in design.points.row_iter() {
        let v: Vec<f64> = row.iter().copied().collect();
        y.push(code.eval(&v[..input_dim], &v[input_dim..]).map_err(CliError::runtime)?);
    }
    Ok(DVector::from_vec(y))
}

fn build_emulator(cfg: &RunConfig, data: &ObservationSet, code: Option<&Arc<dyn Simulator>>) -> Result<EmulatorModel, CliError> {
    let d = data.dim();
    let em_cfg = cfg.emulator.clone().unwrap_or_else(|| crate::config::EmulatorConfig {
        kernel: bayescal::kernels::KernelFamily::Matern52,
        doe: None,
        lower: None,
        upper: None,
        n_emul: None,
    });
    let (design, y) = match (&cfg.code, code) {
        (Some(CodeBinding::Files { doe, outputs }), _) => {
            let (design, input_dim) = DesignOfExperiments::read(doe).map_err(CliError::config)?;
            if input_dim != d {
                return Err(CliError::Config(format!(
                    "{}: design has {input_dim} input columns, observations have {d}",
                    doe.display()
                )));
            }
            let y = read_outputs(outputs)?;
            if y.len() != design.n() {
                return Err(CliError::Config(format!(
                    "{} has {} rows but the design has {}",
                    outputs.display(),
                    y.len(),
                    design.n()
                )));
            }
            (design, y)
        }
        (_, Some(code)) => {
            let design = if let Some(doe) = &em_cfg.doe {
                let (design, input_dim) = DesignOfExperiments::read(doe).map_err(CliError::config)?;
                if input_dim != d || design.dim() != d + code.n_params() {
                    return Err(CliError::Config(format!("{}: design columns do not match the code", doe.display())));
                }
                design
            } else {
                let lower = em_cfg.lower.as_deref().unwrap_or_default();
                let upper = em_cfg.upper.as_deref().unwrap_or_default();
                if lower.len() != d + code.n_params() {
                    return Err(CliError::Config(format!(
                        "emulator bounds need {} entries (inputs then parameters), got {}",
                        d + code.n_params(),
                        lower.len()
                    )));
                }
                let xb: Vec<(f64, f64)> = (0..d).map(|k| (lower[k], upper[k])).collect();
                joint_design(&xb, &lower[d..], &upper[d..], em_cfg.n_emul.unwrap_or(10 * lower.len()), derive_seed(cfg.seed, DOE_SEED))
                    .map_err(CliError::config)?
            };
            let y = run_code(code.as_ref(), &design, d)?;
            (design, y)
        }
        _ => return Err(CliError::Config("the emulator needs a live code or precomputed runs".into())),
    };
    let opts = FitOptions::new(em_cfg.kernel).seed(derive_seed(cfg.seed, FIT_SEED));
    fit_emulator(&design, d, &y, &opts).map_err(CliError::runtime)
}

fn describe(cfg: &RunConfig, model: &StatModel) -> String {
    match (&cfg.code, model.emulator()) {
        (Some(CodeBinding::Files { doe, .. }), Some(em)) => {
            format!("emulator of precomputed code runs ({} points from {})", em.design().n(), doe.display())
        }
        (_, Some(em)) => format!(
            "emulator ({} points) of {}",
            em.design().n(),
            model.code().map(|c| c.describe()).unwrap_or_default()
        ),
        (_, None) => model.code().map(|c| c.describe()).unwrap_or_default(),
    }
}

/// Reads the data, fits the emulator when the model needs one and checks
/// priors and sampler options against the parameter layout.
pub fn build(cfg: &RunConfig) -> Result<Built, CliError> {
    let data = ObservationSet::read_csv(&cfg.data).map_err(CliError::config)?;
    let code = cfg.code.as_ref().and_then(simulator);
    if let (Some(CodeBinding::Subprocess { .. }), None) = (&cfg.code, &code) {
        return Err(CliError::Config("subprocess command is empty".into()));
    }
    let disc = cfg.discrepancy.kernel;
    let model = if cfg.model.uses_emulator() {
        let em = build_emulator(cfg, &data, code.as_ref())?;
        StatModel::with_emulator(cfg.model, data, Arc::new(em), code, disc).map_err(CliError::config)?
    } else {
        let code = code.ok_or_else(|| CliError::Config(format!("{} needs a live code", cfg.model.as_str())))?;
        StatModel::with_code(cfg.model, data, code, disc).map_err(CliError::config)?
    };
    let priors = PriorSet::new(cfg.priors.clone(), model.layout()).map_err(CliError::config)?;
    let estim = estim_options(cfg, &priors)?;
    if estim.theta_init.len() != model.layout().total() {
        return Err(CliError::Config(format!(
            "estim.theta_init has {} values; the layout needs {} ({})",
            estim.theta_init.len(),
            model.layout().total(),
            model.layout().names().join(", ")
        )));
    }
    let code_description = describe(cfg, &model);
    Ok(Built {
        model,
        priors,
        estim,
        code_description,
    })
}

fn estim_options(cfg: &RunConfig, priors: &PriorSet) -> Result<EstimOptions, CliError> {
    let e = &cfg.estim;
    let mut o = EstimOptions::new(e.n_gibbs, e.n_mh, e.theta_init.clone());
    o.r = e.r;
    o.sig = cfg.sig_matrix();
    o.n_chains = e.n_chains;
    o.burn_in = e.burn_in;
    o.mh_restart_init = e.mh_restart_init;
    o.seed = cfg.seed;
    o.proposal_scale = match &e.proposal_scale {
        ProposalScale::Named(s) if s == "unit" => None,
        ProposalScale::Named(_) => Some(prior_proposal_scale(priors)),
        ProposalScale::Explicit(v) => Some(v.clone()),
    };
    o.validate().map_err(CliError::config)?;
    Ok(o)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg).map_err(CliError::runtime)?;
    std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn numbers(values: &[f64]) -> String {
    values.iter().map(|v| format_float(*v)).collect::<Vec<_>>().join(" ")
}

/// The textual run summary.
pub fn summary(manifest: &RunManifest, code_description: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Selected model: {}", manifest.model.as_str());
    let _ = writeln!(s, "Code: {code_description}");
    let _ = writeln!(s, "Parameters: {}", manifest.parameters.join(" "));
    let _ = writeln!(s);
    let _ = writeln!(s, "Acceptance rate of the Metropolis within Gibbs algorithm:");
    let _ = writeln!(s, "{}", format_float(manifest.accept_gibbs_mean));
    let _ = writeln!(s);
    let _ = writeln!(s, "Acceptance rate of the Metropolis Hastings algorithm:");
    let _ = writeln!(s, "{}", format_float(manifest.accept_mh_mean));
    let _ = writeln!(s);
    let _ = writeln!(s, "Maximum a posteriori:");
    let _ = writeln!(s, "{}", numbers(&manifest.map));
    let _ = writeln!(s);
    let _ = writeln!(s, "Mean a posteriori:");
    let _ = writeln!(s, "{}", numbers(&manifest.mean));
    if let Some(p) = &manifest.psrf {
        let _ = writeln!(s);
        let _ = writeln!(s, "Potential scale reduction factors:");
        let _ = writeln!(s, "{}", numbers(&p.per_coordinate));
        let _ = writeln!(s, "Multivariate: {}", format_float(p.multivariate));
    }
    s
}

/// Cross-validation block: the first rows, RMSE and cover rate.
pub fn cv_summary(result: &CalibrationResult) -> String {
    let mut s = String::new();
    let Some(cv) = &result.cv else { return s };
    let _ = writeln!(s, "Cross validation:");
    let _ = writeln!(s, " Method: {}", cv.method);
    let _ = writeln!(s, "{:>6} {:>22} {:>22} {:>22}", "index", "predicted", "real", "error");
    for r in cv.rows.iter().take(6) {
        let _ = writeln!(
            s,
            "{:>6} {:>22} {:>22} {:>22}",
            r.index,
            format_float(r.predicted),
            format_float(r.real),
            format_float(r.error)
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "RMSE: {}", format_float(cv.rmse));
    let _ = writeln!(s);
    let _ = writeln!(s, "Cover rate: {}%", format_float(100.0 * cv.cover_rate));
    s
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub result: CalibrationResult,
    pub summary: String,
}

fn run(cfg: &RunConfig, with_cv: bool) -> Result<RunOutput, CliError> {
    let built = build(cfg)?;
    let cv = if with_cv {
        let v = cfg
            .validation
            .as_ref()
            .ok_or_else(|| CliError::Config("validate needs a validation block".into()))?;
        let n = built.model.data().n();
        if v.n_cv > n {
            return Err(CliError::Config(format!("validation n_cv = {} exceeds the {n} observations", v.n_cv)));
        }
        Some(CvOptions {
            n_cv: v.n_cv,
            seed: v.seed.unwrap_or_else(|| derive_seed(cfg.seed, CV_SEED)),
        })
    } else {
        None
    };
    let dir = cfg.output.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    if let Some(v) = &cfg.preview_params {
        let bands = built
            .model
            .predictive_bands(v, LEVEL, cfg.band_select())
            .map_err(CliError::config)?;
        write_bands_csv(&dir.join("preview.csv"), built.model.data().x(), &bands, None).map_err(CliError::runtime)?;
    }
    let result = calibrate(&built.model, &built.priors, &built.estim, cfg.band_select(), cv).map_err(CliError::runtime)?;
    write_result(&dir, &result).map_err(CliError::runtime)?;
    write_config(&dir, cfg)?;
    let manifest = read_manifest(&dir).map_err(CliError::runtime)?;
    let mut text = summary(&manifest, &built.code_description);
    if with_cv {
        text.push('\n');
        text.push_str(&cv_summary(&result));
    }
    Ok(RunOutput {
        dir,
        result,
        summary: text,
    })
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    run(cfg, false)
}

pub fn cmd_validate(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    run(cfg, true)
}

/// Reads a CSV of new inputs with columns `x1..xd`. An empty file means no rows.
pub fn read_inputs(path: &Path, d: usize) -> Result<DMatrix<f64>, CliError> {
    let t = Table::read_csv(path).map_err(CliError::config)?;
    if t.headers.is_empty() {
        return Ok(DMatrix::zeros(0, d));
    }
    let expected: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    if t.headers != expected {
        return Err(CliError::Config(format!(
            "{}: header must be {}",
            path.display(),
            expected.join(",")
        )));
    }
    Ok(t.to_matrix())
}

/// Rebuilds the calibrated model stored in a result directory.
pub fn load_result_model(dir: &Path) -> Result<(StatModel, RunManifest, RunConfig), CliError> {
    let missing = |what: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{}: {what}: {e}", dir.display()));
    let manifest = read_manifest(dir).map_err(|e| missing("manifest", &e))?;
    let cpath = dir.join("config.json");
    let text = std::fs::read_to_string(&cpath).map_err(|e| missing("config.json", &e))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| missing("config.json", &e))?;
    let data = ObservationSet::read_csv(dir.join("observations.csv")).map_err(|e| missing("observations", &e))?;
    let code = cfg.code.as_ref().and_then(simulator);
    let disc = cfg.discrepancy.kernel;
    let model = if cfg.model.uses_emulator() {
        let em = EmulatorModel::load(dir, "emulator").map_err(|e| missing("emulator", &e))?;
        StatModel::with_emulator(cfg.model, data, Arc::new(em), code, disc)
    } else {
        let code = code.ok_or_else(|| CliError::Config("stored configuration has no live code".into()))?;
        StatModel::with_code(cfg.model, data, code, disc)
    }
    .map_err(CliError::config)?;
    Ok((model, manifest, cfg))
}

/// Writes `forecast.csv` with calibration and forecast rows.
pub fn cmd_forecast(result_dir: &Path, inputs: &Path, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let (model, manifest, _) = load_result_model(result_dir)?;
    let x_new = read_inputs(inputs, model.data().dim())?;
    let fc = forecast_at(&model, &manifest.map, manifest.band_select, &x_new).map_err(CliError::runtime)?;
    let dir = out.unwrap_or(result_dir);
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join("forecast.csv");
    write_bands_csv(&path, &fc.x, &fc.bands, Some(&fc.region)).map_err(CliError::runtime)?;
    Ok(path)
}

/// Adds `k` expected-improvement points to the emulator design.
pub fn cmd_design(cfg: &RunConfig, k: usize) -> Result<PathBuf, CliError> {
    if !cfg.model.uses_emulator() {
        return Err(CliError::Config("sequential design requires a surrogate model (model2 or model4)".into()));
    }
    if !cfg.code.as_ref().is_some_and(CodeBinding::is_live) {
        return Err(CliError::Config("sequential design requires a live code binding".into()));
    }
    let built = build(cfg)?;
    let mut opts = SeqDesignOptions::new(k, built.estim.theta_init.clone());
    opts.estim.r = built.estim.r;
    opts.estim.sig = built.estim.sig.clone();
    opts.estim.proposal_scale = built.estim.proposal_scale.clone();
    opts.estim.mh_restart_init = built.estim.mh_restart_init;
    opts.seed = derive_seed(cfg.seed, DESIGN_SEED);
    let res = sequential_design(&built.model, &built.priors, &opts).map_err(CliError::runtime)?;

    let dir = &cfg.output;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let em = res.model.emulator().expect("emulator model");
    let d = em.input_dim();
    em.design().write(&dir.join("doe.csv"), d).map_err(CliError::runtime)?;
    Table::from_matrix(vec!["y".into()], &DMatrix::from_column_slice(em.outputs().len(), 1, em.outputs().as_slice()))
        .write_csv(&dir.join("doe_outputs.csv"))
        .map_err(CliError::runtime)?;
    em.save(dir, "emulator").map_err(CliError::runtime)?;

    let path = dir.join("design_trace.csv");
    let csv_err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let mut header = vec!["step".to_string()];
    header.extend((1..=em.n_params()).map(|j| format!("theta{j}")));
    header.extend(["ei", "ss", "design_rows"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (i, s) in res.trace.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(s.theta.iter().map(|v| format_float(*v)));
        rec.extend([format_float(s.ei), format_float(s.ss), s.design_rows.to_string()]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    println!(
        "Design: {} rows after {} step(s){}",
        em.design().n(),
        res.trace.len(),
        if res.converged { ", converged" } else { "" }
    );
    Ok(dir.clone())
}
