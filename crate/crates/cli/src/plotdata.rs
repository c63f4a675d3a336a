//! Plot-ready CSV exports of a result directory.
//!
//! - `acf.csv`: chain, lag, one column per parameter
//! - `trace.csv`: stage, chain, iteration, parameters, log_post
//! - `density.csv`: parameter, x, prior, posterior on a 512-point grid
//! - `pairs.csv`: pooled samples thinned to at most 2000 rows
//! - `out.csv`: bands joined with the observations

use std::path::{Path, PathBuf};

use bayescal::data::{format_float, ObservationSet, Table};
use bayescal::diagnostics::autocorrelation;
use bayescal::persist::{chain_path, gibbs_path, read_chain_csv, read_manifest};
use bayescal::priors::PriorSpec;
use nalgebra::DMatrix;

use crate::CliError;

pub const MAX_LAG: usize = 40;
pub const GRID: usize = 512;
pub const MAX_PAIRS: usize = 2000;

/// Silverman's rule `0.9·min(sd, IQR/1.34)·n^(-1/5)`, falling back to the
/// standard deviation and then to a scale of the values when both vanish.
pub fn silverman_bandwidth(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-3 * mean.abs().max(1e-3)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Gaussian kernel density estimate at `at`.
pub fn kde(samples: &[f64], h: f64, at: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    norm * samples.iter().map(|s| (-0.5 * ((at - s) / h).powi(2)).exp()).sum::<f64>()
}

/// A grid covering the samples with five bandwidths of margin.
pub fn density_grid(samples: &[f64], h: f64) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 5.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 5.0 * h;
    (0..GRID).map(|i| lo + (hi - lo) * i as f64 / (GRID - 1) as f64).collect()
}

fn write(table: Table, path: PathBuf) -> Result<(), CliError> {
    table.write_csv(&path).map_err(CliError::runtime)
}

fn read_bands(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((headers, rows))
}

/// Writes every plot-data file into `out` (default: the result directory).
pub fn cmd_plotdata(dir: &Path, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let manifest = read_manifest(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let out = out.unwrap_or(dir).to_path_buf();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let names = manifest.parameters.clone();
    let p = names.len();

    let mut chains = Vec::new();
    let mut gibbs = Vec::new();
    for c in 0..manifest.options.n_chains {
        let read = |path: PathBuf| read_chain_csv(&path).map_err(|e| CliError::Config(format!("missing chain: {e}")));
        chains.push(read(chain_path(dir, c))?);
        gibbs.push(read(gibbs_path(dir, c))?);
    }
    if chains.is_empty() {
        return Err(CliError::Config(format!("{}: no chains", dir.display())));
    }

    // Autocorrelation of the retained samples.
    let mut headers = vec!["chain".to_string(), "lag".to_string()];
    headers.extend(names.iter().cloned());
    let mut rows = Vec::new();
    for (c, (_, s, _)) in chains.iter().enumerate() {
        let lags = MAX_LAG.min(s.nrows().saturating_sub(1));
        let acfs = (0..p)
            .map(|j| autocorrelation(s.column(j).as_slice(), lags).map(|a| a.0))
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::runtime)?;
        for lag in 0..=lags {
            let mut r = vec![c as f64, lag as f64];
            r.extend(acfs.iter().map(|a| a[lag]));
            rows.push(r);
        }
    }
    write(Table { headers, rows }, out.join("acf.csv"))?;

    // Traces of both stages.
    let mut w = csv::Writer::from_path(out.join("trace.csv")).map_err(CliError::runtime)?;
    let mut header = vec!["stage".to_string(), "chain".into(), "iteration".into()];
    header.extend(names.iter().cloned());
    header.push("log_post".into());
    w.write_record(&header).map_err(CliError::runtime)?;
    for (stage, set) in [("gibbs", &gibbs), ("mh", &chains)] {
        for (c, (_, s, lp)) in set.iter().enumerate() {
            for i in 0..s.nrows() {
                let mut rec = vec![stage.to_string(), c.to_string(), i.to_string()];
                rec.extend(s.row(i).iter().map(|v| format_float(*v)));
                rec.push(format_float(lp[i]));
                w.write_record(&rec).map_err(CliError::runtime)?;
            }
        }
    }
    w.flush().map_err(CliError::runtime)?;

    // Pooled posterior.
    let total: usize = chains.iter().map(|c| c.1.nrows()).sum();
    let mut pooled = DMatrix::zeros(total, p);
    let mut at = 0;
    for (_, s, _) in &chains {
        pooled.rows_mut(at, s.nrows()).copy_from(s);
        at += s.nrows();
    }

    let mut w = csv::Writer::from_path(out.join("density.csv")).map_err(CliError::runtime)?;
    w.write_record(["parameter", "x", "prior", "posterior"]).map_err(CliError::runtime)?;
    for (j, name) in names.iter().enumerate() {
        let col: Vec<f64> = pooled.column(j).iter().copied().collect();
        let h = silverman_bandwidth(&col);
        let prior: &PriorSpec = &manifest.priors[j];
        for x in density_grid(&col, h) {
            w.write_record([
                name.clone(),
                format_float(x),
                format_float(prior.log_density(x).exp()),
                format_float(kde(&col, h, x)),
            ])
            .map_err(CliError::runtime)?;
        }
    }
    w.flush().map_err(CliError::runtime)?;

    let thin = total.div_ceil(MAX_PAIRS).max(1);
    let rows = pooled
        .row_iter()
        .step_by(thin)
        .map(|r| r.iter().copied().collect())
        .collect();
    write(
        Table {
            headers: names.clone(),
            rows,
        },
        out.join("pairs.csv"),
    )?;

    // Bands joined with observations by row position within each band kind.
    let obs = ObservationSet::read_csv(dir.join("observations.csv")).map_err(CliError::config)?;
    let (bh, brows) = read_bands(&dir.join("bands.csv"))?;
    let d = obs.dim();
    let mut w = csv::Writer::from_path(out.join("out.csv")).map_err(CliError::runtime)?;
    let mut header: Vec<String> = bh[..d].to_vec();
    header.push("y".into());
    header.extend(bh[d..].iter().cloned());
    w.write_record(&header).map_err(CliError::runtime)?;
    for (k, row) in brows.iter().enumerate() {
        let i = k % obs.n();
        let mut rec = row[..d].to_vec();
        rec.push(format_float(obs.y()[i]));
        rec.extend(row[d..].iter().cloned());
        w.write_record(&rec).map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
        x.windows(2).zip(f.windows(2)).map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1])).sum()
    }

    #[test]
    fn silverman_on_known_sample() {
        // Sample variance 2.5; IQR 2 by linear interpolation.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let sd = 2.5f64.sqrt();
        let iqr = 2.0;
        let expected = 0.9 * sd.min(iqr / 1.34) * 5f64.powf(-0.2);
        assert!((silverman_bandwidth(&x) - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_sample_gets_positive_bandwidth() {
        assert!(silverman_bandwidth(&[2.0; 10]) > 0.0);
    }

    #[test]
    fn kde_integrates_to_one() {
        let x: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        let h = silverman_bandwidth(&x);
        let g = density_grid(&x, h);
        let f: Vec<f64> = g.iter().map(|v| kde(&x, h, *v)).collect();
        assert!((trapezoid(&g, &f) - 1.0).abs() < 1e-3);
    }
}
