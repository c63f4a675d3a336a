//! Space-filling designs of experiments.
//!
//! Designs are generated as Latin hypercubes in the unit cube, improved for
//! the maximin criterion by greedy within-column swaps, then mapped
//! affinely onto the requested bounds.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Table;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Generated,
    UserSupplied,
}

/// Design points in original units with the box they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignOfExperiments {
    pub points: DMatrix<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct DesignManifest {
    provenance: Provenance,
    lower: Vec<f64>,
    upper: Vec<f64>,
    input_dim: usize,
    n_params: usize,
}

impl DesignOfExperiments {
    pub fn new(
        points: DMatrix<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        check_bounds(&lower, &upper)?;
        if points.ncols() != lower.len() {
            return Err(Error::structural(format!(
                "design has {} columns but bounds have {}",
                points.ncols(),
                lower.len()
            )));
        }
        for (i, row) in points.row_iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                if !(*v >= lower[k] && *v <= upper[k]) {
                    return Err(Error::domain(format!(
                        "design point {i} column {k} = {v} lies outside [{}, {}]",
                        lower[k], upper[k]
                    )));
                }
            }
        }
        Ok(Self {
            points,
            lower,
            upper,
            provenance,
        })
    }

    /// Wraps user points, taking the bounding box from the data (columns of
    /// zero width get a unit-width box centred on the value).
    pub fn from_points(points: DMatrix<f64>) -> Result<Self> {
        let (lower, upper) = bounding_box(&points);
        Self::new(points, lower, upper, Provenance::UserSupplied)
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn headers(input_dim: usize, n_params: usize) -> Vec<String> {
        (1..=input_dim)
            .map(|k| format!("x{k}"))
            .chain((1..=n_params).map(|k| format!("theta{k}")))
            .collect()
    }

    /// Writes `x1..xd,theta1..thetap` CSV plus a `<path>.json` manifest.
    pub fn write(&self, path: &Path, input_dim: usize) -> Result<()> {
        if input_dim > self.dim() {
            return Err(Error::structural("input dimension exceeds design width"));
        }
        let n_params = self.dim() - input_dim;
        Table::from_matrix(Self::headers(input_dim, n_params), &self.points).write_csv(path)?;
        let manifest = DesignManifest {
            provenance: self.provenance,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            input_dim,
            n_params,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        let mpath = manifest_path(path);
        std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
    }

    /// Reads a design CSV; the sidecar manifest is used when present.
    pub fn read(path: &Path) -> Result<(Self, usize)> {
        let table = Table::read_csv(path)?;
        let input_dim = table.headers.iter().filter(|h| h.starts_with('x')).count();
        let points = table.to_matrix();
        let mpath = manifest_path(path);
        if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let m: DesignManifest = serde_json::from_str(&text)?;
            Ok((Self::new(points, m.lower, m.upper, m.provenance)?, m.input_dim))
        } else {
            Ok((Self::from_points(points)?, input_dim))
        }
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub(crate) fn bounding_box(points: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut lower = Vec::with_capacity(points.ncols());
    let mut upper = Vec::with_capacity(points.ncols());
    for col in points.column_iter() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            lower.push(lo);
            upper.push(hi);
        } else {
            lower.push(lo - 0.5);
            upper.push(hi + 0.5);
        }
    }
    (lower, upper)
}

fn check_bounds(lower: &[f64], upper: &[f64]) -> Result<()> {
    if lower.len() != upper.len() {
        return Err(Error::structural("lower and upper bounds differ in length"));
    }
    for (k, (lo, hi)) in lower.iter().zip(upper).enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::domain(format!(
                "bound {k}: lower {lo} must be finite and below upper {hi}"
            )));
        }
    }
    Ok(())
}

/// A maximin-improved Latin hypercube together with its starting point.
#[derive(Debug, Clone)]
pub struct MaximinLhs {
    /// Optimized unit-cube design.
    pub design: DMatrix<f64>,
    /// Random Latin hypercube the optimization started from.
    pub initial: DMatrix<f64>,
    pub min_distance: f64,
    pub initial_min_distance: f64,
}

/// Default swap budget: `10·n·q`.
pub fn default_iterations(n: usize, q: usize) -> usize {
    10 * n * q
}

/// Random Latin hypercube: column `k` places exactly one point in each
/// stratum `[(s−1)/n, s/n)`.
pub fn random_lhs<R: Rng>(n: usize, q: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, q);
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..q {
        perm.shuffle(rng);
        for i in 0..n {
            let u: f64 = rng.random();
            // Guard against (s + u)/n rounding up to the next stratum.
            let v = ((perm[i] as f64 + u) / n as f64).min((perm[i] as f64 + 1.0) / n as f64 - f64::EPSILON);
            m[(i, k)] = v.max(perm[i] as f64 / n as f64);
        }
    }
    m
}

fn pairwise_sq_distances(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut d = DMatrix::from_element(n, n, f64::INFINITY);
    for i in 0..n {
        for j in 0..i {
            let v = sq_dist(m, i, j);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

#[inline]
fn sq_dist(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..m.ncols()).map(|k| (m[(i, k)] - m[(j, k)]).powi(2)).sum()
}

/// Smallest Euclidean distance between two rows.
pub fn min_pairwise_distance(m: &DMatrix<f64>) -> f64 {
    pairwise_sq_distances(m).min().sqrt()
}

/// Latin hypercube improved for the maximin criterion.
///
/// Each iteration swaps the entries of two random rows within one random
/// column (which keeps every column a permutation of its strata) and keeps
/// the swap when the minimal pairwise distance does not decrease.
pub fn lhs_maximin(n: usize, q: usize, seed: u64, iterations: usize) -> Result<MaximinLhs> {
    if n < 2 {
        return Err(Error::domain(format!("a design needs at least 2 points, got {n}")));
    }
    if q < 1 {
        return Err(Error::domain("a design needs at least one dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = random_lhs(n, q, &mut rng);
    let mut design = initial.clone();
    let mut dist = pairwise_sq_distances(&design);
    let initial_min = dist.min();
    let mut current_min = initial_min;
    let mut row_i = vec![0.0; n];
    let mut row_j = vec![0.0; n];

    for _ in 0..iterations {
        let k = rng.random_range(0..q);
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        design.swap((i, k), (j, k));
        for r in 0..n {
            row_i[r] = if r == i { f64::INFINITY } else { sq_dist(&design, i, r) };
            row_j[r] = if r == j { f64::INFINITY } else { sq_dist(&design, j, r) };
        }
        // Minimum over pairs not touching i or j, plus the two updated rows.
        let mut candidate = f64::INFINITY;
        for a in 0..n {
            if a == i || a == j {
                continue;
            }
            for b in 0..a {
                if b != i && b != j {
                    candidate = candidate.min(dist[(a, b)]);
                }
            }
        }
        candidate = candidate
            .min(row_i.iter().copied().fold(f64::INFINITY, f64::min))
            .min(row_j.iter().copied().fold(f64::INFINITY, f64::min));

        if candidate >= current_min {
            current_min = candidate;
            for r in 0..n {
                dist[(i, r)] = row_i[r];
                dist[(r, i)] = row_i[r];
                dist[(j, r)] = row_j[r];
                dist[(r, j)] = row_j[r];
            }
        } else {
            design.swap((i, k), (j, k));
        }
    }

    Ok(MaximinLhs {
        design,
        initial,
        min_distance: current_min.sqrt(),
        initial_min_distance: initial_min.sqrt(),
    })
}

/// Maps unit-cube points column-wise onto `[lower, upper]`.
pub fn unscale(unit: &DMatrix<f64>, lower: &[f64], upper: &[f64]) -> Result<DMatrix<f64>> {
    check_bounds(lower, upper)?;
    if unit.ncols() != lower.len() {
        return Err(Error::structural(format!(
            "design has {} columns but bounds have {}",
            unit.ncols(),
            lower.len()
        )));
    }
    if let Some(v) = unit.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::domain(format!("unit-cube design entry {v} outside [0, 1]")));
    }
    Ok(DMatrix::from_fn(unit.nrows(), unit.ncols(), |i, k| {
        let u = unit[(i, k)];
        if u == 1.0 {
            upper[k]
        } else {
            lower[k] + u * (upper[k] - lower[k])
        }
    }))
}

/// Inverse of [`unscale`].
pub fn rescale(points: &DMatrix<f64>, lower: &[f64], upper: &[f64]) -> Result<DMatrix<f64>> {
    check_bounds(lower, upper)?;
    if points.ncols() != lower.len() {
        return Err(Error::structural("design and bounds differ in width"));
    }
    Ok(DMatrix::from_fn(points.nrows(), points.ncols(), |i, k| {
        (points[(i, k)] - lower[k]) / (upper[k] - lower[k])
    }))
}

/// Maximin LHS over the joint input × parameter box, inputs first.
pub fn joint_design(
    x_bounds: &[(f64, f64)],
    theta_lower: &[f64],
    theta_upper: &[f64],
    n: usize,
    seed: u64,
) -> Result<DesignOfExperiments> {
    if theta_lower.len() != theta_upper.len() {
        return Err(Error::structural("parameter bounds differ in length"));
    }
    let lower: Vec<f64> = x_bounds.iter().map(|b| b.0).chain(theta_lower.iter().copied()).collect();
    let upper: Vec<f64> = x_bounds.iter().map(|b| b.1).chain(theta_upper.iter().copied()).collect();
    check_bounds(&lower, &upper)?;
    let q = lower.len();
    let lhs = lhs_maximin(n, q, seed, default_iterations(n, q))?;
    let points = unscale(&lhs.design, &lower, &upper)?;
    DesignOfExperiments::new(points, lower, upper, Provenance::Generated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_latin(m: &DMatrix<f64>) {
        let n = m.nrows();
        for col in m.column_iter() {
            let mut strata: Vec<usize> = col.iter().map(|v| (v * n as f64).floor() as usize).collect();
            strata.sort_unstable();
            assert_eq!(strata, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn two_points_one_dim() {
        let lhs = lhs_maximin(2, 1, 7, 20).unwrap();
        let mut v: Vec<f64> = lhs.design.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        assert!(v[0] >= 0.0 && v[0] < 0.5);
        assert!(v[1] >= 0.5 && v[1] < 1.0);
    }

    #[test]
    fn deciles_filled() {
        let lhs = lhs_maximin(10, 3, 11, default_iterations(10, 3)).unwrap();
        assert_latin(&lhs.design);
    }

    #[test]
    fn maximin_does_not_regress() {
        let lhs = lhs_maximin(5, 2, 3, default_iterations(5, 2)).unwrap();
        assert_eq!(lhs.initial_min_distance, min_pairwise_distance(&lhs.initial));
        assert!(lhs.min_distance >= lhs.initial_min_distance);
        assert!((lhs.min_distance - min_pairwise_distance(&lhs.design)).abs() < 1e-15);
    }

    #[test]
    fn too_few_points() {
        assert!(lhs_maximin(1, 2, 0, 10).unwrap_err().is_domain());
    }

    #[test]
    fn unscale_corners_and_midpoint() {
        let u = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 0.5]);
        let m = unscale(&u, &[0.9], &[1.1]).unwrap();
        assert_eq!(m[(0, 0)], 0.9);
        assert_eq!(m[(1, 0)], 1.1);
        assert!((m[(2, 0)] - 1.0).abs() < 1e-15);
        assert!(unscale(&DMatrix::from_element(1, 1, 1.5), &[0.0], &[1.0]).is_err());
        assert!(unscale(&u, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn oscillator_joint_design() {
        let binf = [0.9, 0.15, 5.8, 48e-3, 1.49];
        let bsup = [1.1, 0.45, 6.2, 52e-3, 1.6];
        let doe = joint_design(&[(0.0, 2.0)], &binf, &bsup, 60, 1).unwrap();
        assert_eq!((doe.n(), doe.dim()), (60, 6));
        for row in doe.points.row_iter() {
            assert!(row[0] >= 0.0 && row[0] <= 2.0);
            for k in 0..5 {
                assert!(row[k + 1] >= binf[k] && row[k + 1] <= bsup[k]);
            }
        }
    }

    #[test]
    fn unit_box_joint_design_is_plain_lhs() {
        let doe = joint_design(&[(0.0, 1.0)], &[0.0], &[1.0], 2, 5).unwrap();
        let lhs = lhs_maximin(2, 2, 5, default_iterations(2, 2)).unwrap();
        assert_eq!(doe.points, lhs.design);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = lhs_maximin(12, 4, 99, 500).unwrap();
        let b = lhs_maximin(12, 4, 99, 500).unwrap();
        assert_eq!(a.design, b.design);
    }

    #[test]
    fn csv_round_trip_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doe.csv");
        let doe = joint_design(&[(0.0, 2.0)], &[1.0, 2.0], &[3.0, 4.0], 8, 2).unwrap();
        doe.write(&path, 1).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x1,theta1,theta2\n"));
        let (back, d) = DesignOfExperiments::read(&path).unwrap();
        assert_eq!(d, 1);
        assert_eq!(back, doe);
    }

    proptest! {
        #[test]
        fn stratification_survives_optimization(n in 2usize..25, q in 1usize..5, seed in any::<u64>()) {
            let lhs = lhs_maximin(n, q, seed, default_iterations(n, q)).unwrap();
            assert_latin(&lhs.design);
            assert_latin(&lhs.initial);
            prop_assert!(lhs.min_distance >= lhs.initial_min_distance);
        }

        #[test]
        fn rescale_inverts_unscale(
            pts in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 1..10),
            lo in prop::collection::vec(-5.0f64..5.0, 3),
            w in prop::collection::vec(0.01f64..10.0, 3),
        ) {
            let u = DMatrix::from_fn(pts.len(), 3, |i, j| pts[i][j]);
            let hi: Vec<f64> = lo.iter().zip(&w).map(|(a, b)| a + b).collect();
            let back = rescale(&unscale(&u, &lo, &hi).unwrap(), &lo, &hi).unwrap();
            for (a, b) in back.iter().zip(u.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
