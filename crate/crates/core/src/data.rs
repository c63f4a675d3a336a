//! Field observations, the flat parameter layout shared by every model, and
//! the small CSV table reader used for all numeric inputs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Field inputs `X` (n × d) paired row-wise with measurements `y_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl ObservationSet {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::structural(format!(
                "observation inputs have {} rows but {} measurements were given",
                x.nrows(),
                y.len()
            )));
        }
        if y.len() < 2 {
            return Err(Error::domain(format!(
                "at least 2 observations are required, got {}",
                y.len()
            )));
        }
        if x.ncols() < 1 {
            return Err(Error::domain("observation inputs need at least one column"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("observations contain non-finite values"));
        }
        Ok(Self { x, y })
    }

    /// Convenience constructor for scalar inputs.
    pub fn from_1d(t: &[f64], y: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_column_slice(t.len(), 1, t),
            DVector::from_column_slice(y),
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// The observation set with row `index` removed. Fails when fewer than two
    /// observations would remain.
    pub fn without(&self, index: usize) -> Result<Self> {
        if index >= self.n() {
            return Err(Error::structural(format!(
                "row {index} out of range for {} observations",
                self.n()
            )));
        }
        Self::new(self.x.clone().remove_row(index), self.y.clone().remove_row(index))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let table = Table::read_csv(path.as_ref())?;
        let ncols = table.headers.len();
        if ncols < 2 {
            return Err(Error::Csv(format!(
                "{}: expected columns x1..xd,y",
                path.as_ref().display()
            )));
        }
        for (k, h) in table.headers[..ncols - 1].iter().enumerate() {
            if h != &format!("x{}", k + 1) {
                return Err(Error::Csv(format!(
                    "{}: column {} should be named x{} but is {h:?}",
                    path.as_ref().display(),
                    k + 1,
                    k + 1
                )));
            }
        }
        if table.headers[ncols - 1] != "y" {
            return Err(Error::Csv(format!(
                "{}: last column should be named y",
                path.as_ref().display()
            )));
        }
        let m = table.to_matrix();
        let x = m.columns(0, ncols - 1).into_owned();
        let y = m.column(ncols - 1).into_owned();
        Self::new(x, y)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut headers: Vec<String> = (1..=self.dim()).map(|k| format!("x{k}")).collect();
        headers.push("y".into());
        let rows = (0..self.n())
            .map(|i| {
                let mut row: Vec<f64> = self.x.row(i).iter().copied().collect();
                row.push(self.y[i]);
                row
            })
            .collect();
        Table { headers, rows }.write_csv(path.as_ref())
    }
}

/// Which slots of the flat parameter vector exist.
///
/// The order is always `[θ_1..θ_p, σ_δ², ψ_δ (discrepancy only), σ_e²]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterLayout {
    pub p: usize,
    pub has_discrepancy: bool,
}

impl ParameterLayout {
    pub fn new(p: usize, has_discrepancy: bool) -> Self {
        Self { p, has_discrepancy }
    }

    pub fn total(&self) -> usize {
        if self.has_discrepancy {
            self.p + 3
        } else {
            self.p + 1
        }
    }

    /// Slot indices that hold strictly positive variance-like quantities.
    pub fn positive_slots(&self) -> Vec<usize> {
        if self.has_discrepancy {
            vec![self.p, self.p + 1, self.p + 2]
        } else {
            vec![self.p]
        }
    }

    pub fn noise_slot(&self) -> usize {
        self.total() - 1
    }

    /// Column names used in every exported table.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.p).map(|k| format!("theta{k}")).collect();
        if self.has_discrepancy {
            names.push("sigma_delta2".into());
            names.push("psi_delta".into());
        }
        names.push("sigma_e2".into());
        names
    }
}

/// A validated point in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: ParameterLayout,
}

/// Borrowed view of a parameter vector split into its roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParameters<'a> {
    pub theta: &'a [f64],
    /// `(σ_δ², ψ_δ)` when the layout has a discrepancy term.
    pub discrepancy: Option<(f64, f64)>,
    pub noise_var: f64,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: ParameterLayout) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::structural(format!(
                "parameter vector has {} entries, layout expects {}",
                values.len(),
                layout.total()
            )));
        }
        for slot in layout.positive_slots() {
            if !(values[slot] > 0.0) {
                return Err(Error::domain(format!(
                    "{} must be strictly positive, got {}",
                    layout.names()[slot],
                    values[slot]
                )));
            }
        }
        Ok(Self { values, layout })
    }

    pub fn from_parts(
        theta: &[f64],
        discrepancy: Option<(f64, f64)>,
        noise_var: f64,
    ) -> Result<Self> {
        let layout = ParameterLayout::new(theta.len(), discrepancy.is_some());
        let mut values = theta.to_vec();
        if let Some((s2, psi)) = discrepancy {
            values.push(s2);
            values.push(psi);
        }
        values.push(noise_var);
        Self::new(values, layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> ParameterLayout {
        self.layout
    }

    pub fn split(&self) -> SplitParameters<'_> {
        // Invariants were checked at construction.
        split_parameters(&self.values, self.layout).expect("validated parameter vector")
    }

    /// Flattens the split parts back into slot order.
    pub fn concat(parts: &SplitParameters<'_>) -> Vec<f64> {
        let mut out = parts.theta.to_vec();
        if let Some((s2, psi)) = parts.discrepancy {
            out.push(s2);
            out.push(psi);
        }
        out.push(parts.noise_var);
        out
    }
}

/// Splits a raw slot vector according to `layout`.
pub fn split_parameters(values: &[f64], layout: ParameterLayout) -> Result<SplitParameters<'_>> {
    if values.len() != layout.total() {
        return Err(Error::structural(format!(
            "parameter vector has {} entries, layout expects {}",
            values.len(),
            layout.total()
        )));
    }
    let p = layout.p;
    let noise_var = values[layout.noise_slot()];
    let discrepancy = layout
        .has_discrepancy
        .then(|| (values[p], values[p + 1]));
    let positive = discrepancy
        .map(|(a, b)| a > 0.0 && b > 0.0)
        .unwrap_or(true)
        && noise_var > 0.0;
    if !positive {
        return Err(Error::domain(
            "variance components of the parameter vector must be strictly positive",
        ));
    }
    Ok(SplitParameters {
        theta: &values[..p],
        discrepancy,
        noise_var,
    })
}

/// A headered numeric CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file).map_err(|e| match e {
            Error::Csv(msg) => Error::Csv(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Csv(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            // Line 1 is the header.
            let line = i + 2;
            let record = record.map_err(|e| Error::Csv(format!("row {line}: {e}")))?;
            if record.len() != headers.len() {
                return Err(Error::Csv(format!(
                    "row {line}: expected {} fields, found {}",
                    headers.len(),
                    record.len()
                )));
            }
            let row = record
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Csv(format!("row {line}: cannot parse {f:?} as a number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { headers, rows })
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.headers.len(), |i, j| self.rows[i][j])
    }

    pub fn from_matrix(headers: Vec<String>, m: &DMatrix<f64>) -> Self {
        let rows = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        Self { headers, rows }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        wtr.write_record(&self.headers)
            .map_err(|e| Error::Csv(e.to_string()))?;
        for row in &self.rows {
            wtr.write_record(row.iter().map(|v| format_float(*v)))
                .map_err(|e| Error::Csv(e.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }
}

/// Shortest decimal text that parses back to the identical `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn split_without_discrepancy() {
        let layout = ParameterLayout::new(5, false);
        let v = vec![1.0, 0.25, 6.0, 0.05, FRAC_PI_2, 1e-3];
        let pv = ParameterVector::new(v.clone(), layout).unwrap();
        let s = pv.split();
        assert_eq!(s.theta, &v[..5]);
        assert_eq!(s.discrepancy, None);
        assert_eq!(s.noise_var, 1e-3);
        assert_eq!(ParameterVector::concat(&s), v);
    }

    #[test]
    fn split_with_discrepancy() {
        let layout = ParameterLayout::new(5, true);
        let v = vec![1.0, 0.3, 6.0, 0.05, FRAC_PI_2, 1e-3, 0.5, 1e-3];
        let pv = ParameterVector::new(v.clone(), layout).unwrap();
        let s = pv.split();
        assert_eq!(s.theta, &v[..5]);
        assert_eq!(s.discrepancy, Some((1e-3, 0.5)));
        assert_eq!(s.noise_var, 1e-3);
        assert_eq!(ParameterVector::concat(&s), v);
    }

    #[test]
    fn split_minimal_layout() {
        let pv = ParameterVector::new(vec![0.0, 1.0], ParameterLayout::new(1, false)).unwrap();
        let s = pv.split();
        assert_eq!(s.theta, &[0.0]);
        assert_eq!(s.noise_var, 1.0);
    }

    #[test]
    fn layout_mismatch_and_positivity() {
        let layout = ParameterLayout::new(2, true);
        assert!(matches!(
            ParameterVector::new(vec![1.0; 4], layout),
            Err(Error::Structural(_))
        ));
        assert!(matches!(
            ParameterVector::new(vec![1.0, 1.0, 0.0, 1.0, 1.0], layout),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            split_parameters(&[1.0, -1.0], ParameterLayout::new(1, false)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn names_follow_slot_order() {
        assert_eq!(
            ParameterLayout::new(2, true).names(),
            vec!["theta1", "theta2", "sigma_delta2", "psi_delta", "sigma_e2"]
        );
    }

    #[test]
    fn observation_invariants() {
        assert!(ObservationSet::from_1d(&[0.0], &[1.0]).is_err());
        assert!(ObservationSet::from_1d(&[0.0, 1.0], &[1.0, f64::NAN]).is_err());
        let obs = ObservationSet::from_1d(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        let less = obs.without(1).unwrap();
        assert_eq!(less.y().as_slice(), &[1.0, 3.0]);
        assert_eq!(less.x().as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn observation_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let obs = ObservationSet::from_1d(&[0.1, 1.0 / 3.0], &[1e-17, -2.5]).unwrap();
        obs.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x1,y\n"));
        assert_eq!(ObservationSet::read_csv(&path).unwrap(), obs);
    }

    #[test]
    fn malformed_csv_reports_row() {
        let err = Table::from_reader("x1,y\n1,2\n3,oops\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    proptest::proptest! {
        #[test]
        fn split_concat_is_identity(
            theta in proptest::collection::vec(-10.0f64..10.0, 1..6),
            disc in proptest::option::of((1e-6f64..5.0, 1e-6f64..5.0)),
            noise in 1e-9f64..10.0,
        ) {
            let pv = ParameterVector::from_parts(&theta, disc, noise).unwrap();
            let back = ParameterVector::concat(&pv.split());
            proptest::prop_assert_eq!(back.as_slice(), pv.values());
        }
    }
}
