//! Datasets, per-coordinate sort orders and hinge design matrices.
//!
//! Coordinates and sample indices are 0-based throughout the crate.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Design matrix, response and column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: Vec<f64>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, names: Vec<String>) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(Error::DimensionMismatch(format!(
                "design matrix must be nonempty, got {n}x{p}"
            )));
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "response has {} entries, design has {n} rows",
                y.len()
            )));
        }
        if names.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{} names for {p} columns",
                names.len()
            )));
        }
        let mut seen = HashSet::with_capacity(p);
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateColumn(name.clone()));
            }
        }
        for k in 0..p {
            for i in 0..n {
                let v = x[(i, k)];
                if !v.is_finite() {
                    return Err(Error::InvalidCell {
                        row: i + 1,
                        column: names[k].clone(),
                        value: v.to_string(),
                    });
                }
            }
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidCell {
                    row: i + 1,
                    column: "<response>".into(),
                    value: v.to_string(),
                });
            }
        }
        Ok(Self { x, y, names })
    }

    /// Builds a dataset with columns named `x1..xp`.
    pub fn from_columns(columns: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let p = columns.len();
        let n = y.len();
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::DimensionMismatch(
                "all columns must have the response's length".into(),
            ));
        }
        let x = DMatrix::from_fn(n, p, |i, k| columns[k][i]);
        let names = (1..=p).map(|k| format!("x{k}")).collect();
        Self::new(x, y, names)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Column `k` as a contiguous slice (storage is column-major).
    pub fn column(&self, k: usize) -> &[f64] {
        let n = self.n();
        &self.x.as_slice()[k * n..(k + 1) * n]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Restriction to the given sample indices, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, k| self.x[(rows[i], k)]);
        let y = rows.iter().map(|&i| self.y[i]).collect();
        Self::new(x, y, self.names.clone())
    }

    /// Same dataset with a different response vector.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.x.clone(), y, self.names.clone())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|c| c == name)
    }

    fn check_coordinate(&self, k: usize) -> Result<()> {
        if k >= self.p() {
            return Err(Error::CoordinateOutOfRange { index: k, p: self.p() });
        }
        Ok(())
    }
}

/// Reads a comma-separated file with a header row. The response column is
/// taken out and the remaining columns form the design in header order.
pub fn load_csv(path: impl AsRef<Path>, response_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, response_column)
}

/// Same as [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, response_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();

    let mut seen = HashSet::new();
    for name in &header {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateColumn(name.clone()));
        }
    }
    let response_idx = header
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| Error::MissingResponse(response_column.to_owned()))?;

    let width = header.len();
    let mut values: Vec<f64> = Vec::new();
    let mut n = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let row = r + 1;
        if record.len() != width {
            return Err(Error::RaggedRow {
                row,
                found: record.len(),
                expected: width,
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidCell {
                    row,
                    column: header[c].clone(),
                    value: cell.to_owned(),
                })?;
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }

    let y = (0..n).map(|i| values[i * width + response_idx]).collect();
    let feature_cols: Vec<usize> = (0..width).filter(|&c| c != response_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::Csv("no covariate columns besides the response".into()));
    }
    let x = DMatrix::from_fn(n, feature_cols.len(), |i, k| values[i * width + feature_cols[k]]);
    let names = feature_cols.iter().map(|&c| header[c].clone()).collect();
    Dataset::new(x, y, names)
}

/// Writes the dataset as csv with the response as the last column.
pub fn write_csv<W: Write>(ds: &Dataset, response_name: &str, mut out: W) -> std::io::Result<()> {
    let mut header = ds.names().join(",");
    header.push(',');
    header.push_str(response_name);
    writeln!(out, "{header}")?;
    for i in 0..ds.n() {
        let mut line = String::new();
        for k in 0..ds.p() {
            line.push_str(&format!("{:?},", ds.x()[(i, k)]));
        }
        line.push_str(&format!("{:?}", ds.y()[i]));
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Ascending sort order of one coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    /// `order[i]` is the sample holding the i-th smallest value.
    pub order: Vec<usize>,
    pub coordinate: usize,
}

impl Permutation {
    /// Stable ascending sort of `values`; ties keep their original order.
    pub fn sorting(values: &[f64], coordinate: usize) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        Self { order, coordinate }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `rank[sample]` is the sorted position of `sample`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0; self.order.len()];
        for (pos, &i) in self.order.iter().enumerate() {
            rank[i] = pos;
        }
        rank
    }

    /// Gathers `values` into sorted order.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&i| values[i]).collect()
    }

    /// Scatters sorted-order `values` back to sample order.
    pub fn unapply(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; values.len()];
        for (pos, &i) in self.order.iter().enumerate() {
            out[i] = values[pos];
        }
        out
    }
}

pub fn sort_index(ds: &Dataset, k: usize) -> Result<Permutation> {
    ds.check_coordinate(k)?;
    Ok(Permutation::sorting(ds.column(k), k))
}

/// Hinge design `raw[i][j] = (x_i - x_(j))_+` and its column-centered copy.
///
/// Rows are in sample order; column `j` is the hinge at the j-th smallest
/// value, for `j = 0..n-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    pub raw: DMatrix<f64>,
    pub centered: DMatrix<f64>,
    pub perm: Permutation,
}

impl DeltaMatrix {
    pub fn from_column(x: &[f64], coordinate: usize) -> Result<Self> {
        let n = x.len();
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
        let perm = Permutation::sorting(x, coordinate);
        let knots: Vec<f64> = perm.order[..n - 1].iter().map(|&i| x[i]).collect();
        let raw = DMatrix::from_fn(n, n - 1, |i, j| (x[i] - knots[j]).max(0.0));
        let mut centered = raw.clone();
        for mut col in centered.column_iter_mut() {
            let mean = col.sum() / n as f64;
            col.add_scalar_mut(-mean);
        }
        Ok(Self { raw, centered, perm })
    }

    /// `centered * d`, a centered vector in sample order.
    pub fn apply_centered(&self, d: &[f64]) -> Vec<f64> {
        let d = nalgebra::DVector::from_column_slice(d);
        (&self.centered * d).iter().copied().collect()
    }

    /// Debug dump of the centered matrix, one row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.centered.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn build_delta(ds: &Dataset, k: usize) -> Result<DeltaMatrix> {
    ds.check_coordinate(k)?;
    DeltaMatrix::from_column(ds.column(k), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(columns: &[Vec<f64>]) -> Dataset {
        let n = columns[0].len();
        Dataset::from_columns(columns, vec![0.0; n]).unwrap()
    }

    #[test]
    fn parses_basic_csv() {
        let d = read_csv("a,b,y\n1,2,3\n4,5,6".as_bytes(), "y").unwrap();
        assert_eq!((d.n(), d.p()), (2, 2));
        assert_eq!(d.y(), &[3.0, 6.0]);
        assert_eq!(d.column(1), &[2.0, 5.0]);
        assert_eq!(d.names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn response_can_sit_anywhere() {
        let d = read_csv("y,a\n1,2\n3,4".as_bytes(), "y").unwrap();
        assert_eq!(d.y(), &[1.0, 3.0]);
        assert_eq!(d.column(0), &[2.0, 4.0]);
    }

    #[test]
    fn missing_response_column() {
        let err = read_csv("a,b\n1,2".as_bytes(), "y").unwrap_err();
        assert!(err.to_string().contains("response column not found"));
    }

    #[test]
    fn duplicate_header() {
        let err = read_csv("a,a,y\n1,2,3".as_bytes(), "y").unwrap_err();
        assert!(matches!(err, Error::DuplicateColumn(ref c) if c == "a"));
    }

    #[test]
    fn nan_cell_names_row_and_column() {
        let err = read_csv("a,y\n1,NaN".as_bytes(), "y").unwrap_err();
        match err {
            Error::InvalidCell { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell() {
        let err = read_csv("a,y\n1,2\nfoo,3".as_bytes(), "y").unwrap_err();
        assert!(matches!(err, Error::InvalidCell { row: 2, ref column, .. } if column == "a"));
    }

    #[test]
    fn ragged_rows() {
        let err = read_csv("a,b,y\n1,2,3\n1,2".as_bytes(), "y").unwrap_err();
        assert!(matches!(
            err,
            Error::RaggedRow {
                row: 2,
                found: 2,
                expected: 3
            }
        ));
    }

    #[test]
    fn missing_file() {
        let err = load_csv("/definitely/not/here.csv", "y").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn csv_round_trip_through_disk() {
        let d = ds(&[vec![0.5, -1.25, 3.0], vec![1e-3, 2.0, 7.5]])
            .with_response(vec![1.0, 2.0, 3.0])
            .unwrap();
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write_csv(&d, "target", &mut file).unwrap();
        let back = load_csv(file.path(), "target").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn sort_examples() {
        let d = ds(&[vec![3.0, 1.0, 2.0], vec![1.0, 1.0, 2.0]]);
        assert_eq!(sort_index(&d, 0).unwrap().order, vec![1, 2, 0]);
        assert_eq!(sort_index(&d, 1).unwrap().order, vec![0, 1, 2]);
        let single = ds(&[vec![5.0]]);
        assert_eq!(sort_index(&single, 0).unwrap().order, vec![0]);
        assert!(matches!(
            sort_index(&d, 2),
            Err(Error::CoordinateOutOfRange { index: 2, p: 2 })
        ));
    }

    #[test]
    fn delta_examples() {
        let d = ds(&[vec![0.0, 1.0, 3.0]]);
        let delta = build_delta(&d, 0).unwrap();
        let raw = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 3.0, 2.0]);
        assert_eq!(delta.raw, raw);
        let centered = DMatrix::from_row_slice(
            3,
            2,
            &[-4.0 / 3.0, -2.0 / 3.0, -1.0 / 3.0, -2.0 / 3.0, 5.0 / 3.0, 4.0 / 3.0],
        );
        assert!((delta.centered - centered).abs().max() < 1e-15);

        let flat = build_delta(&ds(&[vec![2.0, 2.0, 2.0]]), 0).unwrap();
        assert_eq!(flat.raw.abs().max(), 0.0);
        assert_eq!(flat.centered.abs().max(), 0.0);
    }

    #[test]
    fn delta_rows_follow_sample_order() {
        let d = ds(&[vec![3.0, 0.0, 1.0]]);
        let delta = build_delta(&d, 0).unwrap();
        // sample 0 holds the largest value 3
        assert_eq!(delta.raw.row(0).iter().copied().collect::<Vec<_>>(), vec![3.0, 2.0]);
        assert_eq!(delta.raw.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn delta_needs_two_samples() {
        assert!(matches!(
            build_delta(&ds(&[vec![1.0]]), 0),
            Err(Error::TooFewSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn dump_has_one_line_per_sample() {
        let delta = build_delta(&ds(&[vec![0.0, 1.0, 3.0]]), 0).unwrap();
        let mut buf = Vec::new();
        delta.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    proptest! {
        #[test]
        fn centered_columns_sum_to_zero(x in prop::collection::vec(-10.0f64..10.0, 2..30)) {
            let delta = DeltaMatrix::from_column(&x, 0).unwrap();
            let n = x.len() as f64;
            for col in delta.centered.column_iter() {
                prop_assert!(col.sum().abs() <= 1e-10 * n * (1.0 + col.abs().max()));
            }
            for i in 0..x.len() {
                for j in 0..x.len() - 1 {
                    prop_assert!(delta.raw[(i, j)] >= 0.0);
                }
            }
        }

        #[test]
        fn hinge_combinations_are_centered_and_convex(
            (x, d) in (3usize..25).prop_flat_map(|n| (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(0.0f64..3.0, n - 1),
            )),
            slope in -3.0f64..3.0,
        ) {
            let mut d = d;
            d[0] = slope;
            let delta = DeltaMatrix::from_column(&x, 0).unwrap();
            let f = delta.apply_centered(&d);
            let sup = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let n = x.len() as f64;
            prop_assert!(f.iter().sum::<f64>().abs() <= 1e-8 * n * sup.max(1.0));

            let raw_f: Vec<f64> = (0..x.len())
                .map(|i| (0..x.len() - 1).map(|j| delta.raw[(i, j)] * d[j]).sum())
                .collect();
            let xs = delta.perm.apply(&x);
            let fs = delta.perm.apply(&raw_f);
            for i in 1..x.len() - 1 {
                let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
                if h0 > 1e-9 && h1 > 1e-9 {
                    let dd = ((fs[i + 1] - fs[i]) / h1 - (fs[i] - fs[i - 1]) / h0) / (h0 + h1);
                    prop_assert!(dd >= -1e-10 * (1.0 + sup) / (h0 * h1).min(1.0));
                }
            }
        }

        #[test]
        fn sort_order_sorts(x in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let perm = Permutation::sorting(&x, 0);
            let sorted = perm.apply(&x);
            prop_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
            let mut seen = perm.order.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..x.len()).collect::<Vec<_>>());
            prop_assert_eq!(perm.unapply(&sorted), x);
        }
    }
}
