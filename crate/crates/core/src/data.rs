use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    Binary,
    Continuous,
}

/// Observational rows `(x, a, y)` with a scalar treatment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub a: Vec<f64>,
    pub y: Array2<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, a: Vec<f64>, y: Array2<f64>) -> Result<Dataset> {
        let n = a.len();
        if x.nrows() != n || y.nrows() != n {
            return Err(Error::Dimension {
                expected: n,
                got: if x.nrows() != n { x.nrows() } else { y.nrows() },
                context: "dataset row count".into(),
            });
        }
        if y.ncols() == 0 {
            return Err(Error::Data("dataset needs at least one outcome column".into()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("covariates"));
        }
        ensure_finite(&a, "treatments")?;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("outcomes"));
        }
        Ok(Dataset { x, a, y })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn x_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    pub fn y_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.y.row(i)
    }

    pub fn treatment_kind(&self) -> TreatmentKind {
        if self.a.iter().all(|&a| a == 0.0 || a == 1.0) {
            TreatmentKind::Binary
        } else {
            TreatmentKind::Continuous
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: self.y.select(Axis(0), idx),
        }
    }

    /// Shuffled split; the first part holds `round(frac * n)` rows.
    pub fn split(&self, frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((frac * self.len() as f64).round() as usize).min(self.len());
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    pub fn header(d_x: usize, d_y: usize) -> Vec<String> {
        let mut h: Vec<String> = (1..=d_x).map(|i| format!("x_{i}")).collect();
        h.push("a".into());
        h.extend((1..=d_y).map(|i| format!("y_{i}")));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header(self.d_x(), self.d_y()))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.a[i].to_string());
            rec.extend(self.y.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        let a_col = header
            .iter()
            .position(|h| h == "a")
            .ok_or_else(|| Error::Data("missing treatment column `a`".into()))?;
        let d_x = a_col;
        let d_y = header.len() - a_col - 1;
        if header != Self::header(d_x, d_y) {
            return Err(Error::Data(format!("unexpected header {header:?}")));
        }
        let (mut xs, mut a, mut ys) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Data(format!("row {} has {} fields", line + 2, rec.len())));
            }
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Data(format!("row {}: {e}", line + 2)))?;
            xs.extend_from_slice(&vals[..d_x]);
            a.push(vals[d_x]);
            ys.extend_from_slice(&vals[d_x + 1..]);
        }
        let n = a.len();
        if n == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        Dataset::new(
            Array2::from_shape_vec((n, d_x), xs).unwrap(),
            a,
            Array2::from_shape_vec((n, d_y), ys).unwrap(),
        )
    }
}

/// Per-column affine standardisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Standardizer {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit on the rows of a matrix. Constant columns keep unit scale.
    pub fn fit(rows: &Array2<f64>) -> Standardizer {
        let n = rows.nrows() as f64;
        let mut mean = Vec::with_capacity(rows.ncols());
        let mut std = Vec::with_capacity(rows.ncols());
        for col in rows.columns() {
            let m = col.sum() / n;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(if v > 1e-24 { v.sqrt() } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    /// `Σ ln std`, the log-Jacobian of `invert`.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

/// Covariates with the treatment appended as the last column.
pub fn context_matrix(data: &Dataset) -> Array2<f64> {
    let mut m = Array2::zeros((data.len(), data.d_x() + 1));
    for i in 0..data.len() {
        for j in 0..data.d_x() {
            m[[i, j]] = data.x[[i, j]];
        }
        m[[i, data.d_x()]] = data.a[i];
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> Dataset {
        Dataset::new(
            array![[0.1, -2.0], [0.3, 1.5], [1.0 / 3.0, 0.0]],
            vec![0.0, 1.0, 1.0],
            array![[1.25], [-0.5], [1e-17]],
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = toy();
        d.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x_1,x_2,a,y_1\n"));
        assert_eq!(Dataset::read_csv(&path).unwrap(), d);
    }

    #[test]
    fn rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x_1,a,y_1\n0.1,1,nan_value\n").unwrap();
        assert!(matches!(Dataset::read_csv(&path), Err(Error::Data(_))));
        std::fs::write(&path, "x_1,b,y_1\n0.1,1,2\n").unwrap();
        assert!(Dataset::read_csv(&path).is_err());
        assert!(Dataset::new(array![[0.0]], vec![0.0, 1.0], array![[0.0]]).is_err());
    }

    #[test]
    fn treatment_kind_and_split() {
        let d = toy();
        assert_eq!(d.treatment_kind(), TreatmentKind::Binary);
        let (a, b) = d.split(2.0 / 3.0, 1);
        assert_eq!((a.len(), b.len()), (2, 1));
    }

    #[test]
    fn standardizer_round_trip() {
        let s = Standardizer::fit(&array![[1.0, 5.0], [3.0, 5.0]]);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        let z = s.apply(&[3.0, 6.0]);
        assert_eq!(z, vec![1.0, 1.0]);
        assert_eq!(s.invert(&z), vec![3.0, 6.0]);
    }
}
