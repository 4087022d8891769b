//! Speed matrices: loading, gap filling, min-max scaling and sliding
//! windows with a chronological split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::csv_error;
use crate::numerics::Tensor;

pub const STEP_MINUTES: usize = 5;

/// A `T×N` speed matrix. Missing readings are stored as NaN until
/// [`interpolate_missing`] fills them.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedDataset {
    pub name: String,
    pub matrix: Tensor,
    pub step_minutes: usize,
}

impl SpeedDataset {
    pub fn new(name: impl Into<String>, matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::dim("speed matrix", matrix.shape(), &[]));
        }
        Ok(SpeedDataset {
            name: name.into(),
            matrix,
            step_minutes: STEP_MINUTES,
        })
    }

    pub fn steps(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn missing_count(&self) -> usize {
        self.matrix.data().iter().filter(|v| v.is_nan()).count()
    }
}

fn parse_cell(cell: &str) -> Option<f64> {
    if cell.is_empty() {
        return Some(f64::NAN);
    }
    let v: f64 = cell.parse().ok()?;
    Some(if v < 0.0 { f64::NAN } else { v })
}

/// Reads a comma-separated `T×N` speed file. A first row that does not parse
/// as numbers is taken as a header. Empty cells, negative values and NaN
/// are kept as missing.
pub fn load_speed_csv(path: impl AsRef<Path>) -> Result<SpeedDataset> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&name, e))?;
    let mut data = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&name, e))?;
        if r == 0 && rec.iter().any(|c| parse_cell(c).is_none()) {
            cols = Some(rec.len());
            continue;
        }
        let width = *cols.get_or_insert(rec.len());
        if rec.len() != width {
            return Err(Error::Format {
                source_name: name,
                row: r + 1,
                col: rec.len().min(width) + 1,
                message: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            data.push(parse_cell(cell).ok_or_else(|| Error::Format {
                source_name: name.clone(),
                row: r + 1,
                col: c + 1,
                message: format!("`{cell}` is not a number"),
            })?);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            source_name: name,
            row: 0,
            col: 0,
            message: "no data rows".into(),
        });
    }
    let stem = path
        .file_stem()
        .map_or_else(|| name.clone(), |s| s.to_string_lossy().into_owned());
    SpeedDataset::new(stem, Tensor::new(vec![rows, cols], data)?)
}

/// Writes a speed matrix as header-less CSV.
pub fn write_speed_csv(path: impl AsRef<Path>, ds: &SpeedDataset) -> Result<()> {
    crate::graph::write_matrix_csv(path, &ds.matrix)
}

/// Per-column linear interpolation between the nearest valid readings;
/// leading and trailing gaps hold the nearest valid value.
pub fn interpolate_missing(ds: &SpeedDataset) -> Result<SpeedDataset> {
    let (t, n) = (ds.steps(), ds.n_nodes());
    let mut out = ds.matrix.clone();
    let m = out.data_mut();
    for c in 0..n {
        let valid: Vec<usize> = (0..t).filter(|&r| !m[r * n + c].is_nan()).collect();
        let (Some(&first), Some(&last)) = (valid.first(), valid.last()) else {
            return Err(Error::Data(format!(
                "node {c} of {} has no valid readings",
                ds.name
            )));
        };
        for r in 0..first {
            m[r * n + c] = m[first * n + c];
        }
        for r in last + 1..t {
            m[r * n + c] = m[last * n + c];
        }
        for w in valid.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (va, vb) = (m[a * n + c], m[b * n + c]);
            for r in a + 1..b {
                let f = (r - a) as f64 / (b - a) as f64;
                m[r * n + c] = va + f * (vb - va);
            }
        }
    }
    Ok(SpeedDataset {
        name: ds.name.clone(),
        matrix: out,
        step_minutes: ds.step_minutes,
    })
}

/// Min-max scaling fitted on training rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    /// Fits on rows `0..rows` of `matrix`.
    pub fn fit(matrix: &Tensor, rows: usize) -> Result<Self> {
        let n = matrix.shape()[1];
        let vals = &matrix.data()[..rows.min(matrix.shape()[0]) * n];
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(Error::Data(format!(
                "training rows have no usable range (min {min}, max {max})"
            )));
        }
        Ok(Normalization { min, max })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.apply(v))
    }

    pub fn inverse_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.inverse(v))
    }
}

/// Scales the whole dataset with statistics from rows `0..train_rows`.
pub fn normalize(ds: &SpeedDataset, train_rows: usize) -> Result<(SpeedDataset, Normalization)> {
    if ds.missing_count() > 0 {
        return Err(Error::Data(format!(
            "{} still has {} missing readings",
            ds.name,
            ds.missing_count()
        )));
    }
    let norm = Normalization::fit(&ds.matrix, train_rows)?;
    let scaled = SpeedDataset {
        name: ds.name.clone(),
        matrix: norm.apply_tensor(&ds.matrix),
        step_minutes: ds.step_minutes,
    };
    Ok((scaled, norm))
}

/// `E` input rows followed by `F′` target rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub input: Tensor,
    pub target: Tensor,
    pub t_start: usize,
}

pub fn window_count(steps: usize, input_len: usize, horizon: usize) -> usize {
    (steps + 1).saturating_sub(input_len + horizon)
}

fn check_window(steps: usize, input_len: usize, horizon: usize) -> Result<()> {
    if input_len == 0 || horizon == 0 || input_len + horizon > steps {
        return Err(Error::Parameter(format!(
            "window of {input_len}+{horizon} steps does not fit a series of {steps}"
        )));
    }
    Ok(())
}

/// Stride-1 windows over the whole series.
pub fn sliding_windows(
    ds: &SpeedDataset,
    input_len: usize,
    horizon: usize,
) -> Result<Vec<SampleWindow>> {
    let (t, n) = (ds.steps(), ds.n_nodes());
    check_window(t, input_len, horizon)?;
    let m = ds.matrix.data();
    (0..window_count(t, input_len, horizon))
        .map(|s| {
            let mid = (s + input_len) * n;
            Ok(SampleWindow {
                input: Tensor::new(vec![input_len, n], m[s * n..mid].to_vec())?,
                target: Tensor::new(vec![horizon, n], m[mid..mid + horizon * n].to_vec())?,
                t_start: s,
            })
        })
        .collect()
}

/// First time step of the test period: the start of window
/// `floor(ratio · count)`.
pub fn split_boundary(n_windows: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!(
            "train ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    let b = (ratio * n_windows as f64).floor() as usize;
    if b == 0 || b >= n_windows {
        return Err(Error::Data(format!(
            "{n_windows} windows leave one side of a {ratio} split empty"
        )));
    }
    Ok(b)
}

/// Chronological split. Test windows start at or after the boundary; train
/// windows end (target included) at or before it.
pub fn split_chronological(
    windows: Vec<SampleWindow>,
    ratio: f64,
) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>)> {
    let Some(first) = windows.first() else {
        return Err(Error::Data("no windows to split".into()));
    };
    let span = first.input.shape()[0] + first.target.shape()[0];
    let boundary = windows[split_boundary(windows.len(), ratio)?].t_start;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for w in windows {
        if w.t_start >= boundary {
            test.push(w);
        } else if w.t_start + span <= boundary {
            train.push(w);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "split leaves {} train and {} test windows",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

/// Normalised, windowed and split dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scaled: SpeedDataset,
    pub normalization: Normalization,
    pub boundary: usize,
    pub train: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
}

/// Fills gaps, fits scaling on the rows before the split boundary, then
/// windows and splits.
pub fn prepare(
    ds: &SpeedDataset,
    input_len: usize,
    horizon: usize,
    ratio: f64,
) -> Result<Prepared> {
    check_window(ds.steps(), input_len, horizon)?;
    let clean = interpolate_missing(ds)?;
    let count = window_count(clean.steps(), input_len, horizon);
    let boundary = split_boundary(count, ratio)?;
    let (scaled, normalization) = normalize(&clean, boundary)?;
    let (train, test) = split_chronological(sliding_windows(&scaled, input_len, horizon)?, ratio)?;
    Ok(Prepared {
        scaled,
        normalization,
        boundary,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn column(vals: &[f64]) -> SpeedDataset {
        SpeedDataset::new("t", Tensor::new(vec![vals.len(), 1], vals.to_vec()).unwrap()).unwrap()
    }

    fn ramp(steps: usize, nodes: usize) -> SpeedDataset {
        let data = (0..steps * nodes).map(|v| v as f64).collect();
        SpeedDataset::new("ramp", Tensor::new(vec![steps, nodes], data).unwrap()).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let nan = f64::NAN;
        let out = interpolate_missing(&column(&[10.0, nan, 20.0])).unwrap();
        assert_eq!(out.matrix.data(), &[10.0, 15.0, 20.0]);
        let out = interpolate_missing(&column(&[nan, 10.0, 20.0])).unwrap();
        assert_eq!(out.matrix.data(), &[10.0, 10.0, 20.0]);
        let out = interpolate_missing(&column(&[0.0, nan, nan, 30.0])).unwrap();
        assert_eq!(out.matrix.data(), &[0.0, 10.0, 20.0, 30.0]);
        assert!(matches!(
            interpolate_missing(&column(&[nan, nan])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn normalization_examples() {
        let m = Tensor::new(vec![2, 1], vec![0.0, 70.0]).unwrap();
        let norm = Normalization::fit(&m, 2).unwrap();
        assert_eq!(norm.apply(35.0), 0.5);
        assert_eq!(norm.apply(70.0), 1.0);
        for v in [0.0, 12.3, 69.99] {
            assert!((norm.inverse(norm.apply(v)) - v).abs() <= 1e-12);
        }
        let flat = Tensor::filled(&[3, 1], 4.0);
        assert!(Normalization::fit(&flat, 3).is_err());
    }

    #[test]
    fn window_examples() {
        let ds = ramp(10, 1);
        let w = sliding_windows(&ds, 4, 2).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w[0].t_start, 0);
        assert_eq!(w[0].input.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(w[0].target.data(), &[4.0, 5.0]);
        assert_eq!(sliding_windows(&ds, 6, 4).unwrap().len(), 1);
        assert!(matches!(sliding_windows(&ds, 8, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn split_examples() {
        let ds = ramp(105, 1);
        let w = sliding_windows(&ds, 4, 2).unwrap();
        assert_eq!(w.len(), 100);
        let (train, test) = split_chronological(w.clone(), 0.8).unwrap();
        assert!(train.len() <= 80);
        assert!(test.len() >= 20);
        let first_test = test[0].t_start;
        assert!(train.iter().all(|t| t.t_start + 6 <= first_test));
        assert!(split_chronological(w, 1.0).is_err());
    }

    #[test]
    fn loads_with_header_and_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "a,b\n1,2\n,-1\n5,NaN").unwrap();
        let ds = load_speed_csv(&p).unwrap();
        assert_eq!(ds.matrix.shape(), &[3, 2]);
        assert_eq!(ds.missing_count(), 3);

        let q = dir.path().join("bad.csv");
        std::fs::write(&q, "1,2\n3,x\n").unwrap();
        match load_speed_csv(&q) {
            Err(Error::Format { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("expected a format error, got {other:?}"),
        }
        let r = dir.path().join("ragged.csv");
        std::fs::write(&r, "1,2\n3\n").unwrap();
        assert!(matches!(load_speed_csv(&r), Err(Error::Format { row: 2, .. })));
    }
}
