//! Weighted road graph built from pairwise road lengths with a thresholded
//! Gaussian kernel.

use std::io::Write;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Directed road graph with Gaussian-kernel edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    n_nodes: usize,
    adjacency: Tensor,
    neighborhoods: Vec<Vec<usize>>,
    sigma: f64,
    kappa: f64,
}

/// Kernel weight for a single road length.
pub fn gaussian_weight(len: f64, sigma: f64, kappa: f64) -> f64 {
    if len <= kappa {
        (-(len * len) / (sigma * sigma)).exp()
    } else {
        0.0
    }
}

fn square_side(op: &'static str, t: &Tensor) -> Result<usize> {
    match *t.shape() {
        [n, m] if n == m => Ok(n),
        _ => Err(Error::dim(op, t.shape(), &[])),
    }
}

fn off_diagonal(distances: &Tensor) -> impl Iterator<Item = f64> + '_ {
    let n = distances.shape()[0];
    (0..n * n)
        .filter(move |k| k / n != k % n)
        .map(move |k| distances.data()[k])
}

/// Population standard deviation of the finite off-diagonal road lengths.
pub fn sigma_from_distances(distances: &Tensor) -> Result<f64> {
    square_side("sigma_from_distances", distances)?;
    let vals: Vec<f64> = off_diagonal(distances).filter(|d| d.is_finite()).collect();
    if vals.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least two finite off-diagonal distances, found {}",
            vals.len()
        )));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Distance threshold that keeps (at most) `percentile` percent of the
/// off-diagonal pairs, shortest first.
///
/// With zero pairs kept the threshold falls below the shortest positive
/// length, so only zero-length pairs and the diagonal survive.
pub fn kappa_from_percentile(distances: &Tensor, percentile: f64) -> Result<f64> {
    square_side("kappa_from_percentile", distances)?;
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Validation(format!(
            "kappa percentile must lie in [0, 100], got {percentile}"
        )));
    }
    let mut vals: Vec<f64> = off_diagonal(distances).collect();
    vals.sort_by(f64::total_cmp);
    let keep = ((percentile / 100.0) * vals.len() as f64).floor() as usize;
    let smallest_positive = vals.iter().copied().find(|&d| d > 0.0);
    let kappa = if keep == 0 {
        smallest_positive.map_or(1.0, |d| d / 2.0)
    } else {
        vals[keep - 1]
    };
    if kappa.is_finite() && kappa > 0.0 {
        Ok(kappa)
    } else {
        // All kept pairs have zero (or infinite) length; any positive finite
        // threshold below the next positive length gives the same graph.
        Ok(smallest_positive.filter(|d| d.is_finite()).map_or(1.0, |d| d / 2.0))
    }
}

impl RoadGraph {
    /// Applies the thresholded Gaussian kernel to a matrix of road lengths.
    pub fn build_adjacency(distances: &Tensor, sigma: f64, kappa: f64) -> Result<Self> {
        let n = square_side("build_adjacency", distances)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Validation(format!("sigma must be positive, got {sigma}")));
        }
        if !(kappa > 0.0) {
            return Err(Error::Validation(format!("kappa must be positive, got {kappa}")));
        }
        let mut weights = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let len = distances.data()[a * n + b];
                if len.is_nan() || len < 0.0 {
                    return Err(Error::Validation(format!(
                        "road length ({a}, {b}) = {len} is not a nonnegative number"
                    )));
                }
                if a == b && len != 0.0 {
                    return Err(Error::Validation(format!(
                        "self-distance of node {a} is {len}, expected 0"
                    )));
                }
                weights[a * n + b] = gaussian_weight(len, sigma, kappa);
            }
        }
        let adjacency = Tensor::new(vec![n, n], weights)?;
        Ok(Self::from_weights(adjacency, sigma, kappa))
    }

    /// Graph whose only edges are self-loops.
    pub fn isolated(n: usize) -> Self {
        Self::from_weights(Tensor::eye(n), f64::NAN, f64::NAN)
    }

    fn from_weights(adjacency: Tensor, sigma: f64, kappa: f64) -> Self {
        let n = adjacency.shape()[0];
        let neighborhoods = (0..n)
            .map(|a| (0..n).filter(|&b| adjacency.at(&[a, b]) > 0.0).collect())
            .collect();
        RoadGraph {
            n_nodes: n,
            adjacency,
            neighborhoods,
            sigma,
            kappa,
        }
    }

    /// Validates an already weighted adjacency matrix.
    pub fn from_adjacency(adjacency: Tensor) -> Result<Self> {
        Self::from_adjacency_named(adjacency, "adjacency")
    }

    fn from_adjacency_named(mut adjacency: Tensor, source: &str) -> Result<Self> {
        let n = square_side("from_adjacency", &adjacency)?;
        for a in 0..n {
            for b in 0..n {
                let w = adjacency.at(&[a, b]);
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Format {
                        source_name: source.to_string(),
                        row: a + 1,
                        col: b + 1,
                        message: format!("weight {w} outside [0, 1]"),
                    });
                }
            }
        }
        let mut coerced = 0;
        for a in 0..n {
            if adjacency.at(&[a, a]) != 1.0 {
                adjacency.set(&[a, a], 1.0);
                coerced += 1;
            }
        }
        if coerced > 0 {
            warn!("{source}: set {coerced} diagonal entries to 1");
        }
        Ok(Self::from_weights(adjacency, f64::NAN, f64::NAN))
    }

    /// Reads an `N×N` weight matrix from a header-less CSV file.
    pub fn load_prebuilt_adjacency(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = read_matrix_csv(path)?;
        Self::from_adjacency_named(rows, &path.display().to_string())
    }

    /// Writes the weight matrix as header-less CSV with round-trip precision.
    pub fn write_adjacency_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_csv(path, &self.adjacency)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.adjacency.at(&[a, b])
    }

    /// Indices `b` with a positive weight from `a` (always includes `a`).
    pub fn neighborhood(&self, a: usize) -> &[usize] {
        &self.neighborhoods[a]
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Number of directed edges excluding self-loops.
    pub fn edge_count(&self) -> usize {
        self.neighborhoods
            .iter()
            .enumerate()
            .map(|(a, nb)| nb.iter().filter(|&&b| b != a).count())
            .sum()
    }

    /// Row-major `N×N` admissibility mask (`true` inside the neighbourhood).
    pub fn mask(&self) -> Vec<bool> {
        self.adjacency.data().iter().map(|&w| w > 0.0).collect()
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes;
        if perm.len() != n {
            return Err(Error::dim("permuted", &[n], &[perm.len()]));
        }
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w[i * n + j] = self.weight(perm[i], perm[j]);
            }
        }
        Ok(Self::from_weights(
            Tensor::new(vec![n, n], w)?,
            self.sigma,
            self.kappa,
        ))
    }
}

/// Parses a header-less numeric CSV into a matrix, reporting the location of
/// ragged rows and unparsable cells. `inf` is accepted.
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&name, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&name, e))?;
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
            let v: f64 = cell.parse().map_err(|_| Error::Format {
                source_name: name.clone(),
                row: r + 1,
                col: c + 1,
                message: format!("`{cell}` is not a number"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows != cols {
        return Err(Error::Format {
            source_name: name,
            row: rows,
            col: cols,
            message: format!("matrix is {rows}×{cols}, expected square"),
        });
    }
    Tensor::new(vec![rows, cols], data)
}

pub(crate) fn csv_error(name: &str, e: csv::Error) -> Error {
    let (row, col) = e
        .position()
        .map_or((0, 0), |p| (p.record() as usize + 1, 0));
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: name.to_string(),
            source,
        },
        other => Error::Format {
            source_name: name.to_string(),
            row,
            col,
            message: format!("{other:?}"),
        },
    }
}

/// Writes a matrix as header-less CSV. `f64` `Display` is shortest
/// round-trip, so reading the file back is bit-exact.
pub fn write_matrix_csv(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let cols = *t.shape().last().unwrap_or(&1);
    let mut out = String::with_capacity(t.len() * 8);
    for row in t.data().chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
