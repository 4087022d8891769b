//! Reference forecasters and the common [`Forecaster`] interface.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::numerics::Tensor;
use crate::stgin::StginModel;

/// Maps an `E×N` input window to an `F′×N` forecast.
pub trait Forecaster: Sync {
    fn name(&self) -> &str;
    fn forecast(&self, input: &Tensor, horizon: usize) -> Result<Tensor>;
}

fn shape2(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [e, n] if e > 0 => Ok((e, n)),
        _ => Err(Error::dim("forecast input", t.shape(), &[])),
    }
}

/// Repeats the last observed step.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn forecast(&self, input: &Tensor, horizon: usize) -> Result<Tensor> {
        let (e, _) = shape2(input)?;
        let last = input.row(e - 1);
        Tensor::new(
            vec![horizon, last.len()],
            last.iter().copied().cycle().take(horizon * last.len()).collect(),
        )
    }
}

/// Repeats the per-node mean of the input window.
#[derive(Clone, Copy, Debug, Default)]
pub struct HistoricalAverage;

impl Forecaster for HistoricalAverage {
    fn name(&self) -> &str {
        "historical_average"
    }

    fn forecast(&self, input: &Tensor, horizon: usize) -> Result<Tensor> {
        let (e, n) = shape2(input)?;
        let mut mean = vec![0.0; n];
        for r in 0..e {
            for (m, v) in mean.iter_mut().zip(input.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= e as f64);
        Tensor::new(
            vec![horizon, n],
            mean.iter().copied().cycle().take(horizon * n).collect(),
        )
    }
}

pub const RIDGE_LAMBDA: f64 = 1e-6;
pub const DEFAULT_AR_ORDER: usize = 3;

/// Per-node autoregression with intercept, `y_t = c + Σ a_i y_{t−i}`, fitted
/// by least squares and rolled forward recursively.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAr {
    pub order: usize,
    /// Per node: `[c, a_1, …, a_p]`.
    pub coefficients: Vec<Vec<f64>>,
}

impl LinearAr {
    /// Fits each column of `series: T×N`. A rank-deficient design falls back
    /// to ridge regression (intercept unpenalised).
    pub fn fit(series: &Tensor, order: usize) -> Result<Self> {
        let (t, n) = shape2(series)?;
        if order == 0 || t < order + 2 {
            return Err(Error::Parameter(format!(
                "AR order {order} needs at least {} training steps, got {t}",
                order + 2
            )));
        }
        let rows = t - order;
        let coefficients = (0..n)
            .map(|c| {
                let x = DMatrix::from_fn(rows, order + 1, |r, j| {
                    if j == 0 {
                        1.0
                    } else {
                        series.at(&[r + order - j, c])
                    }
                });
                let y = DVector::from_fn(rows, |r, _| series.at(&[r + order, c]));
                solve_least_squares(&x, &y, c)
            })
            .collect::<Result<_>>()?;
        Ok(LinearAr { order, coefficients })
    }
}

fn solve_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, node: usize) -> Result<Vec<f64>> {
    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if max_sv > 0.0 && min_sv > max_sv * 1e-10 {
        let sol = svd
            .solve(y, 0.0)
            .map_err(|e| Error::Data(format!("least squares failed for node {node}: {e}")))?;
        return Ok(sol.iter().copied().collect());
    }
    warn!("singular autoregression design for node {node}; using ridge fallback");
    let p = x.ncols();
    let mut gram = x.transpose() * x;
    for j in 1..p {
        gram[(j, j)] += RIDGE_LAMBDA;
    }
    let rhs = x.transpose() * y;
    if let Some(ch) = gram.clone().cholesky() {
        return Ok(ch.solve(&rhs).iter().copied().collect());
    }
    // The intercept column alone is singular only for an empty design.
    gram[(0, 0)] += RIDGE_LAMBDA;
    gram.cholesky()
        .map(|ch| ch.solve(&rhs).iter().copied().collect())
        .ok_or_else(|| Error::Data(format!("ridge system for node {node} is not solvable")))
}

impl Forecaster for LinearAr {
    fn name(&self) -> &str {
        "linear_ar"
    }

    fn forecast(&self, input: &Tensor, horizon: usize) -> Result<Tensor> {
        let (e, n) = shape2(input)?;
        if n != self.coefficients.len() || e < self.order {
            return Err(Error::dim(
                "linear_ar input",
                input.shape(),
                &[self.order, self.coefficients.len()],
            ));
        }
        let mut out = vec![0.0; horizon * n];
        for (c, coef) in self.coefficients.iter().enumerate() {
            let mut hist: Vec<f64> = (e - self.order..e).map(|r| input.at(&[r, c])).collect();
            for h in 0..horizon {
                let len = hist.len();
                let next = coef[0]
                    + (1..=self.order)
                        .map(|i| coef[i] * hist[len - i])
                        .sum::<f64>();
                out[h * n + c] = next;
                hist.push(next);
            }
        }
        Tensor::new(vec![horizon, n], out)
    }
}

/// A trained model together with the graph it runs on.
pub struct StginForecaster<'a> {
    pub name: String,
    pub model: &'a StginModel,
    pub graph: &'a RoadGraph,
}

impl Forecaster for StginForecaster<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forecast(&self, input: &Tensor, horizon: usize) -> Result<Tensor> {
        if horizon != self.model.dims.horizon {
            return Err(Error::dim(
                "stgin horizon",
                &[horizon],
                &[self.model.dims.horizon],
            ));
        }
        Ok(self.model.forward(input, None, self.graph)?.values)
    }
}
