use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baselines::Forecaster;
use super::metrics::MetricAccumulator;
use crate::data::{Normalization, SampleWindow, STEP_MINUTES};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const STANDARD_HORIZONS_MIN: [usize; 4] = [15, 30, 45, 60];

/// Reporting horizons (minutes) reachable with `horizon` forecast steps. If
/// none of the standard ones fit, the full horizon is used.
pub fn horizons_for(horizon: usize) -> Vec<usize> {
    let hs: Vec<usize> = STANDARD_HORIZONS_MIN
        .into_iter()
        .filter(|m| m / STEP_MINUTES <= horizon)
        .collect();
    if hs.is_empty() {
        vec![horizon * STEP_MINUTES]
    } else {
        hs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Normalized,
    Raw,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Normalized => "normalized",
            Scale::Raw => "raw",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub horizon_min: usize,
    pub method: String,
    pub scale: Scale,
    pub mae: f64,
    pub rmse: f64,
    pub accuracy: f64,
}

impl fmt::Display for EvalRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} horizon={}min method={} scale={} mae={:.6} rmse={:.6} accuracy={:.6}",
            self.dataset, self.horizon_min, self.method, self.scale, self.mae, self.rmse, self.accuracy
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub loss_trace: Vec<f64>,
}

impl EvalReport {
    pub fn find(&self, horizon_min: usize, method: &str, scale: Scale) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.horizon_min == horizon_min && r.method == method && r.scale == scale)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,horizon_min,method,scale,mae,rmse,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.dataset, r.horizon_min, r.method, r.scale, r.mae, r.rmse, r.accuracy
            ));
        }
        out
    }

    pub fn to_log(&self) -> String {
        self.rows.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Forecasts every window (in parallel, order preserved).
pub fn predict_all(
    method: &dyn Forecaster,
    windows: &[SampleWindow],
    horizon: usize,
) -> Result<Vec<Tensor>> {
    windows
        .par_iter()
        .map(|w| {
            let p = method.forecast(&w.input, horizon)?;
            if p.shape() != w.target.shape() {
                return Err(Error::dim("forecast", p.shape(), w.target.shape()));
            }
            Ok(p)
        })
        .collect()
}

/// Metric rows for one method's predictions: every reachable horizon, on
/// the normalised scale and, when `norm` is given, the raw scale. Horizon
/// `h` pools the first `h/5` forecast steps of every window.
pub fn score(
    dataset: &str,
    method: &str,
    windows: &[SampleWindow],
    predictions: &[Tensor],
    norm: Option<Normalization>,
) -> Result<Vec<EvalRow>> {
    let Some(first) = windows.first() else {
        return Err(Error::Data("no windows to evaluate".into()));
    };
    let [horizon, n] = *first.target.shape() else {
        return Err(Error::dim("target", first.target.shape(), &[]));
    };
    let mut rows = Vec::new();
    for h_min in horizons_for(horizon) {
        let steps = (h_min / STEP_MINUTES).min(horizon);
        let mut scales = vec![(Scale::Normalized, MetricAccumulator::default())];
        if norm.is_some() {
            scales.push((Scale::Raw, MetricAccumulator::default()));
        }
        for (w, p) in windows.iter().zip(predictions) {
            let y = &w.target.data()[..steps * n];
            let y_hat = &p.data()[..steps * n];
            scales[0].1.push(y, y_hat);
            if let (Some(nm), Some((_, acc))) = (norm, scales.get_mut(1)) {
                let y: Vec<f64> = y.iter().map(|&v| nm.inverse(v)).collect();
                let y_hat: Vec<f64> = y_hat.iter().map(|&v| nm.inverse(v)).collect();
                acc.push(&y, &y_hat);
            }
        }
        for (scale, acc) in scales {
            rows.push(EvalRow {
                dataset: dataset.to_string(),
                horizon_min: h_min,
                method: method.to_string(),
                scale,
                mae: acc.mae(),
                rmse: acc.rmse(),
                accuracy: acc.accuracy()?,
            });
        }
    }
    Ok(rows)
}

/// Forecasts and scores every method over the test windows.
pub fn evaluate(
    dataset: &str,
    methods: &[&dyn Forecaster],
    windows: &[SampleWindow],
    norm: Option<Normalization>,
) -> Result<EvalReport> {
    let horizon = windows
        .first()
        .ok_or_else(|| Error::Data("no windows to evaluate".into()))?
        .target
        .shape()[0];
    let mut report = EvalReport::default();
    for m in methods {
        let preds = predict_all(*m, windows, horizon)?;
        report.rows.extend(score(dataset, m.name(), windows, &preds, norm)?);
    }
    Ok(report)
}

/// `(time step, truth, prediction)` for `node` at `steps` ahead, with the
/// values mapped back to raw units when `norm` is given.
pub fn node_series(
    windows: &[SampleWindow],
    predictions: &[Tensor],
    node: usize,
    steps: usize,
    norm: Option<Normalization>,
) -> Result<Vec<(usize, f64, f64)>> {
    let Some(first) = windows.first() else {
        return Ok(Vec::new());
    };
    let [horizon, n] = *first.target.shape() else {
        return Err(Error::dim("target", first.target.shape(), &[]));
    };
    if node >= n {
        return Err(Error::Parameter(format!("node index {node} is out of range for {n} nodes")));
    }
    if steps == 0 || steps > horizon {
        return Err(Error::Parameter(format!("step {steps} outside 1..={horizon}")));
    }
    let e = first.input.shape()[0];
    let back = |v: f64| norm.map_or(v, |nm| nm.inverse(v));
    Ok(windows
        .iter()
        .zip(predictions)
        .map(|(w, p)| {
            let idx = (steps - 1) * n + node;
            (
                w.t_start + e + steps - 1,
                back(w.target.data()[idx]),
                back(p.data()[idx]),
            )
        })
        .collect())
}
