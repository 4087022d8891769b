//! Training, metrics, reference forecasters and evaluation reports.

pub mod baselines;
pub mod evaluate;
pub mod metrics;
pub mod train;

pub use baselines::{
    Forecaster, HistoricalAverage, LinearAr, Persistence, StginForecaster, DEFAULT_AR_ORDER,
};
pub use evaluate::{
    evaluate, horizons_for, node_series, predict_all, score, EvalReport, EvalRow, Scale,
};
pub use metrics::{accuracy, mae, mse_loss, rmse, MetricAccumulator};
pub use train::{batch_gradients, sample_gradients, train, write_loss_csv, Adam, TrainConfig};
