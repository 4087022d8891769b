use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check(op: &'static str, y: &Tensor, y_hat: &Tensor) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::dim(op, y.shape(), y_hat.shape()));
    }
    if y.is_empty() {
        return Err(Error::Data(format!("{op} of empty tensors")));
    }
    Ok(())
}

/// Mean of squared elementwise differences.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check("mse_loss", pred, target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn rmse(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    Ok(mse_loss(y_hat, y)?.sqrt())
}

pub fn mae(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    check("mae", y, y_hat)?;
    let s: f64 = y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.len() as f64)
}

/// `1 − ‖Y − Ŷ‖_F / ‖Y‖_F`.
pub fn accuracy(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    check("accuracy", y, y_hat)?;
    let mut acc = MetricAccumulator::default();
    acc.push(y.data(), y_hat.data());
    acc.accuracy()
}

/// Running sums for the three metrics over many windows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    pub count: usize,
    pub sum_abs: f64,
    pub sum_sq: f64,
    pub sum_sq_truth: f64,
}

impl MetricAccumulator {
    pub fn push(&mut self, y: &[f64], y_hat: &[f64]) {
        for (a, b) in y.iter().zip(y_hat) {
            let e = a - b;
            self.sum_abs += e.abs();
            self.sum_sq += e * e;
            self.sum_sq_truth += a * a;
        }
        self.count += y.len();
    }

    pub fn mae(&self) -> f64 {
        self.sum_abs / self.count as f64
    }

    pub fn rmse(&self) -> f64 {
        (self.sum_sq / self.count as f64).sqrt()
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.sum_sq_truth <= 0.0 {
            return Err(Error::Data(
                "ground truth has zero norm; accuracy is undefined".into(),
            ));
        }
        Ok(1.0 - (self.sum_sq / self.sum_sq_truth).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn examples() {
        let y = v(&[3.0, 4.0]);
        let z = v(&[0.0, 0.0]);
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(accuracy(&y, &z).unwrap(), 0.0);
        assert!((rmse(&y, &z).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae(&y, &z).unwrap(), 3.5);
        assert!(accuracy(&z, &y).is_err());
        assert_eq!(mse_loss(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), 1.0);
        assert!(mse_loss(&v(&[0.0]), &v(&[1.0, 1.0])).is_err());
    }
}
