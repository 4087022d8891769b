//! Eager (tape-free) versions of the primitive operations.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::dim(op, t.shape(), &[])),
    }
}

/// Matrix product of `m×k` and `k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (kb, n) = require_matrix("matmul", b)?;
    if k != kb {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax of every row of a matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = require_matrix("softmax_rows", x)?;
    let mut out = vec![0.0; x.len()];
    if n > 0 {
        kernels::softmax_rows(x.data(), &mut out, n, None);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::Parameter(format!(
            "leaky ReLU slope must lie in (0, 1), got {slope}"
        )));
    }
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

pub fn elu(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { v.exp_m1() })
}

/// Same-padded cross-correlation along time: `L×c_in` with `c_out×c_in×w`
/// kernels gives `L×c_out`.
pub fn conv1d_time(x: &Tensor, kernels_: &Tensor) -> Result<Tensor> {
    let (len, c_in) = require_matrix("conv1d_time", x)?;
    let [c_out, kc_in, width] = *kernels_.shape() else {
        return Err(Error::dim("conv1d_time", x.shape(), kernels_.shape()));
    };
    if kc_in != c_in {
        return Err(Error::dim("conv1d_time", x.shape(), kernels_.shape()));
    }
    if width % 2 == 0 {
        return Err(Error::Parameter(format!(
            "convolution width must be odd, got {width}"
        )));
    }
    let taps = kernels::conv_taps(kernels_.data(), c_out, c_in, width);
    let mut out = vec![0.0; len * c_out];
    kernels::conv1d_forward(x.data(), &taps, &mut out, 1, len, c_in, c_out, width);
    Tensor::new(vec![len, c_out], out)
}

/// Max-pool of an `L×c` series along time with −∞ padding.
pub fn maxpool1d(x: &Tensor, window: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (len, ch) = require_matrix("maxpool1d", x)?;
    if window == 0 || stride == 0 {
        return Err(Error::Parameter(format!(
            "max-pool window and stride must be positive (window {window}, stride {stride})"
        )));
    }
    if pad >= window {
        return Err(Error::Parameter(format!(
            "max-pool padding {pad} must be smaller than window {window}"
        )));
    }
    let out_len = kernels::pool_out_len(len, window, stride, pad).ok_or_else(|| {
        Error::Parameter(format!("series of length {len} too short for window {window}"))
    })?;
    let (out, _) = kernels::maxpool1d_forward(x.data(), 1, len, ch, window, stride, pad, out_len);
    Tensor::new(vec![out_len, ch], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        assert_eq!(
            matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap(),
            m(&[&[11.0]])
        );
        let z = matmul(&Tensor::zeros(&[2, 2]), &m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]])).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[2], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[3], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[4], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[5], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::vector(vec![2.0, -1.0, 0.0]);
        assert_eq!(leaky_relu(&x, 0.2).unwrap().data(), &[2.0, -0.2, 0.0]);
        assert!(leaky_relu(&x, 1.5).is_err());
        assert!(leaky_relu(&x, 0.0).is_err());
        let e = elu(&Tensor::vector(vec![3.0, 0.0, -1.0]));
        assert_eq!(e.data()[0], 3.0);
        assert_eq!(e.data()[1], 0.0);
        assert_abs_diff_eq!(e.data()[2], (-1f64).exp() - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.data()[2], -0.63212, epsilon = 1e-5);
    }

    #[test]
    fn conv_examples() {
        let series = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let id = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv1d_time(&series, &id).unwrap(), series);
        let shift = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(conv1d_time(&series, &shift).unwrap().data(), &[0.0, 1.0, 2.0]);
        let zero = Tensor::zeros(&[1, 1, 3]);
        assert!(conv1d_time(&series, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            conv1d_time(&series, &Tensor::zeros(&[1, 1, 2])),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool1d(&x, 3, 2, 1).unwrap().data(), &[2.0, 4.0]);
        let c = Tensor::filled(&[6, 2], 1.5);
        let p = maxpool1d(&c, 3, 2, 1).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert!(p.data().iter().all(|&v| v == 1.5));
        assert!(maxpool1d(&x, 0, 2, 0).is_err());
        assert!(maxpool1d(&x, 3, 0, 1).is_err());
    }
}
