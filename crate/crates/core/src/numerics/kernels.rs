//! Slice-level kernels shared by the eager operations and the tape.
//!
//! Everything here works on flat row-major buffers. Shapes are passed
//! explicitly and are assumed to be validated by the caller.

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cj += dot(arow, brow);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Row-wise softmax over `rows × cols` blocks. `mask` (length `mask_rows ×
/// cols`, cycled over blocks of rows) marks admissible entries; masked entries
/// come out as exactly zero.
pub fn softmax_rows(x: &[f64], out: &mut [f64], cols: usize, mask: Option<&[bool]>) {
    let rows = x.len() / cols;
    let mask_rows = mask.map_or(0, |m| m.len() / cols);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mr = mask.map(|m| {
            let mi = r % mask_rows;
            &m[mi * cols..(mi + 1) * cols]
        });
        let admissible = |j: usize| mr.is_none_or(|m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if admissible(j) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (j, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
            if admissible(j) {
                *o = (v - max).exp();
                sum += *o;
            } else {
                *o = 0.0;
            }
        }
        if sum > 0.0 {
            let inv = 1.0 / sum;
            or.iter_mut().for_each(|o| *o *= inv);
        }
    }
}

/// Gradient of row-wise softmax given its output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], dx: &mut [f64], cols: usize) {
    let rows = y.len() / cols;
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        let yr = &y[s.clone()];
        let dyr = &dy[s.clone()];
        let inner = dot(yr, dyr);
        for ((d, &yv), &g) in dx[s].iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - inner);
        }
    }
}

/// Output length of a padded, strided max-pool.
pub fn pool_out_len(len: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

/// Same-padded cross-correlation along time.
///
/// `x: batch×len×c_in`, `kernels: c_out×c_in×width`. `taps` must hold the
/// kernel re-laid as `width` matrices of shape `c_in×c_out` (see
/// [`conv_taps`]).
pub fn conv1d_forward(
    x: &[f64],
    taps: &[f64],
    out: &mut [f64],
    batch: usize,
    len: usize,
    c_in: usize,
    c_out: usize,
    width: usize,
) {
    let half = width / 2;
    for b in 0..batch {
        let xb = &x[b * len * c_in..(b + 1) * len * c_in];
        let ob = &mut out[b * len * c_out..(b + 1) * len * c_out];
        for s in 0..width {
            let (t0, t1) = tap_range(len, s, half);
            if t0 >= t1 {
                continue;
            }
            let src0 = t0 + s - half;
            let tap = &taps[s * c_in * c_out..(s + 1) * c_in * c_out];
            gemm_nn(
                &xb[src0 * c_in..(src0 + t1 - t0) * c_in],
                tap,
                &mut ob[t0 * c_out..t1 * c_out],
                t1 - t0,
                c_in,
                c_out,
            );
        }
    }
}

/// Gradients of [`conv1d_forward`] with respect to input and taps.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    taps: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dtaps: Option<&mut [f64]>,
    batch: usize,
    len: usize,
    c_in: usize,
    c_out: usize,
    width: usize,
) {
    let half = width / 2;
    if let Some(dx) = dx {
        for b in 0..batch {
            let db = &dout[b * len * c_out..(b + 1) * len * c_out];
            let dxb = &mut dx[b * len * c_in..(b + 1) * len * c_in];
            for s in 0..width {
                let (t0, t1) = tap_range(len, s, half);
                if t0 >= t1 {
                    continue;
                }
                let src0 = t0 + s - half;
                let tap = &taps[s * c_in * c_out..(s + 1) * c_in * c_out];
                gemm_nt(
                    &db[t0 * c_out..t1 * c_out],
                    tap,
                    &mut dxb[src0 * c_in..(src0 + t1 - t0) * c_in],
                    t1 - t0,
                    c_out,
                    c_in,
                );
            }
        }
    }
    if let Some(dtaps) = dtaps {
        for b in 0..batch {
            let xb = &x[b * len * c_in..(b + 1) * len * c_in];
            let db = &dout[b * len * c_out..(b + 1) * len * c_out];
            for s in 0..width {
                let (t0, t1) = tap_range(len, s, half);
                if t0 >= t1 {
                    continue;
                }
                let src0 = t0 + s - half;
                gemm_tn(
                    &xb[src0 * c_in..(src0 + t1 - t0) * c_in],
                    &db[t0 * c_out..t1 * c_out],
                    &mut dtaps[s * c_in * c_out..(s + 1) * c_in * c_out],
                    c_in,
                    t1 - t0,
                    c_out,
                );
            }
        }
    }
}

/// Output rows `t0..t1` whose source row `t + s - half` lies inside the series.
fn tap_range(len: usize, s: usize, half: usize) -> (usize, usize) {
    let t0 = half.saturating_sub(s);
    let t1 = (len + half).saturating_sub(s).min(len);
    (t0, t1)
}

/// Re-lays `c_out×c_in×width` kernels into `width` blocks of `c_in×c_out`.
pub fn conv_taps(kernels: &[f64], c_out: usize, c_in: usize, width: usize) -> Vec<f64> {
    let mut taps = vec![0.0; kernels.len()];
    for o in 0..c_out {
        for i in 0..c_in {
            for s in 0..width {
                taps[s * c_in * c_out + i * c_out + o] = kernels[(o * c_in + i) * width + s];
            }
        }
    }
    taps
}

/// Inverse of [`conv_taps`].
pub fn taps_to_kernels(taps: &[f64], c_out: usize, c_in: usize, width: usize) -> Vec<f64> {
    let mut kernels = vec![0.0; taps.len()];
    for o in 0..c_out {
        for i in 0..c_in {
            for s in 0..width {
                kernels[(o * c_in + i) * width + s] = taps[s * c_in * c_out + i * c_out + o];
            }
        }
    }
    kernels
}

/// Max-pool along time for `batch×len×channels`, padding with −∞. Returns the
/// pooled values and the flat source index of each maximum.
pub fn maxpool1d_forward(
    x: &[f64],
    batch: usize,
    len: usize,
    channels: usize,
    window: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![f64::NEG_INFINITY; batch * out_len * channels];
    let mut arg = vec![usize::MAX; batch * out_len * channels];
    for b in 0..batch {
        for t in 0..out_len {
            let start = (t * stride) as isize - pad as isize;
            for w in 0..window {
                let src = start + w as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let src = src as usize;
                for c in 0..channels {
                    let si = (b * len + src) * channels + c;
                    let oi = (b * out_len + t) * channels + c;
                    if x[si] > out[oi] || arg[oi] == usize::MAX {
                        out[oi] = x[si];
                        arg[oi] = si;
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Layer normalisation over the trailing `width` entries of each row.
/// Returns the normalised rows and per-row inverse standard deviations.
pub fn layer_norm_forward(x: &[f64], width: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().sum::<f64>() / width as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, &v) in y[r * width..(r + 1) * width].iter_mut().zip(xr) {
            *o = (v - mean) * is;
        }
    }
    (y, inv_std)
}

pub fn layer_norm_backward(y: &[f64], inv_std: &[f64], dy: &[f64], dx: &mut [f64], width: usize) {
    let n = width as f64;
    for (r, &is) in inv_std.iter().enumerate() {
        let s = r * width..(r + 1) * width;
        let yr = &y[s.clone()];
        let dyr = &dy[s.clone()];
        let mean_dy = dyr.iter().sum::<f64>() / n;
        let mean_dyy = dot(dyr, yr) / n;
        for ((d, &g), &yv) in dx[s].iter_mut().zip(dyr).zip(yr) {
            *d += is * (g - mean_dy - yv * mean_dyy);
        }
    }
}

/// Permutes the axes of a row-major array. `axes[k]` names the input axis that
/// becomes output axis `k`.
pub fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * shape[k + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let inner_len = *out_shape.last().unwrap_or(&1);
    let inner_stride = *strides.last().unwrap_or(&1);
    let outer: usize = out_shape[..rank.saturating_sub(1)].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&strides)
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        for k in (0..rank - 1).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (k, &a) in axes.iter().enumerate() {
        inv[a] = k;
    }
    inv
}
