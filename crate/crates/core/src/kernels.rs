//! Computational kernels behind the graph ops.
//!
//! Every kernel is a plain function over flat row-major buffers, written so the
//! innermost loop runs over the contiguous last axis. Convolutions treat 2D
//! spatial data as 3D with a unit leading extent, which keeps one code path for
//! both view ranks.

use crate::scalar::Scalar;

/// Tanh-approximation constant sqrt(2/pi), pinned to these digits so outputs
/// are reproducible bit-for-bit from the documented formula.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
pub const GELU_CUBIC: f64 = 0.044715;

// ---------------------------------------------------------------------------
// Matrix products (all accumulate into `out`)
// ---------------------------------------------------------------------------

/// out[n,m] += a[n,k] * b[k,m]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * m..(p + 1) * m];
            for j in 0..m {
                out_row[j] += aip * b_row[j];
            }
        }
    }
}

/// out[n,m] += a[n,k] * b[m,k]^T  (b stored row-major as [m,k])
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out_row[j] += acc;
        }
    }
}

/// out[k,m] += a[n,k]^T * b[n,m]  (a stored row-major as [n,k])
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let b_row = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            let out_row = &mut out[p * m..(p + 1) * m];
            for j in 0..m {
                out_row[j] += aip * b_row[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Row softmax / log-softmax
// ---------------------------------------------------------------------------

pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
}

/// dx[r,c] = y[r,c] * (g[r,c] - sum_j g[r,j] y[r,j]), accumulated into dx.
pub fn softmax_rows_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    rows: usize,
    cols: usize,
    grad_gain: T,
    dx: &mut [T],
) {
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let g_row = &g[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for (&yv, &gv) in y_row.iter().zip(g_row) {
            dot += yv * gv;
        }
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for ((d, &yv), &gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
            *d += grad_gain * yv * (gv - dot);
        }
    }
}

pub fn logsoftmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
}

/// dx[r,c] += g[r,c] - exp(y[r,c]) * sum_j g[r,j], where y is the log-softmax output.
pub fn logsoftmax_rows_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    rows: usize,
    cols: usize,
    dx: &mut [T],
) {
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let g_row = &g[r * cols..(r + 1) * cols];
        let mut gsum = T::zero();
        for &gv in g_row {
            gsum += gv;
        }
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for ((d, &yv), &gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
            *d += gv - yv.exp() * gsum;
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-row layer norm over the last axis: y = gamma * (x - mean) / sqrt(var + eps) + beta.
/// Also writes each row's 1/sqrt(var+eps) into `inv_std` for the backward pass.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    cols: usize,
    eps: T,
    out: &mut [T],
    inv_std: &mut [T],
) {
    let inv_n = T::one() / T::from_f64(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            out_row[j] = gamma[j] * (row[j] - mean) * inv + beta[j];
        }
    }
}

/// Backward for [`layer_norm_rows`]. Accumulates into dx, dgamma, dbeta.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    g: &[T],
    inv_std: &[T],
    rows: usize,
    cols: usize,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let inv_n = T::one() / T::from_f64(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let g_row = &g[r * cols..(r + 1) * cols];
        let inv = inv_std[r];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_n;

        // mean of gamma.g and of gamma.g.xhat over the row
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..cols {
            let gg = gamma[j] * g_row[j];
            let xh = (row[j] - mean) * inv;
            m1 += gg;
            m2 += gg * xh;
        }
        m1 *= inv_n;
        m2 *= inv_n;

        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let xh = (row[j] - mean) * inv;
            dx_row[j] += (gamma[j] * g_row[j] - m1 - xh * m2) * inv;
            dgamma[j] += g_row[j] * xh;
            dbeta[j] += g_row[j];
        }
    }
}

/// Layer norm over the leading (channel) axis of a [C, spatial...] map, one
/// statistic per spatial position. Streams row-major twice instead of
/// transposing to token layout. Writes 1/sqrt(var+eps) per position.
pub fn channel_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    channels: usize,
    positions: usize,
    eps: T,
    out: &mut [T],
    inv_std: &mut [T],
) {
    let inv_c = T::one() / T::from_f64(channels as f64);
    let mut mean = vec![T::zero(); positions];
    let mut sq = vec![T::zero(); positions];
    for c in 0..channels {
        let row = &x[c * positions..(c + 1) * positions];
        for j in 0..positions {
            mean[j] += row[j];
            sq[j] += row[j] * row[j];
        }
    }
    for j in 0..positions {
        mean[j] *= inv_c;
        let var = sq[j] * inv_c - mean[j] * mean[j];
        // clamp: catastrophic cancellation can drive tiny variances negative
        let var = if var > T::zero() { var } else { T::zero() };
        inv_std[j] = T::one() / (var + eps).sqrt();
    }
    for c in 0..channels {
        let row = &x[c * positions..(c + 1) * positions];
        let out_row = &mut out[c * positions..(c + 1) * positions];
        for j in 0..positions {
            out_row[j] = gamma[c] * (row[j] - mean[j]) * inv_std[j] + beta[c];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn channel_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    g: &[T],
    inv_std: &[T],
    channels: usize,
    positions: usize,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let inv_c = T::one() / T::from_f64(channels as f64);
    let mut mean = vec![T::zero(); positions];
    for c in 0..channels {
        let row = &x[c * positions..(c + 1) * positions];
        for j in 0..positions {
            mean[j] += row[j];
        }
    }
    for j in 0..positions {
        mean[j] *= inv_c;
    }

    let mut m1 = vec![T::zero(); positions];
    let mut m2 = vec![T::zero(); positions];
    for c in 0..channels {
        let row = &x[c * positions..(c + 1) * positions];
        let g_row = &g[c * positions..(c + 1) * positions];
        let mut dg = T::zero();
        let mut db = T::zero();
        for j in 0..positions {
            let gg = gamma[c] * g_row[j];
            let xh = (row[j] - mean[j]) * inv_std[j];
            m1[j] += gg;
            m2[j] += gg * xh;
            dg += g_row[j] * xh;
            db += g_row[j];
        }
        dgamma[c] += dg;
        dbeta[c] += db;
    }
    for j in 0..positions {
        m1[j] *= inv_c;
        m2[j] *= inv_c;
    }
    for c in 0..channels {
        let row = &x[c * positions..(c + 1) * positions];
        let g_row = &g[c * positions..(c + 1) * positions];
        let dx_row = &mut dx[c * positions..(c + 1) * positions];
        for j in 0..positions {
            let xh = (row[j] - mean[j]) * inv_std[j];
            dx_row[j] += (gamma[c] * g_row[j] - m1[j] - xh * m2[j]) * inv_std[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), unified 3D; 2D passes a unit depth axis
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_extent(in_len: usize, k: usize, stride: usize, pad: usize) -> usize {
        (in_len + 2 * pad - k) / stride + 1
    }
}

/// Output index range [start, end) along one axis for which the input index
/// `o*stride + k_off - pad` stays within [0, in_len).
fn valid_out_range(out_len: usize, in_len: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let start = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let last_in = in_len + pad;
    let end = if k_off >= last_in {
        0
    } else {
        (((last_in - 1 - k_off) / stride) + 1).min(out_len)
    };
    (start.min(end), end)
}

pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], geom: &ConvGeom, out: &mut [T]) {
    let [id_, ih, iw] = geom.in_sp;
    let [od, oh, ow] = geom.out_sp;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let in_vol = id_ * in_plane;
    let out_vol = od * out_plane;

    for co in 0..geom.c_out {
        let b = bias[co];
        for v in &mut out[co * out_vol..(co + 1) * out_vol] {
            *v = b;
        }
    }

    for co in 0..geom.c_out {
        for ci in 0..geom.c_in {
            let x_ch = &x[ci * in_vol..(ci + 1) * in_vol];
            let w_base = ((co * geom.c_in + ci) * kd * kh * kw) as usize;
            for zk in 0..kd {
                let (z0, z1) = valid_out_range(od, id_, zk, sd, pd);
                for yk in 0..kh {
                    let (y0, y1) = valid_out_range(oh, ih, yk, sh, ph);
                    for xk in 0..kw {
                        let (x0, x1) = valid_out_range(ow, iw, xk, sw, pw);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w[w_base + (zk * kh + yk) * kw + xk];
                        for z in z0..z1 {
                            let iz = z * sd + zk - pd;
                            for y in y0..y1 {
                                let iy = y * sh + yk - ph;
                                let o_base = co * out_vol + z * out_plane + y * ow;
                                let i_base = iz * in_plane + iy * iw + x0 * sw + xk - pw;
                                let o_row = &mut out[o_base + x0..o_base + x1];
                                if sw == 1 {
                                    let i_row = &x_ch[i_base..i_base + (x1 - x0)];
                                    for (o, &i) in o_row.iter_mut().zip(i_row) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for (n, o) in o_row.iter_mut().enumerate() {
                                        *o += wv * x_ch[i_base + n * sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the input gradient of a convolution into `dx`.
pub fn conv_backward_data<T: Scalar>(g: &[T], w: &[T], geom: &ConvGeom, dx: &mut [T]) {
    let [id_, ih, iw] = geom.in_sp;
    let [od, oh, ow] = geom.out_sp;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let in_vol = id_ * in_plane;
    let out_vol = od * out_plane;

    for co in 0..geom.c_out {
        let g_ch = &g[co * out_vol..(co + 1) * out_vol];
        for ci in 0..geom.c_in {
            let dx_ch = &mut dx[ci * in_vol..(ci + 1) * in_vol];
            let w_base = (co * geom.c_in + ci) * kd * kh * kw;
            for zk in 0..kd {
                let (z0, z1) = valid_out_range(od, id_, zk, sd, pd);
                for yk in 0..kh {
                    let (y0, y1) = valid_out_range(oh, ih, yk, sh, ph);
                    for xk in 0..kw {
                        let (x0, x1) = valid_out_range(ow, iw, xk, sw, pw);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w[w_base + (zk * kh + yk) * kw + xk];
                        for z in z0..z1 {
                            let iz = z * sd + zk - pd;
                            for y in y0..y1 {
                                let iy = y * sh + yk - ph;
                                let g_base = z * out_plane + y * ow;
                                let i_base = iz * in_plane + iy * iw + x0 * sw + xk - pw;
                                let g_row = &g_ch[g_base + x0..g_base + x1];
                                if sw == 1 {
                                    let dx_row = &mut dx_ch[i_base..i_base + (x1 - x0)];
                                    for (d, &gv) in dx_row.iter_mut().zip(g_row) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for (n, &gv) in g_row.iter().enumerate() {
                                        dx_ch[i_base + n * sw] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients of a convolution into `dw`, `db`.
pub fn conv_backward_weights<T: Scalar>(
    x: &[T],
    g: &[T],
    geom: &ConvGeom,
    dw: &mut [T],
    db: &mut [T],
) {
    let [id_, ih, iw] = geom.in_sp;
    let [od, oh, ow] = geom.out_sp;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let in_vol = id_ * in_plane;
    let out_vol = od * out_plane;

    for co in 0..geom.c_out {
        let g_ch = &g[co * out_vol..(co + 1) * out_vol];
        let mut acc = T::zero();
        for &gv in g_ch {
            acc += gv;
        }
        db[co] += acc;

        for ci in 0..geom.c_in {
            let x_ch = &x[ci * in_vol..(ci + 1) * in_vol];
            let w_base = (co * geom.c_in + ci) * kd * kh * kw;
            for zk in 0..kd {
                let (z0, z1) = valid_out_range(od, id_, zk, sd, pd);
                for yk in 0..kh {
                    let (y0, y1) = valid_out_range(oh, ih, yk, sh, ph);
                    for xk in 0..kw {
                        let (x0, x1) = valid_out_range(ow, iw, xk, sw, pw);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for z in z0..z1 {
                            let iz = z * sd + zk - pd;
                            for y in y0..y1 {
                                let iy = y * sh + yk - ph;
                                let g_base = z * out_plane + y * ow;
                                let i_base = iz * in_plane + iy * iw + x0 * sw + xk - pw;
                                let g_row = &g_ch[g_base + x0..g_base + x1];
                                if sw == 1 {
                                    let x_row = &x_ch[i_base..i_base + (x1 - x0)];
                                    for (&gv, &xv) in g_row.iter().zip(x_row) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for (n, &gv) in g_row.iter().enumerate() {
                                        acc += gv * x_ch[i_base + n * sw];
                                    }
                                }
                            }
                        }
                        dw[w_base + (zk * kh + yk) * kw + xk] += acc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Axis-swap copy (transpose)
// ---------------------------------------------------------------------------

/// Copies `x` (shape `in_shape`) with axes `ax0` and `ax1` swapped.
pub fn transpose_copy<T: Scalar>(x: &[T], in_shape: &[usize], ax0: usize, ax1: usize, out: &mut [T]) {
    let rank = in_shape.len();
    let (a, b) = if ax0 < ax1 { (ax0, ax1) } else { (ax1, ax0) };
    debug_assert!(b < rank);

    let outer: usize = in_shape[..a].iter().product();
    let la = in_shape[a];
    let mid: usize = in_shape[a + 1..b].iter().product();
    let lb = in_shape[b];
    let inner: usize = in_shape[b + 1..].iter().product();

    // x viewed as [outer, la, mid, lb, inner]; out as [outer, lb, mid, la, inner]
    for o in 0..outer {
        let x_o = o * la * mid * lb * inner;
        let y_o = o * la * mid * lb * inner;
        for ia in 0..la {
            for im in 0..mid {
                for ib in 0..lb {
                    let src = x_o + ((ia * mid + im) * lb + ib) * inner;
                    let dst = y_o + ((ib * mid + im) * la + ia) * inner;
                    if inner == 1 {
                        out[dst] = x[src];
                    } else {
                        out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsampling by 2 along selected axes
// ---------------------------------------------------------------------------

/// Output shape of doubling `axes` of `in_shape`.
pub fn upsampled_shape(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    in_shape
        .iter()
        .enumerate()
        .map(|(i, &e)| if axes.contains(&i) { 2 * e } else { e })
        .collect()
}

/// Walks output positions row-major while tracking the matching input offset,
/// calling `visit(out_index, in_index)` once per output element.
fn upsample_walk(in_shape: &[usize], axes: &[usize], mut visit: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let out_shape = upsampled_shape(in_shape, axes);
    let in_strides = crate::tensor::strides_of(in_shape);
    let doubled: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
    let out_numel: usize = out_shape.iter().product();

    let mut coord = vec![0usize; rank];
    let mut src = 0usize;
    for oi in 0..out_numel {
        visit(oi, src);
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                if !doubled[d] || coord[d] % 2 == 0 {
                    src += in_strides[d];
                }
                break;
            }
            coord[d] = 0;
            src -= (in_shape[d] - 1) * in_strides[d];
        }
    }
}

/// Doubles each axis in `axes` of `in_shape` by nearest-neighbor repetition.
pub fn upsample2x<T: Scalar>(x: &[T], in_shape: &[usize], axes: &[usize], out: &mut [T]) {
    upsample_walk(in_shape, axes, |oi, src| out[oi] = x[src]);
}

/// Adjoint of [`upsample2x`]: sums each replicated block back, accumulating into `dx`.
pub fn upsample2x_backward<T: Scalar>(g: &[T], in_shape: &[usize], axes: &[usize], dx: &mut [T]) {
    upsample_walk(in_shape, axes, |oi, src| dx[src] += g[oi]);
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent three-loop oracle for the fused/reordered product kernels.
    fn matmul_oracle(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    c[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        c
    }

    fn arange(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64) * 0.37 - 1.1).collect()
    }

    #[test]
    fn matmul_variants_agree_with_oracle() {
        let (n, k, m) = (3, 5, 4);
        let a = arange(n * k);
        let b = arange(k * m);
        let want = matmul_oracle(&a, &b, n, k, m);

        let mut c = vec![0.0; n * m];
        matmul_acc(&a, &b, n, k, m, &mut c);
        assert_eq!(c, want);

        // A * Bt where Bt stored as [m,k] equals A * B
        let mut bt = vec![0.0; k * m];
        transpose_copy(&b, &[k, m], 0, 1, &mut bt);
        let mut c2 = vec![0.0; n * m];
        matmul_nt_acc(&a, &bt, n, k, m, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // At^T * B with At stored as [k,n] equals A * B
        let mut at = vec![0.0; n * k];
        transpose_copy(&a, &[n, k], 0, 1, &mut at);
        let mut c3 = vec![0.0; n * m];
        matmul_tn_acc(&at, &b, k, n, m, &mut c3);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_matches_exp_normalize() {
        let x = vec![0.0, (3.0f64).ln(), 5.0, 5.0];
        let mut y = vec![0.0; 4];
        softmax_rows(&x, 2, 2, &mut y);
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
        assert!((y[2] - 0.5).abs() < 1e-12);
        assert!((y[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let x = vec![1000.0f32, 1000.0];
        let mut y = vec![0.0; 2];
        softmax_rows(&x, 1, 2, &mut y);
        assert!((y[0] - 0.5).abs() < 1e-6);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        // random-ish 3D case checked against a direct nested-loop oracle
        let geom = ConvGeom {
            c_in: 2,
            c_out: 3,
            in_sp: [2, 5, 4],
            out_sp: [2, 3, 2],
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
            pad: [0, 1, 1],
        };
        let x = arange(2 * 2 * 5 * 4);
        let w = arange(3 * 2 * 9);
        let b = vec![0.3, -0.5, 0.0];
        let mut out = vec![0.0; 3 * 2 * 3 * 2];
        conv_forward(&x, &w, &b, &geom, &mut out);

        let mut want = vec![0.0; out.len()];
        let [id_, ih, iw] = geom.in_sp;
        let [od, oh, ow] = geom.out_sp;
        for co in 0..3 {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..2 {
                            for kz in 0..1 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let izi = (z * 1 + kz) as isize - 0;
                                        let iyi = (y * 2 + ky) as isize - 1;
                                        let ixi = (xo * 2 + kx) as isize - 1;
                                        if izi < 0
                                            || iyi < 0
                                            || ixi < 0
                                            || izi >= id_ as isize
                                            || iyi >= ih as isize
                                            || ixi >= iw as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((ci * id_ + izi as usize) * ih + iyi as usize)
                                            * iw
                                            + ixi as usize;
                                        let wi = (((co * 2 + ci) * 1 + kz) * 3 + ky) * 3 + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        want[((co * od + z) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        for (got, want) in out.iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn conv_all_ones_kernel_sums_neighborhood() {
        // 2x2 input, 3x3 ones kernel, pad 1: every output sees the whole input
        let geom = ConvGeom {
            c_in: 1,
            c_out: 1,
            in_sp: [1, 2, 2],
            out_sp: [1, 2, 2],
            kernel: [1, 3, 3],
            stride: [1, 1, 1],
            pad: [0, 1, 1],
        };
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let w = vec![1.0; 9];
        let mut out = vec![0.0; 4];
        conv_forward(&x, &w, &[0.0], &geom, &mut out);
        assert_eq!(out, vec![10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn transpose_swaps_axes() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let mut y = vec![0.0; 24];
        transpose_copy(&x, &[2, 3, 4], 0, 1, &mut y);
        // element (i,j,k) of x lands at (j,i,k)
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y[(j * 2 + i) * 4 + k], x[(i * 3 + j) * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn upsample_replicates_and_backward_sums() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let mut y = vec![0.0; 16];
        upsample2x(&x, &[2, 2], &[0, 1], &mut y);
        assert_eq!(
            y,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let mut dx = vec![0.0; 4];
        upsample2x_backward(&y, &[2, 2], &[0, 1], &mut dx);
        assert_eq!(dx, vec![4.0, 8.0, 12.0, 16.0]);

        // selective axis: only the second doubles
        let mut y2 = vec![0.0; 8];
        upsample2x(&x, &[2, 2], &[1], &mut y2);
        assert_eq!(y2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn channel_norm_matches_token_layer_norm() {
        // [C, P] channel norm must equal transposing to [P, C] and row-norming
        let c = 5;
        let p = 7;
        let x: Vec<f64> = (0..c * p).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let gamma: Vec<f64> = (0..c).map(|i| 1.0 + 0.1 * i as f64).collect();
        let beta: Vec<f64> = (0..c).map(|i| -0.2 * i as f64).collect();

        let mut out = vec![0.0; c * p];
        let mut inv = vec![0.0; p];
        channel_norm(&x, &gamma, &beta, c, p, 1e-5, &mut out, &mut inv);

        let mut xt = vec![0.0; c * p];
        transpose_copy(&x, &[c, p], 0, 1, &mut xt);
        let mut yt = vec![0.0; c * p];
        let mut inv2 = vec![0.0; p];
        layer_norm_rows(&xt, &gamma, &beta, p, c, 1e-5, &mut yt, &mut inv2);
        let mut want = vec![0.0; c * p];
        transpose_copy(&yt, &[p, c], 0, 1, &mut want);

        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_pinned_values() {
        let x = vec![1.0f64, 2.0, 3.0];
        let mut y = vec![0.0; 3];
        let mut inv = vec![0.0];
        layer_norm_rows(&x, &[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], 1, 3, 1e-5, &mut y, &mut inv);
        assert!((y[0] - -1.22474).abs() < 1e-4, "{}", y[0]);
        assert!(y[1].abs() < 1e-9);
        assert!((y[2] - 1.22474).abs() < 1e-4);
    }
}
