//! Forward/backward kernel pairs for the compute-heavy ops. These work on
//! flat slices plus shapes; `ops` validates and records, `tape` replays.

use crate::error::{CxvError, Result};
use crate::scalar::Scalar;
use crate::tensor::shape::{
    broadcast_shapes, broadcast_strides, numel, row_major_strides, split_tail, zip_broadcast,
};

// ---- batched matrix multiply ---------------------------------------------

/// Logical dims of the last-two-dims matrix of `shape` under `trans`.
fn mat_dims(shape: &[usize], trans: bool) -> (usize, usize) {
    let m = shape[shape.len() - 2];
    let n = shape[shape.len() - 1];
    if trans {
        (n, m)
    } else {
        (m, n)
    }
}

/// Row/col strides of a stored row-major `[r, c]` matrix viewed either
/// plainly or transposed.
fn view_strides(stored_cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, stored_cols as isize)
    } else {
        (stored_cols as isize, 1)
    }
}

/// Per-batch-cell element offsets into `a` and `b` for a broadcast matmul,
/// plus the broadcast leading shape.
fn matmul_lead(
    a_shape: &[usize],
    b_shape: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (a_lead, a_mat) = split_tail(a_shape, 2);
    let (b_lead, b_mat) = split_tail(b_shape, 2);
    let lead = broadcast_shapes(a_lead, b_lead)?;
    let a_cell = a_mat[0] * a_mat[1];
    let b_cell = b_mat[0] * b_mat[1];
    let a_strides: Vec<usize> = broadcast_strides(a_lead, &lead)
        .into_iter()
        .map(|s| s * a_cell)
        .collect();
    let b_strides: Vec<usize> = broadcast_strides(b_lead, &lead)
        .into_iter()
        .map(|s| s * b_cell)
        .collect();
    Ok((lead, a_strides, b_strides))
}

pub fn matmul_out_shape(
    a_shape: &[usize],
    trans_a: bool,
    b_shape: &[usize],
    trans_b: bool,
) -> Result<Vec<usize>> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(CxvError::Dim(format!(
            "matmul needs rank >= 2 operands: {a_shape:?} vs {b_shape:?}"
        )));
    }
    let (m, ka) = mat_dims(a_shape, trans_a);
    let (kb, n) = mat_dims(b_shape, trans_b);
    if ka != kb {
        return Err(CxvError::Dim(format!(
            "matmul inner dimensions disagree: {a_shape:?} (trans={trans_a}) vs {b_shape:?} (trans={trans_b})"
        )));
    }
    let (lead, _, _) = matmul_lead(a_shape, b_shape)?;
    let mut out = lead;
    out.push(m);
    out.push(n);
    Ok(out)
}

pub fn matmul_forward<E: Scalar>(
    a: &[E],
    a_shape: &[usize],
    trans_a: bool,
    b: &[E],
    b_shape: &[usize],
    trans_b: bool,
) -> Result<(Vec<E>, Vec<usize>)> {
    let out_shape = matmul_out_shape(a_shape, trans_a, b_shape, trans_b)?;
    let (m, k) = mat_dims(a_shape, trans_a);
    let n = mat_dims(b_shape, trans_b).1;
    let (lead, a_ls, b_ls) = matmul_lead(a_shape, b_shape)?;
    let (rsa, csa) = view_strides(a_shape[a_shape.len() - 1], trans_a);
    let (rsb, csb) = view_strides(b_shape[b_shape.len() - 1], trans_b);
    let cell = m * n;
    let mut out = vec![E::zero(); numel(&out_shape)];
    zip_broadcast(&lead, &a_ls, &b_ls, |flat, ao, bo| {
        E::gemm(
            m,
            k,
            n,
            E::one(),
            &a[ao..],
            rsa,
            csa,
            &b[bo..],
            rsb,
            csb,
            E::zero(),
            &mut out[flat * cell..(flat + 1) * cell],
            n as isize,
            1,
        );
    });
    Ok((out, out_shape))
}

/// Gradients of a batched matmul. `want_da`/`want_db` skip unused sides.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<E: Scalar>(
    grad: &[E],
    a: &[E],
    a_shape: &[usize],
    trans_a: bool,
    b: &[E],
    b_shape: &[usize],
    trans_b: bool,
    want_da: bool,
    want_db: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let (m, k) = mat_dims(a_shape, trans_a);
    let n = mat_dims(b_shape, trans_b).1;
    let (lead, a_ls, b_ls) = matmul_lead(a_shape, b_shape).expect("checked in forward");
    let a_cols = a_shape[a_shape.len() - 1];
    let b_cols = b_shape[b_shape.len() - 1];
    let cell = m * n;
    let mut da = want_da.then(|| vec![E::zero(); a.len()]);
    let mut db = want_db.then(|| vec![E::zero(); b.len()]);

    zip_broadcast(&lead, &a_ls, &b_ls, |flat, ao, bo| {
        let g = &grad[flat * cell..(flat + 1) * cell];
        if let Some(da) = da.as_mut() {
            // dA_logical = dC . B_logical^T ; store transposed when trans_a.
            let (rsb, csb) = view_strides(b_cols, trans_b);
            if !trans_a {
                // dAs[m,k] += dC[m,n] . B_log^T[n,k]
                E::gemm(
                    m,
                    n,
                    k,
                    E::one(),
                    g,
                    n as isize,
                    1,
                    &b[bo..],
                    csb,
                    rsb,
                    E::one(),
                    &mut da[ao..],
                    a_cols as isize,
                    1,
                );
            } else {
                // dAs[k,m] += B_log[k,n] . dC^T[n,m]
                E::gemm(
                    k,
                    n,
                    m,
                    E::one(),
                    &b[bo..],
                    rsb,
                    csb,
                    g,
                    1,
                    n as isize,
                    E::one(),
                    &mut da[ao..],
                    a_cols as isize,
                    1,
                );
            }
        }
        if let Some(db) = db.as_mut() {
            let (rsa, csa) = view_strides(a_cols, trans_a);
            if !trans_b {
                // dBs[k,n] += A_log^T[k,m] . dC[m,n]
                E::gemm(
                    k,
                    m,
                    n,
                    E::one(),
                    &a[ao..],
                    csa,
                    rsa,
                    g,
                    n as isize,
                    1,
                    E::one(),
                    &mut db[bo..],
                    b_cols as isize,
                    1,
                );
            } else {
                // dBs[n,k] += dC^T[n,m] . A_log[m,k]
                E::gemm(
                    n,
                    m,
                    k,
                    E::one(),
                    g,
                    1,
                    n as isize,
                    &a[ao..],
                    rsa,
                    csa,
                    E::one(),
                    &mut db[bo..],
                    b_cols as isize,
                    1,
                );
            }
        }
    });
    (da, db)
}

// ---- 2D convolution (cross-correlation, zero padding) --------------------

pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv2d_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Conv2dDims> {
    if x_shape.len() != 4 {
        return Err(CxvError::Dim(format!(
            "conv2d input must be [B,Cin,H,W], got {x_shape:?}"
        )));
    }
    if w_shape.len() != 4 {
        return Err(CxvError::Dim(format!(
            "conv2d kernel must be [Cout,Cin,kh,kw], got {w_shape:?}"
        )));
    }
    if stride < 1 {
        return Err(CxvError::Param("conv2d stride must be >= 1".into()));
    }
    let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (c_out, wc_in, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if c_in != wc_in {
        return Err(CxvError::Dim(format!(
            "conv2d channel mismatch: input {x_shape:?} vs kernel {w_shape:?}"
        )));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(CxvError::Dim(format!(
            "conv2d kernel {w_shape:?} larger than padded input {x_shape:?} (pad {pad})"
        )));
    }
    Ok(Conv2dDims {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    })
}

/// Unroll sliding-window patches of one `[Cin,H,W]` sample into columns
/// `[Cin*kh*kw, Hout*Wout]`.
#[allow(clippy::needless_range_loop)]
fn im2col<E: Scalar>(x: &[E], d: &Conv2dDims, cols: &mut [E]) {
    let patches = d.h_out * d.w_out;
    for ci in 0..d.c_in {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let out_row = &mut cols[row * patches..(row + 1) * patches];
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        out_row[oh * d.w_out..(oh + 1) * d.w_out].fill(E::zero());
                        continue;
                    }
                    let in_row = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                        out_row[oh * d.w_out + ow] = if iw >= 0 && iw < d.w as isize {
                            in_row[iw as usize]
                        } else {
                            E::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter columns back into a `[Cin,H,W]` sample, accumulating overlaps.
#[allow(clippy::needless_range_loop)]
fn col2im<E: Scalar>(cols: &[E], d: &Conv2dDims, x: &mut [E]) {
    let patches = d.h_out * d.w_out;
    for ci in 0..d.c_in {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let col_row = &cols[row * patches..(row + 1) * patches];
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let in_row = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + kj) as isize - d.pad as isize;
                        if iw >= 0 && iw < d.w as isize {
                            in_row[iw as usize] += col_row[oh * d.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<E: Scalar>(
    x: &[E],
    w: &[E],
    bias: &[E],
    d: &Conv2dDims,
) -> (Vec<E>, Vec<usize>) {
    let patches = d.h_out * d.w_out;
    let krows = d.c_in * d.kh * d.kw;
    let mut cols = vec![E::zero(); krows * patches];
    let sample_in = d.c_in * d.h * d.w;
    let sample_out = d.c_out * patches;
    let mut out = vec![E::zero(); d.batch * sample_out];
    for bi in 0..d.batch {
        im2col(&x[bi * sample_in..(bi + 1) * sample_in], d, &mut cols);
        let o = &mut out[bi * sample_out..(bi + 1) * sample_out];
        E::gemm(
            d.c_out,
            krows,
            patches,
            E::one(),
            w,
            krows as isize,
            1,
            &cols,
            patches as isize,
            1,
            E::zero(),
            o,
            patches as isize,
            1,
        );
        for (co, &b) in bias.iter().enumerate() {
            for v in &mut o[co * patches..(co + 1) * patches] {
                *v += b;
            }
        }
    }
    (out, vec![d.batch, d.c_out, d.h_out, d.w_out])
}

pub struct Conv2dGrads<E> {
    pub dx: Option<Vec<E>>,
    pub dw: Option<Vec<E>>,
    pub db: Option<Vec<E>>,
}

pub fn conv2d_backward<E: Scalar>(
    grad: &[E],
    x: &[E],
    w: &[E],
    d: &Conv2dDims,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> Conv2dGrads<E> {
    let patches = d.h_out * d.w_out;
    let krows = d.c_in * d.kh * d.kw;
    let sample_in = d.c_in * d.h * d.w;
    let sample_out = d.c_out * patches;
    let mut cols = vec![E::zero(); krows * patches];
    let mut dcols = vec![E::zero(); krows * patches];
    let mut dx = want_dx.then(|| vec![E::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![E::zero(); w.len()]);
    let mut db = want_db.then(|| vec![E::zero(); d.c_out]);

    for bi in 0..d.batch {
        let g = &grad[bi * sample_out..(bi + 1) * sample_out];
        if let Some(db) = db.as_mut() {
            for co in 0..d.c_out {
                db[co] += g[co * patches..(co + 1) * patches].iter().copied().sum();
            }
        }
        if dw.is_some() || dx.is_some() {
            if dw.is_some() {
                im2col(&x[bi * sample_in..(bi + 1) * sample_in], d, &mut cols);
            }
            if let Some(dw) = dw.as_mut() {
                // dW[c_out, krows] += g[c_out, patches] . cols^T[patches, krows]
                E::gemm(
                    d.c_out,
                    patches,
                    krows,
                    E::one(),
                    g,
                    patches as isize,
                    1,
                    &cols,
                    1,
                    patches as isize,
                    E::one(),
                    dw,
                    krows as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols[krows, patches] = W^T[krows, c_out] . g[c_out, patches]
                E::gemm(
                    krows,
                    d.c_out,
                    patches,
                    E::one(),
                    w,
                    1,
                    krows as isize,
                    g,
                    patches as isize,
                    1,
                    E::zero(),
                    &mut dcols,
                    patches as isize,
                    1,
                );
                col2im(&dcols, d, &mut dx[bi * sample_in..(bi + 1) * sample_in]);
            }
        }
    }
    Conv2dGrads { dx, dw, db }
}

// ---- layer normalization over the last dimension --------------------------

pub struct LayerNormSaved<E> {
    pub xhat: Vec<E>,
    pub inv_std: Vec<E>,
}

pub fn layer_norm_forward<E: Scalar>(
    x: &[E],
    channels: usize,
    gamma: &[E],
    beta: &[E],
    eps: E,
) -> (Vec<E>, LayerNormSaved<E>) {
    let rows = x.len() / channels;
    let mut out = vec![E::zero(); x.len()];
    let mut xhat = vec![E::zero(); x.len()];
    let mut inv_std = vec![E::zero(); rows];
    let cn = E::from_f64(channels as f64);
    for r in 0..rows {
        let xi = &x[r * channels..(r + 1) * channels];
        let mean = xi.iter().copied().sum::<E>() / cn;
        let var = xi
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<E>()
            / cn;
        let istd = (var + eps).sqrt().recip();
        inv_std[r] = istd;
        let xh = &mut xhat[r * channels..(r + 1) * channels];
        let o = &mut out[r * channels..(r + 1) * channels];
        for c in 0..channels {
            xh[c] = (xi[c] - mean) * istd;
            o[c] = gamma[c] * xh[c] + beta[c];
        }
    }
    (out, LayerNormSaved { xhat, inv_std })
}

pub struct LayerNormGrads<E> {
    pub dx: Vec<E>,
    pub dgamma: Vec<E>,
    pub dbeta: Vec<E>,
}

pub fn layer_norm_backward<E: Scalar>(
    grad: &[E],
    channels: usize,
    gamma: &[E],
    saved: &LayerNormSaved<E>,
) -> LayerNormGrads<E> {
    let rows = grad.len() / channels;
    let mut dx = vec![E::zero(); grad.len()];
    let mut dgamma = vec![E::zero(); channels];
    let mut dbeta = vec![E::zero(); channels];
    let cn = E::from_f64(channels as f64);
    for r in 0..rows {
        let g = &grad[r * channels..(r + 1) * channels];
        let xh = &saved.xhat[r * channels..(r + 1) * channels];
        let istd = saved.inv_std[r];
        let mut s1 = E::zero();
        let mut s2 = E::zero();
        for c in 0..channels {
            let dxh = g[c] * gamma[c];
            s1 += dxh;
            s2 += dxh * xh[c];
            dgamma[c] += g[c] * xh[c];
            dbeta[c] += g[c];
        }
        let o = &mut dx[r * channels..(r + 1) * channels];
        for c in 0..channels {
            let dxh = g[c] * gamma[c];
            o[c] = istd * (dxh - s1 / cn - xh[c] * s2 / cn);
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

// ---- softmax over the last dimension --------------------------------------

pub fn softmax_rows<E: Scalar>(x: &[E], cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(E::neg_infinity(), E::max);
        let mut sum = E::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = sum.recip();
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub fn softmax_backward<E: Scalar>(grad: &[E], y: &[E], cols: usize) -> Vec<E> {
    let mut dx = vec![E::zero(); grad.len()];
    for ((gr, yr), dr) in grad
        .chunks_exact(cols)
        .zip(y.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: E = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum();
        for ((d, &g), &v) in dr.iter_mut().zip(gr).zip(yr) {
            *d = v * (g - dot);
        }
    }
    dx
}

// ---- cross entropy ---------------------------------------------------------

/// Mean over the batch of `-log softmax(logits)[label]`.
/// Returns `(loss, probs)`; probs are reused by the backward pass.
pub fn cross_entropy_forward<E: Scalar>(
    logits: &[E],
    classes: usize,
    labels: &[usize],
) -> (E, Vec<E>) {
    let probs = softmax_rows(logits, classes);
    let mut loss = E::zero();
    for (row, &label) in probs.chunks_exact(classes).zip(labels) {
        loss -= row[label].max(E::from_f64(f64::MIN_POSITIVE)).ln();
    }
    (loss / E::from_f64(labels.len() as f64), probs)
}

pub fn cross_entropy_backward<E: Scalar>(
    upstream: E,
    probs: &[E],
    classes: usize,
    labels: &[usize],
) -> Vec<E> {
    let scale = upstream / E::from_f64(labels.len() as f64);
    let mut dl = probs.to_vec();
    for (row, &label) in dl.chunks_exact_mut(classes).zip(labels) {
        row[label] -= E::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    dl
}

// ---- segment-mean landmarks ------------------------------------------------

/// Length of each of the `m` near-equal contiguous segments of `n` tokens
/// (first `n % m` segments are one longer). Only used when `n > m`.
pub fn segment_lengths(n: usize, m: usize) -> Vec<usize> {
    let base = n / m;
    let extra = n % m;
    (0..m).map(|s| base + usize::from(s < extra)).collect()
}

pub fn segment_mean_forward<E: Scalar>(
    x: &[E],
    shape: &[usize],
    m: usize,
) -> (Vec<E>, Vec<usize>) {
    let dh = shape[shape.len() - 1];
    let n = shape[shape.len() - 2];
    let batch = numel(shape) / (n * dh);
    let mut out = vec![E::zero(); batch * m * dh];
    for b in 0..batch {
        let xs = &x[b * n * dh..(b + 1) * n * dh];
        let os = &mut out[b * m * dh..(b + 1) * m * dh];
        if n <= m {
            // tokens pass through; the last token pads the remainder
            for j in 0..m {
                let src = j.min(n - 1);
                os[j * dh..(j + 1) * dh].copy_from_slice(&xs[src * dh..(src + 1) * dh]);
            }
        } else {
            let mut start = 0;
            for (s, &len) in segment_lengths(n, m).iter().enumerate() {
                let inv = E::from_f64(1.0 / len as f64);
                let o = &mut os[s * dh..(s + 1) * dh];
                for t in start..start + len {
                    for (ov, &xv) in o.iter_mut().zip(&xs[t * dh..(t + 1) * dh]) {
                        *ov += xv * inv;
                    }
                }
                start += len;
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let rank = out_shape.len();
    out_shape[rank - 2] = m;
    (out, out_shape)
}

pub fn segment_mean_backward<E: Scalar>(grad: &[E], x_shape: &[usize], m: usize) -> Vec<E> {
    let dh = x_shape[x_shape.len() - 1];
    let n = x_shape[x_shape.len() - 2];
    let batch = numel(x_shape) / (n * dh);
    let mut dx = vec![E::zero(); numel(x_shape)];
    for b in 0..batch {
        let gs = &grad[b * m * dh..(b + 1) * m * dh];
        let ds = &mut dx[b * n * dh..(b + 1) * n * dh];
        if n <= m {
            for j in 0..m {
                let dst = j.min(n - 1);
                for (dv, &gv) in ds[dst * dh..(dst + 1) * dh].iter_mut().zip(&gs[j * dh..(j + 1) * dh]) {
                    *dv += gv;
                }
            }
        } else {
            let mut start = 0;
            for (s, &len) in segment_lengths(n, m).iter().enumerate() {
                let inv = E::from_f64(1.0 / len as f64);
                let g = &gs[s * dh..(s + 1) * dh];
                for t in start..start + len {
                    for (dv, &gv) in ds[t * dh..(t + 1) * dh].iter_mut().zip(g) {
                        *dv += gv * inv;
                    }
                }
                start += len;
            }
        }
    }
    dx
}

// ---- permutation copy -------------------------------------------------------

pub fn permute_forward<E: Scalar>(
    x: &[E],
    shape: &[usize],
    axes: &[usize],
) -> (Vec<E>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = row_major_strides(shape);
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0usize; out_shape.len()];
    let mut out = vec![E::zero(); x.len()];
    zip_broadcast(&out_shape, &walk, &zeros, |flat, src, _| {
        out[flat] = x[src];
    });
    (out, out_shape)
}

pub fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

// ---- axis reductions ---------------------------------------------------------

/// (outer, axis_len, inner) factorization used by axis reductions.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

pub fn sum_axis_forward<E: Scalar>(x: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![E::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

pub fn sum_axis_backward<E: Scalar>(grad: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![E::zero(); numel(shape)];
    for o in 0..outer {
        let g = &grad[o * inner..(o + 1) * inner];
        for a in 0..len {
            dx[(o * len + a) * inner..(o * len + a + 1) * inner].copy_from_slice(g);
        }
    }
    dx
}

/// Max along `axis`; also returns the flat input index of each winner
/// (first maximum wins on ties).
pub fn max_axis_forward<E: Scalar>(
    x: &[E],
    shape: &[usize],
    axis: usize,
) -> (Vec<E>, Vec<usize>) {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![E::neg_infinity(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            for i in 0..inner {
                let src = (o * len + a) * inner + i;
                let dst = o * inner + i;
                if x[src] > out[dst] {
                    out[dst] = x[src];
                    arg[dst] = src;
                }
            }
        }
    }
    (out, arg)
}
