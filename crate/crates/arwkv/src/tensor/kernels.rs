//! Raw forward/backward math on plain tensors.
//!
//! Everything here is straight-line scalar code over contiguous row-major
//! buffers; the differentiable wrappers in [`super::tape`] call into these.
//! The benchmark paths use them directly, without a tape.

use super::{broadcast_shape, broadcast_strides, strides_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to `exp(-exp(x))` so decay factors never collapse to
/// an exact zero; the matching upper clamp keeps them strictly below one.
pub const NEG_EXP_EXP_FLOOR: f64 = 1e-38;

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn binary_bcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let numel: usize = out_shape.iter().product();
    let ad = a.data();
    let bd = b.data();

    // Fast path: identical shapes.
    if a.shape() == out_shape.as_slice() && b.shape() == out_shape.as_slice() {
        let data = ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(out_shape, data);
    }
    // Fast path: one operand is a scalar.
    if b.numel() == 1 {
        let y = bd[0];
        let data = ad.iter().map(|&x| f(x, y)).collect();
        return Tensor::from_vec(out_shape, data);
    }
    if a.numel() == 1 {
        let x = ad[0];
        let data = bd.iter().map(|&y| f(x, y)).collect();
        return Tensor::from_vec(out_shape, data);
    }
    // Fast path: b is a contiguous suffix of a's shape (e.g. [D] vs [B,L,D]).
    if a.shape() == out_shape.as_slice()
        && b.shape() == &out_shape[out_shape.len() - b.rank()..]
    {
        let chunk = b.numel();
        let mut data = Vec::with_capacity(numel);
        for block in ad.chunks_exact(chunk) {
            data.extend(block.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::from_vec(out_shape, data);
    }

    // General case: odometer walk with broadcast strides.
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f(ad[oa], bd[ob]));
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            oa -= sa[axis] * out_shape[axis];
            ob -= sb[axis] * out_shape[axis];
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Sum `grad` down to `shape` (the adjoint of broadcasting `shape` up).
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let gshape = grad.shape();
    let gstr = strides_of(gshape);
    let tstr = broadcast_strides(shape, gshape);
    let tnumel: usize = shape.iter().product();
    let mut out = vec![T::zero(); tnumel];
    let rank = gshape.len();
    let mut idx = vec![0usize; rank];
    let mut go = 0usize;
    let mut to = 0usize;
    let gd = grad.data();
    for _ in 0..grad.numel() {
        out[to] = out[to] + gd[go];
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            go += gstr[axis];
            to += tstr[axis];
            if idx[axis] < gshape[axis] {
                break;
            }
            idx[axis] = 0;
            go -= gstr[axis] * gshape[axis];
            to -= tstr[axis] * gshape[axis];
        }
    }
    Tensor::from_vec(shape.to_vec(), out).expect("reduce_to_shape sized buffer")
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `exp(-exp(x))`, clamped into the open interval (0, 1).
pub fn neg_exp_exp<T: Scalar>(x: T) -> T {
    let y = (-(x.exp())).exp();
    let floor = T::from_f64(NEG_EXP_EXP_FLOOR);
    let ceil = T::one() - T::epsilon();
    y.max(floor).min(ceil)
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// Inner 2D kernel: C[m,n] += A[m,k] * B[k,n].
fn mm_accum<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + av * b_row[j];
            }
        }
    }
}

/// Batched matrix product with broadcastable batch dimensions.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Dim(format!(
            "matmul requires rank >= 2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if ka != kb {
        return Err(Error::Dim(format!(
            "matmul inner dimensions disagree: lhs {:?}, rhs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch_a = &a.shape()[..a.rank() - 2];
    let batch_b = &b.shape()[..b.rank() - 2];
    let batch = broadcast_shape(batch_a, batch_b).map_err(|_| {
        Error::Dim(format!(
            "matmul batch dimensions not broadcastable: lhs {:?}, rhs {:?}",
            a.shape(),
            b.shape()
        ))
    })?;
    let nbatch: usize = batch.iter().product();

    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![T::zero(); nbatch * m * n];

    let sa = broadcast_strides(batch_a, &batch);
    let sb = broadcast_strides(batch_b, &batch);
    let rank = batch.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let ad = a.data();
    let bd = b.data();
    for bi in 0..nbatch {
        mm_accum(
            &ad[oa * m * ka..],
            &bd[ob * ka * n..],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            ka,
            n,
        );
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < batch[axis] {
                break;
            }
            idx[axis] = 0;
            oa -= sa[axis] * batch[axis];
            ob -= sb[axis] * batch[axis];
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Swap the last two axes (materialized).
pub fn transpose_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::Dim(format!("transpose requires rank >= 2, got {:?}", x.shape())));
    }
    let mut axes: Vec<usize> = (0..x.rank()).collect();
    axes.swap(x.rank() - 2, x.rank() - 1);
    permute(x, &axes)
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

/// 2D convolution with zero padding: x [B,Cin,H,W], w [Cout,Cin,kh,kw].
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let (b, cin, h, wd) = dims4(x, "conv2d input")?;
    let (cout, wcin, kh, kw) = dims4(w, "conv2d weight")?;
    if cin != wcin {
        return Err(Error::Dim(format!(
            "conv2d channel mismatch: input {:?}, weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (sy, sx) = stride;
    let (py, px) = pad;
    if sy == 0 || sx == 0 {
        return Err(Error::Dim("conv2d stride must be >= 1".into()));
    }
    if h + 2 * py < kh || wd + 2 * px < kw {
        return Err(Error::Dim(format!(
            "conv2d kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * py,
            wd + 2 * px
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::Dim(format!(
                "conv2d bias shape {:?} != [{}]",
                bt.shape(),
                cout
            )));
        }
    }
    let ho = (h + 2 * py - kh) / sy + 1;
    let wo = (wd + 2 * px - kw) / sx + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![T::zero(); b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            let base_o = (bi * cout + co) * ho * wo;
            let bias_v = bias.map(|bt| bt.data()[co]).unwrap_or_else(T::zero);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias_v;
                    for ci in 0..cin {
                        let base_x = (bi * cin + ci) * h * wd;
                        let base_w = (co * cin + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = oy * sy + ky;
                            if iy < py || iy >= h + py {
                                continue;
                            }
                            let iy = iy - py;
                            for kx in 0..kw {
                                let ix = ox * sx + kx;
                                if ix < px || ix >= wd + px {
                                    continue;
                                }
                                let ix = ix - px;
                                acc = acc + xd[base_x + iy * wd + ix] * wdat[base_w + ky * kw + kx];
                            }
                        }
                    }
                    out[base_o + oy * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![b, cout, ho, wo], out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight, and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    want_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (b, cin, h, wd) = dims4(x, "conv2d input").expect("validated in forward");
    let (cout, _, kh, kw) = dims4(w, "conv2d weight").expect("validated in forward");
    let (_, _, ho, wo) = dims4(grad, "conv2d grad").expect("grad shape from forward");
    let (sy, sx) = stride;
    let (py, px) = pad;
    let xd = x.data();
    let wdat = w.data();
    let gd = grad.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wdat.len()];
    let mut db = vec![T::zero(); cout];
    for bi in 0..b {
        for co in 0..cout {
            let base_o = (bi * cout + co) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gd[base_o + oy * wo + ox];
                    db[co] = db[co] + g;
                    for ci in 0..cin {
                        let base_x = (bi * cin + ci) * h * wd;
                        let base_w = (co * cin + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = oy * sy + ky;
                            if iy < py || iy >= h + py {
                                continue;
                            }
                            let iy = iy - py;
                            for kx in 0..kw {
                                let ix = ox * sx + kx;
                                if ix < px || ix >= wd + px {
                                    continue;
                                }
                                let ix = ix - px;
                                dx[base_x + iy * wd + ix] =
                                    dx[base_x + iy * wd + ix] + g * wdat[base_w + ky * kw + kx];
                                dw[base_w + ky * kw + kx] =
                                    dw[base_w + ky * kw + kx] + g * xd[base_x + iy * wd + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    let dxt = Tensor::from_vec(x.shape().to_vec(), dx).expect("dx shape");
    let dwt = Tensor::from_vec(w.shape().to_vec(), dw).expect("dw shape");
    let dbt = if want_bias {
        Some(Tensor::from_vec(vec![cout], db).expect("db shape"))
    } else {
        None
    };
    (dxt, dwt, dbt)
}

/// Depthwise 2D convolution, stride 1, zero "same" padding; odd kernel only.
pub fn dwconv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, wd) = dims4(x, "dwconv2d input")?;
    let (wc, one, kh, kw) = dims4(w, "dwconv2d weight")?;
    if wc != c || one != 1 {
        return Err(Error::Dim(format!(
            "dwconv2d weight {:?} incompatible with input {:?} (expect [C,1,kh,kw])",
            w.shape(),
            x.shape()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!(
            "dwconv2d kernel must be odd, got {}x{}",
            kh, kw
        )));
    }
    let (py, px) = (kh / 2, kw / 2);
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * wd;
            let base_w = ci * kh * kw;
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = T::zero();
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < py || iy >= h + py {
                            continue;
                        }
                        let iy = iy - py;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if ix < px || ix >= wd + px {
                                continue;
                            }
                            let ix = ix - px;
                            acc = acc + xd[base + iy * wd + ix] * wdat[base_w + ky * kw + kx];
                        }
                    }
                    out[base + oy * wd + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn dwconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (b, c, h, wd) = dims4(x, "dwconv2d input").expect("validated in forward");
    let (_, _, kh, kw) = dims4(w, "dwconv2d weight").expect("validated in forward");
    let (py, px) = (kh / 2, kw / 2);
    let xd = x.data();
    let wdat = w.data();
    let gd = grad.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wdat.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * wd;
            let base_w = ci * kh * kw;
            for oy in 0..h {
                for ox in 0..wd {
                    let g = gd[base + oy * wd + ox];
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < py || iy >= h + py {
                            continue;
                        }
                        let iy = iy - py;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if ix < px || ix >= wd + px {
                                continue;
                            }
                            let ix = ix - px;
                            dx[base + iy * wd + ix] =
                                dx[base + iy * wd + ix] + g * wdat[base_w + ky * kw + kx];
                            dw[base_w + ky * kw + kx] =
                                dw[base_w + ky * kw + kx] + g * xd[base + iy * wd + ix];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::from_vec(w.shape().to_vec(), dw).expect("dw shape"),
    )
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::Dim(format!("{} must be rank 4, got {:?}", what, t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]))
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// LayerNorm over the trailing dimension with affine parameters.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = last_dim(x, "layernorm input")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Dim(format!(
            "layernorm affine shapes {:?}/{:?} must be [{}]",
            gamma.shape(),
            beta.shape(),
            d
        )));
    }
    let epst = T::from_f64(eps);
    let xd = x.data();
    let g = gamma.data();
    let bt = beta.data();
    let mut out = vec![T::zero(); xd.len()];
    let inv_d = T::from_f64(1.0 / d as f64);
    for (row, orow) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            * inv_d;
        let rstd = T::one() / (var + epst).sqrt();
        for j in 0..d {
            orow[j] = (row[j] - mean) * rstd * g[j] + bt[j];
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Standard LayerNorm adjoint; returns (dx, dgamma, dbeta).
pub fn layernorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *x.shape().last().expect("validated in forward");
    let epst = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let xd = x.data();
    let g = gamma.data();
    let gd = grad.data();
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for (ri, row) in xd.chunks_exact(d).enumerate() {
        let grow = &gd[ri * d..(ri + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + epst).sqrt();
        // xhat = (x - mean) * rstd; gy = grad * gamma
        let mut mean_gy = T::zero();
        let mut mean_gy_xhat = T::zero();
        for j in 0..d {
            let xhat = (row[j] - mean) * rstd;
            let gy = grow[j] * g[j];
            mean_gy = mean_gy + gy;
            mean_gy_xhat = mean_gy_xhat + gy * xhat;
            dgamma[j] = dgamma[j] + grow[j] * xhat;
            dbeta[j] = dbeta[j] + grow[j];
        }
        mean_gy = mean_gy * inv_d;
        mean_gy_xhat = mean_gy_xhat * inv_d;
        for j in 0..d {
            let xhat = (row[j] - mean) * rstd;
            let gy = grow[j] * g[j];
            dx[ri * d + j] = (gy - mean_gy - xhat * mean_gy_xhat) * rstd;
        }
    }
    (
        Tensor::from_vec(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::from_vec(vec![d], dgamma).expect("dgamma shape"),
        Tensor::from_vec(vec![d], dbeta).expect("dbeta shape"),
    )
}

/// L2-normalize each trailing-dim vector: y = x / max(||x||, eps).
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = last_dim(x, "l2_normalize input")?;
    let epst = T::from_f64(eps);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for (row, orow) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(epst);
        for j in 0..d {
            orow[j] = row[j] / norm;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn l2_normalize_backward<T: Scalar>(x: &Tensor<T>, eps: f64, grad: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("validated in forward");
    let epst = T::from_f64(eps);
    let xd = x.data();
    let gd = grad.data();
    let mut dx = vec![T::zero(); xd.len()];
    for (ri, row) in xd.chunks_exact(d).enumerate() {
        let grow = &gd[ri * d..(ri + 1) * d];
        let raw = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if raw <= epst {
            // Clamped branch: y = x / eps is linear.
            for j in 0..d {
                dx[ri * d + j] = grow[j] / epst;
            }
        } else {
            let inv = T::one() / raw;
            let mut dot = T::zero();
            for j in 0..d {
                dot = dot + grow[j] * row[j];
            }
            let scale = dot * inv * inv * inv;
            for j in 0..d {
                dx[ri * d + j] = grow[j] * inv - row[j] * scale;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), dx).expect("dx shape")
}

/// RMS-normalize each trailing-dim vector: y = x / sqrt(mean(x^2) + eps).
pub fn rms_normalize<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = last_dim(x, "rms_normalize input")?;
    let epst = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for (row, orow) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let r = T::one() / (ms + epst).sqrt();
        for j in 0..d {
            orow[j] = row[j] * r;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn rms_normalize_backward<T: Scalar>(x: &Tensor<T>, eps: f64, grad: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("validated in forward");
    let epst = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let xd = x.data();
    let gd = grad.data();
    let mut dx = vec![T::zero(); xd.len()];
    for (ri, row) in xd.chunks_exact(d).enumerate() {
        let grow = &gd[ri * d..(ri + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let r = T::one() / (ms + epst).sqrt();
        let mut dot = T::zero();
        for j in 0..d {
            dot = dot + grow[j] * row[j];
        }
        let scale = dot * r * r * r * inv_d;
        for j in 0..d {
            dx[ri * d + j] = grow[j] * r - row[j] * scale;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), dx).expect("dx shape")
}

fn last_dim<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d >= 1 => Ok(d),
        _ => Err(Error::Dim(format!("{} needs a trailing dimension, got {:?}", what, x.shape()))),
    }
}

// ---------------------------------------------------------------------------
// data movement
// ---------------------------------------------------------------------------

pub fn flip<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Dim(format!(
            "flip axis {} out of range for shape {:?}",
            axis,
            x.shape()
        )));
    }
    let shape = x.shape();
    let n_axis = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..n_axis {
            let src = (o * n_axis + i) * inner;
            let dst = (o * n_axis + (n_axis - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Dim(format!(
            "permute axes {:?} are not a permutation of 0..{}",
            axes, rank
        )));
    }
    let in_shape = x.shape();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let numel = x.numel();
    let xd = x.data();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    // Walk output positions in order; map each back through the permutation.
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    for _ in 0..numel {
        out.push(xd[src]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            src += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            src -= src_strides[axis] * out_shape[axis];
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Previous-token copy along the middle axis of [B,L,D]; position 0 gets zeros.
pub fn shift_prev_token<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, l, d) = dims3(x, "shift_prev_token input")?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for li in 1..l {
            let dst = (bi * l + li) * d;
            let src = (bi * l + li - 1) * d;
            out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Adjoint of [`shift_prev_token`]: next-token copy with zero at the end.
pub fn shift_next_token<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, l, d) = dims3(x, "shift_next_token input")?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for li in 0..l.saturating_sub(1) {
            let dst = (bi * l + li) * d;
            let src = (bi * l + li + 1) * d;
            out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Quarter-channel four-direction shift over the patch grid.
///
/// Quarters of the channel axis move by one grid cell: q0 left, q1 right,
/// q2 up, q3 down (zero fill at the borders). `x` is [B, L, D] with
/// L == hi * wi flattened row-major.
pub fn qshift<T: Scalar>(x: &Tensor<T>, hi: usize, wi: usize) -> Result<Tensor<T>> {
    qshift_dir(x, hi, wi, false)
}

/// Adjoint displacement of [`qshift`] (each quarter moves the opposite way).
pub fn qshift_adjoint<T: Scalar>(x: &Tensor<T>, hi: usize, wi: usize) -> Result<Tensor<T>> {
    qshift_dir(x, hi, wi, true)
}

fn qshift_dir<T: Scalar>(x: &Tensor<T>, hi: usize, wi: usize, invert: bool) -> Result<Tensor<T>> {
    let (b, l, d) = dims3(x, "qshift input")?;
    if l != hi * wi {
        return Err(Error::Dim(format!(
            "qshift grid {}x{} does not match sequence length {}",
            hi, wi, l
        )));
    }
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "qshift needs embed_dim divisible by 4, got {}",
            d
        )));
    }
    let q = d / 4;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    // (dr, dc) displacement of the SOURCE cell relative to the output cell.
    let mut moves: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];
    if invert {
        for m in moves.iter_mut() {
            *m = (-m.0, -m.1);
        }
    }
    for bi in 0..b {
        for r in 0..hi as isize {
            for c in 0..wi as isize {
                let dst_tok = (bi * l) + (r as usize) * wi + c as usize;
                for (qi, &(dr, dc)) in moves.iter().enumerate() {
                    let (sr, sc) = (r + dr, c + dc);
                    if sr < 0 || sr >= hi as isize || sc < 0 || sc >= wi as isize {
                        continue;
                    }
                    let src_tok = (bi * l) + (sr as usize) * wi + sc as usize;
                    let dst = dst_tok * d + qi * q;
                    let src = src_tok * d + qi * q;
                    out[dst..dst + q].copy_from_slice(&xd[src..src + q]);
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::Dim(format!("{} must be rank 3, got {:?}", what, t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum())
}

/// Reduce one axis away (no keepdim). `mean` divides by the axis length.
pub fn reduce_axis<T: Scalar>(x: &Tensor<T>, axis: usize, mean: bool) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Dim(format!(
            "reduce axis {} out of range for shape {:?}",
            axis,
            x.shape()
        )));
    }
    let shape = x.shape();
    let n_axis = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let scale = if mean {
        T::from_f64(1.0 / n_axis as f64)
    } else {
        T::one()
    };
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..n_axis {
            let src = (o * n_axis + i) * inner;
            let dst = o * inner;
            for j in 0..inner {
                out[dst + j] = out[dst + j] + xd[src + j];
            }
        }
    }
    if mean {
        for v in out.iter_mut() {
            *v = *v * scale;
        }
    }
    let mut out_shape: Vec<usize> = shape.to_vec();
    out_shape.remove(axis);
    Tensor::from_vec(out_shape, out)
}

/// Adjoint of [`reduce_axis`]: broadcast grad back along `axis`.
pub fn expand_axis<T: Scalar>(
    grad: &Tensor<T>,
    axis: usize,
    n_axis: usize,
    mean: bool,
) -> Tensor<T> {
    let gshape = grad.shape();
    let inner: usize = gshape[axis..].iter().product();
    let outer: usize = gshape[..axis].iter().product();
    let scale = if mean {
        T::from_f64(1.0 / n_axis as f64)
    } else {
        T::one()
    };
    let gd = grad.data();
    let mut out = vec![T::zero(); outer * n_axis * inner];
    for o in 0..outer {
        for i in 0..n_axis {
            let dst = (o * n_axis + i) * inner;
            let src = o * inner;
            for j in 0..inner {
                out[dst + j] = gd[src + j] * scale;
            }
        }
    }
    let mut out_shape: Vec<usize> = gshape.to_vec();
    out_shape.insert(axis, n_axis);
    Tensor::from_vec(out_shape, out).expect("expand_axis sized buffer")
}

/// Row-wise softmax over the trailing dimension (max-subtracted).
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = last_dim(x, "softmax input")?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for (row, orow) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for j in 0..d {
            let e = (row[j] - m).exp();
            orow[j] = e;
            denom = denom + e;
        }
        for j in 0..d {
            orow[j] = orow[j] / denom;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = matmul(&eye, &b).unwrap();
        assert!(c.bit_eq(&b.reshaped(&[3, 2]).unwrap()));
    }

    #[test]
    fn matmul_hand_case() {
        // (1x2)[1,2] x (2x1)[3,4]^T  ->  [11]
        let a = t64(&[1, 2], &[1.0, 2.0]);
        let b = t64(&[2, 1], &[3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn matmul_vs_triple_loop_oracle() {
        let mut rng = crate::rng::substream(11, crate::rng::StreamPurpose::Init, 0);
        let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        let mut oracle = vec![0.0f64; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                oracle[i * 3 + j] = acc;
            }
        }
        let oracle = t64(&[4, 3], &oracle);
        assert!(c.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t64(&[4, 5], &[0.0; 20]);
        let b = t64(&[3, 2], &[0.0; 6]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[4, 5]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn matmul_broadcast_batches() {
        let mut rng = crate::rng::substream(12, crate::rng::StreamPurpose::Init, 0);
        let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        // Each batch equals the 2D product.
        for bi in 0..2 {
            let ab = Tensor::from_vec(vec![3, 4], a.data()[bi * 12..(bi + 1) * 12].to_vec()).unwrap();
            let cb = matmul(&ab, &b).unwrap();
            let got = &c.data()[bi * 15..(bi + 1) * 15];
            assert_eq!(got, cb.data());
        }
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut rng = crate::rng::substream(13, crate::rng::StreamPurpose::Init, 0);
        let x = Tensor::<f64>::randn(&[1, 1, 4, 5], 1.0, &mut rng);
        let w = t64(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn conv2d_patch_shape_arithmetic() {
        let x = Tensor::<f32>::zeros(&[1, 1, 128, 1024]);
        let w = Tensor::<f32>::zeros(&[8, 1, 16, 16]);
        let y = conv2d(&x, &w, None, (16, 16), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 64]);
    }

    #[test]
    fn conv2d_vs_sliding_window_oracle() {
        let mut rng = crate::rng::substream(14, crate::rng::StreamPurpose::Init, 0);
        let x = Tensor::<f64>::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d(&x, &w, None, (1, 1), (1, 1)).unwrap();
        let oracle = conv_oracle(&x, &w, (1, 1), (1, 1));
        assert!(y.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn conv2d_kernel_too_large_errors() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let w = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        let err = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap_err();
        assert!(err.to_string().contains("larger than padded input"), "{err}");
    }

    /// Independent sliding-window convolution used as the test oracle.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
        let mut out = vec![0.0f64; b * cout * ho * wo];
        let at = |bi: usize, ci: usize, y: isize, xq: isize| -> f64 {
            if y < 0 || y >= h as isize || xq < 0 || xq >= wd as isize {
                0.0
            } else {
                x.data()[((bi * cin + ci) * h + y as usize) * wd + xq as usize]
            }
        };
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                    let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                    acc += at(bi, ci, iy, ix)
                                        * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(vec![b, cout, ho, wo], out).unwrap()
    }

    #[test]
    fn conv2d_matches_oracle_on_random_shape_draws() {
        let mut rng = crate::rng::substream(15, crate::rng::StreamPurpose::Init, 0);
        for trial in 0..20 {
            use rand::Rng;
            let b = rng.gen_range(1..3usize);
            let cin = rng.gen_range(1..3usize);
            let cout = rng.gen_range(1..4usize);
            let kh = rng.gen_range(1..4usize);
            let kw = rng.gen_range(1..4usize);
            let h = rng.gen_range(kh..kh + 5);
            let w = rng.gen_range(kw..kw + 5);
            let sy = rng.gen_range(1..3usize);
            let sx = rng.gen_range(1..3usize);
            let py = rng.gen_range(0..2usize);
            let px = rng.gen_range(0..2usize);
            let x = Tensor::<f64>::randn(&[b, cin, h, w], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(&[cout, cin, kh, kw], 1.0, &mut rng);
            let y = conv2d(&x, &wt, None, (sy, sx), (py, px)).unwrap();
            let oracle = conv_oracle(&x, &wt, (sy, sx), (py, px));
            assert!(
                y.max_abs_diff(&oracle) < 1e-6,
                "trial {trial}: conv2d deviates from oracle"
            );
        }
    }

    #[test]
    fn dwconv2d_delta_kernel_is_identity() {
        let mut rng = crate::rng::substream(16, crate::rng::StreamPurpose::Init, 0);
        let x = Tensor::<f64>::randn(&[1, 3, 5, 7], 1.0, &mut rng);
        let mut w = Tensor::<f64>::zeros(&[3, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 9 + 4] = 1.0;
        }
        let y = dwconv2d(&x, &w).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn dwconv2d_constant_field_interior() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], 2.0);
        let mut rng = crate::rng::substream(17, crate::rng::StreamPurpose::Init, 0);
        let w = Tensor::<f64>::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let ksum: f64 = w.data().iter().sum();
        let y = dwconv2d(&x, &w).unwrap();
        // Interior pixels see the full kernel; borders are damped by zero pad.
        for r in 1..4 {
            for c in 1..4 {
                let v = y.data()[r * 5 + c];
                assert!((v - 2.0 * ksum).abs() < 1e-12, "interior ({r},{c})");
            }
        }
        assert!((y.data()[0] - 2.0 * ksum).abs() > 1e-9, "corner should differ");
    }

    #[test]
    fn dwconv2d_vs_per_channel_oracle() {
        let mut rng = crate::rng::substream(18, crate::rng::StreamPurpose::Init, 0);
        let x = Tensor::<f64>::randn(&[1, 3, 5, 7], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 1, 3, 3], 1.0, &mut rng);
        let y = dwconv2d(&x, &w).unwrap();
        // Oracle: per-channel conv2d with a 1-channel kernel slice.
        for c in 0..3 {
            let xc = Tensor::from_vec(vec![1, 1, 5, 7], x.data()[c * 35..(c + 1) * 35].to_vec()).unwrap();
            let wc = Tensor::from_vec(vec![1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let oc = conv_oracle(&xc, &wc, (1, 1), (1, 1));
            let got = &y.data()[c * 35..(c + 1) * 35];
            for (g, o) in got.iter().zip(oc.data().iter()) {
                assert!((g - o).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dwconv2d_even_kernel_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
        match dwconv2d(&x, &w) {
            Err(crate::error::Error::Config(_)) => {}
            other => panic!("expected config error, got {:?}", other.map(|t| t.shape().to_vec())),
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let x = Tensor::<f64>::full(&[2, 4], 3.5);
        let g = Tensor::<f64>::ones(&[4]);
        let b = Tensor::<f64>::zeros(&[4]);
        let y = layernorm(&x, &g, &b, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_gamma_zero_gives_beta() {
        let mut rng = crate::rng::substream(19, crate::rng::StreamPurpose::Init, 0);
        let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let g = Tensor::<f64>::zeros(&[5]);
        let b = Tensor::<f64>::from_vec(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = layernorm(&x, &g, &b, 1e-5).unwrap();
        for row in y.data().chunks_exact(5) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn layernorm_vs_two_pass_oracle() {
        let mut rng = crate::rng::substream(20, crate::rng::StreamPurpose::Init, 0);
        let x = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let eps = 1e-5;
        let y = layernorm(&x, &g, &b, eps).unwrap();
        let row = x.data();
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let want = (row[j] - mean) / (var + eps).sqrt() * g.data()[j] + b.data()[j];
            assert!((y.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let y = l2_normalize(&x, 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-12);
        assert!((y.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_unit_vector_unchanged() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![0.6, 0.8]).unwrap();
        let y = l2_normalize(&x, 1e-12).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn l2_normalize_random_has_unit_norm() {
        let mut rng = crate::rng::substream(21, crate::rng::StreamPurpose::Init, 0);
        let x = Tensor::<f64>::randn(&[16], 1.0, &mut rng);
        let y = l2_normalize(&x, 1e-12).unwrap();
        let n: f64 = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_near_zero_is_eps_guarded() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![1e-15, 0.0]).unwrap();
        let y = l2_normalize(&x, 1e-12).unwrap();
        let n: f64 = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n <= 1.0 + 1e-12);
    }

    #[test]
    fn flip_basics_and_involution() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = flip(&x, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0, 1.0]);
        let mut rng = crate::rng::substream(22, crate::rng::StreamPurpose::Init, 0);
        let t = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        for axis in 0..3 {
            let back = flip(&flip(&t, axis).unwrap(), axis).unwrap();
            assert!(back.bit_eq(&t), "flip involution axis {axis}");
        }
        assert!(flip(&t, 3).is_err());
    }

    #[test]
    fn permute_roundtrip_is_bit_exact() {
        let mut rng = crate::rng::substream(23, crate::rng::StreamPurpose::Init, 0);
        let t = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let axes = [2usize, 0, 3, 1];
        let p = permute(&t, &axes).unwrap();
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        let back = permute(&p, &invert_axes(&axes)).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn neg_exp_exp_limits() {
        // Large negative input: approaches one from below.
        let near_one: f64 = neg_exp_exp(-40.0f64);
        assert!(near_one > 0.999_999 && near_one < 1.0);
        // Large positive input: floored, never exactly zero.
        let near_zero: f32 = neg_exp_exp(100.0f32);
        assert!(near_zero > 0.0 && near_zero <= 1e-37);
        assert!(near_zero >= 1e-38);
    }

    #[test]
    fn reduce_axis_and_expand_axis_roundtrip_shapes() {
        let mut rng = crate::rng::substream(24, crate::rng::StreamPurpose::Init, 0);
        let t = Tensor::<f64>::randn(&[2, 5, 3], 1.0, &mut rng);
        let m = reduce_axis(&t, 1, true).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        // mean oracle for one slot
        let mut acc = 0.0;
        for l in 0..5 {
            acc += t.data()[(0 * 5 + l) * 3 + 2];
        }
        assert!((m.data()[2] - acc / 5.0).abs() < 1e-12);
        let e = expand_axis(&m, 1, 5, true);
        assert_eq!(e.shape(), &[2, 5, 3]);
    }

    #[test]
    fn qshift_one_by_one_grid_is_all_zero() {
        let mut rng = crate::rng::substream(25, crate::rng::StreamPurpose::Init, 0);
        let x = Tensor::<f64>::randn(&[1, 1, 8], 1.0, &mut rng);
        let y = qshift(&x, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qshift_two_by_two_displacement_table() {
        // D=4: one channel per quarter; tokens hold distinct values per cell.
        // Grid (row-major): t0=(0,0) t1=(0,1) t2=(1,0) t3=(1,1).
        let x = Tensor::<f64>::from_vec(
            vec![1, 4, 4],
            vec![
                10.0, 20.0, 30.0, 40.0, // t0
                11.0, 21.0, 31.0, 41.0, // t1
                12.0, 22.0, 32.0, 42.0, // t2
                13.0, 23.0, 33.0, 43.0, // t3
            ],
        )
        .unwrap();
        let y = qshift(&x, 2, 2).unwrap();
        let g = |tok: usize, ch: usize| y.data()[tok * 4 + ch];
        // ch0 = left: out(r,c) = in(r,c+1)
        assert_eq!(g(0, 0), 11.0);
        assert_eq!(g(1, 0), 0.0);
        assert_eq!(g(2, 0), 13.0);
        assert_eq!(g(3, 0), 0.0);
        // ch1 = right: out(r,c) = in(r,c-1)
        assert_eq!(g(0, 1), 0.0);
        assert_eq!(g(1, 1), 20.0);
        assert_eq!(g(2, 1), 0.0);
        assert_eq!(g(3, 1), 22.0);
        // ch2 = up: out(r,c) = in(r+1,c)
        assert_eq!(g(0, 2), 32.0);
        assert_eq!(g(1, 2), 33.0);
        assert_eq!(g(2, 2), 0.0);
        assert_eq!(g(3, 2), 0.0);
        // ch3 = down: out(r,c) = in(r-1,c)
        assert_eq!(g(0, 3), 0.0);
        assert_eq!(g(1, 3), 0.0);
        assert_eq!(g(2, 3), 40.0);
        assert_eq!(g(3, 3), 41.0);
    }

    #[test]
    fn qshift_conserves_mass_minus_border_outflow() {
        let mut rng = crate::rng::substream(26, crate::rng::StreamPurpose::Init, 0);
        let (hi, wi, d) = (3usize, 4usize, 8usize);
        let x = Tensor::<f64>::randn(&[1, hi * wi, d], 1.0, &mut rng);
        let y = qshift(&x, hi, wi).unwrap();
        let q = d / 4;
        // Quarter q0 shifts left: column 0 of the source leaves the grid.
        // Sum(shifted) = Sum(x) - sum over the outflow line, per quarter.
        let xs = |tok: usize, ch: usize| x.data()[tok * d + ch];
        for (qi, outflow_cells) in [
            (0usize, (0..hi).map(|r| r * wi).collect::<Vec<_>>()),      // col 0 exits left
            (1, (0..hi).map(|r| r * wi + wi - 1).collect()),             // last col exits right
            (2, (0..wi).collect()),                                      // row 0 exits up
            (3, (0..wi).map(|c| (hi - 1) * wi + c).collect()),           // last row exits down
        ] {
            for ch in qi * q..(qi + 1) * q {
                let total_x: f64 = (0..hi * wi).map(|t| xs(t, ch)).sum();
                let outflow: f64 = outflow_cells.iter().map(|&t| xs(t, ch)).sum();
                let total_y: f64 = (0..hi * wi).map(|t| y.data()[t * d + ch]).sum();
                assert!(
                    (total_y - (total_x - outflow)).abs() < 1e-9,
                    "quarter {qi} channel {ch}"
                );
            }
        }
    }

    #[test]
    fn softmax_rows_normalizes() {
        let mut rng = crate::rng::substream(27, crate::rng::StreamPurpose::Init, 0);
        let x = Tensor::<f64>::randn(&[4, 7], 2.0, &mut rng);
        let p = softmax_rows(&x).unwrap();
        for row in p.data().chunks_exact(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
