//! Forward and backward implementations of every network primitive.
//!
//! Convolutions lower to im2col plus GEMM. Backward passes rebuild the
//! column matrix from the cached forward input instead of keeping it, which
//! trades a little recompute for a much smaller tape.

use super::Tensor4;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Zero-padded same-size convolution, stride 1, odd kernel, NHWC input,
/// kernel layout [k, k, in_c, out_c].
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor4<S>,
    w: &[S],
    b: &[S],
    k: usize,
    in_c: usize,
    out_c: usize,
) -> Result<Tensor4<S>> {
    check_conv_shapes(x, w, b, k, in_c, out_c)?;
    let m = x.n * x.h * x.w;
    let kk = k * k * in_c;
    let cols = im2col(x, k);
    let mut out = Tensor4::zeros(x.n, x.h, x.w, out_c);
    S::gemm(false, false, m, kk, out_c, S::one(), &cols, w, S::zero(), &mut out.data);
    for row in out.data.chunks_exact_mut(out_c) {
        for (v, &bias) in row.iter_mut().zip(b.iter()) {
            *v += bias;
        }
    }
    Ok(out)
}

/// Gradients of `conv2d_forward` given the upstream gradient `dy`:
/// returns (dx, dw, db). Parameter gradients are fresh buffers for the
/// caller to accumulate.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor4<S>,
    w: &[S],
    k: usize,
    in_c: usize,
    out_c: usize,
    dy: &Tensor4<S>,
) -> Result<(Tensor4<S>, Vec<S>, Vec<S>)> {
    if dy.n != x.n || dy.h != x.h || dy.w != x.w || dy.c != out_c {
        return Err(Error::shape_mismatch(
            "conv2d_backward upstream",
            x.n * x.h * x.w * out_c,
            dy.data.len(),
        ));
    }
    let m = x.n * x.h * x.w;
    let kk = k * k * in_c;
    let cols = im2col(x, k);

    let mut dw = vec![S::zero(); kk * out_c];
    S::gemm(true, false, kk, m, out_c, S::one(), &cols, &dy.data, S::zero(), &mut dw);

    let mut db = vec![S::zero(); out_c];
    for row in dy.data.chunks_exact(out_c) {
        for (g, &v) in db.iter_mut().zip(row.iter()) {
            *g += v;
        }
    }

    let mut dcols = vec![S::zero(); m * kk];
    S::gemm(false, true, m, out_c, kk, S::one(), &dy.data, w, S::zero(), &mut dcols);
    let dx = col2im(&dcols, x.n, x.h, x.w, in_c, k);
    Ok((dx, dw, db))
}

fn check_conv_shapes<S: Scalar>(
    x: &Tensor4<S>,
    w: &[S],
    b: &[S],
    k: usize,
    in_c: usize,
    out_c: usize,
) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "conv kernel must be odd, got {k}"
        )));
    }
    if x.c != in_c {
        return Err(Error::shape_mismatch("conv2d input channels", in_c, x.c));
    }
    if w.len() != k * k * in_c * out_c {
        return Err(Error::shape_mismatch(
            "conv2d kernel",
            k * k * in_c * out_c,
            w.len(),
        ));
    }
    if b.len() != out_c {
        return Err(Error::shape_mismatch("conv2d bias", out_c, b.len()));
    }
    Ok(())
}

/// Unrolls k×k neighborhoods (zero padded) into rows of a (n*h*w, k*k*c)
/// matrix. Row layout matches the kernel layout [dy, dx, c].
fn im2col<S: Scalar>(x: &Tensor4<S>, k: usize) -> Vec<S> {
    let pad = k / 2;
    let (n, h, w, c) = (x.n, x.h, x.w, x.c);
    let kk = k * k * c;
    let mut cols = vec![S::zero(); n * h * w * kk];
    for img in 0..n {
        for y in 0..h {
            for dy in 0..k {
                let sy = y + dy;
                if sy < pad || sy >= h + pad {
                    continue;
                }
                let sy = sy - pad;
                for xx in 0..w {
                    let row = ((img * h + y) * w + xx) * kk + dy * k * c;
                    for dx in 0..k {
                        let sx = xx + dx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        let sx = sx - pad;
                        let src = x.idx(img, sy, sx, 0);
                        cols[row + dx * c..row + dx * c + c]
                            .copy_from_slice(&x.data[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-adds column gradients back onto the input.
fn col2im<S: Scalar>(dcols: &[S], n: usize, h: usize, w: usize, c: usize, k: usize) -> Tensor4<S> {
    let pad = k / 2;
    let kk = k * k * c;
    let mut dx = Tensor4::zeros(n, h, w, c);
    for img in 0..n {
        for y in 0..h {
            for dy in 0..k {
                let sy = y + dy;
                if sy < pad || sy >= h + pad {
                    continue;
                }
                let sy = sy - pad;
                for xx in 0..w {
                    let row = ((img * h + y) * w + xx) * kk + dy * k * c;
                    for dx_k in 0..k {
                        let sx = xx + dx_k;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        let sx = sx - pad;
                        let dst = dx.idx(img, sy, sx, 0);
                        for ch in 0..c {
                            dx.data[dst + ch] += dcols[row + dx_k * c + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn relu_forward<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
    y
}

/// Gradient gated on the forward input: negative inputs pass nothing.
pub fn relu_backward<S: Scalar>(x: &Tensor4<S>, dy: &Tensor4<S>) -> Result<Tensor4<S>> {
    if !x.same_shape(dy) {
        return Err(Error::shape_mismatch(
            "relu_backward",
            x.data.len(),
            dy.data.len(),
        ));
    }
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(x.data.iter()) {
        if v <= S::zero() {
            *g = S::zero();
        }
    }
    Ok(dx)
}

/// 2×2 max pooling, stride 2. Ties resolve to the first cell in scan order,
/// recorded in `argmax` as flat input indices for the backward pass.
pub fn maxpool2_forward<S: Scalar>(x: &Tensor4<S>) -> Result<(Tensor4<S>, Vec<u32>)> {
    if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) {
        return Err(Error::shape_mismatch(
            "maxpool2 needs even spatial dims",
            (x.h / 2) * 2 * ((x.w / 2) * 2),
            x.h * x.w,
        ));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor4::zeros(x.n, oh, ow, x.c);
    let mut argmax = vec![0u32; y.data.len()];
    for n in 0..x.n {
        for py in 0..oh {
            for px in 0..ow {
                for c in 0..x.c {
                    let mut best_idx = x.idx(n, 2 * py, 2 * px, c);
                    let mut best = x.data[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.idx(n, 2 * py + dy, 2 * px + dx, c);
                        if x.data[i] > best {
                            best = x.data[i];
                            best_idx = i;
                        }
                    }
                    let o = y.idx(n, py, px, c);
                    y.data[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
    }
    Ok((y, argmax))
}

pub fn maxpool2_backward<S: Scalar>(
    x_shape: [usize; 4],
    argmax: &[u32],
    dy: &Tensor4<S>,
) -> Result<Tensor4<S>> {
    if argmax.len() != dy.data.len() {
        return Err(Error::shape_mismatch(
            "maxpool2_backward",
            argmax.len(),
            dy.data.len(),
        ));
    }
    let mut dx = Tensor4::zeros(x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    for (&src, &g) in argmax.iter().zip(dy.data.iter()) {
        dx.data[src as usize] += g;
    }
    Ok(dx)
}

/// Nearest-neighbor 2× upsampling of `x` followed by channel concatenation
/// with the skip tensor: output channels are [upsampled x, skip].
pub fn upsample2_concat_forward<S: Scalar>(
    x: &Tensor4<S>,
    skip: &Tensor4<S>,
) -> Result<Tensor4<S>> {
    if skip.n != x.n || skip.h != 2 * x.h || skip.w != 2 * x.w {
        return Err(Error::shape_mismatch(
            "upsample2_concat skip raster",
            x.n * (2 * x.h) * (2 * x.w),
            skip.n * skip.h * skip.w,
        ));
    }
    let oc = x.c + skip.c;
    let mut y = Tensor4::zeros(x.n, skip.h, skip.w, oc);
    for n in 0..x.n {
        for yy in 0..skip.h {
            for xx in 0..skip.w {
                let o = y.idx(n, yy, xx, 0);
                let src = x.idx(n, yy / 2, xx / 2, 0);
                y.data[o..o + x.c].copy_from_slice(&x.data[src..src + x.c]);
                let s = skip.idx(n, yy, xx, 0);
                y.data[o + x.c..o + oc].copy_from_slice(&skip.data[s..s + skip.c]);
            }
        }
    }
    Ok(y)
}

/// Splits the upstream gradient back into (dx, dskip); each upsampled cell
/// fans out to four outputs, so dx sums them.
pub fn upsample2_concat_backward<S: Scalar>(
    x_shape: [usize; 4],
    skip_channels: usize,
    dy: &Tensor4<S>,
) -> Result<(Tensor4<S>, Tensor4<S>)> {
    let [n, h, w, cx] = x_shape;
    if dy.n != n || dy.h != 2 * h || dy.w != 2 * w || dy.c != cx + skip_channels {
        return Err(Error::shape_mismatch(
            "upsample2_concat_backward",
            n * 2 * h * 2 * w * (cx + skip_channels),
            dy.data.len(),
        ));
    }
    let mut dx = Tensor4::zeros(n, h, w, cx);
    let mut dskip = Tensor4::zeros(n, 2 * h, 2 * w, skip_channels);
    for img in 0..n {
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                let o = dy.idx(img, yy, xx, 0);
                let xi = dx.idx(img, yy / 2, xx / 2, 0);
                for c in 0..cx {
                    dx.data[xi + c] += dy.data[o + c];
                }
                let si = dskip.idx(img, yy, xx, 0);
                dskip.data[si..si + skip_channels]
                    .copy_from_slice(&dy.data[o + cx..o + cx + skip_channels]);
            }
        }
    }
    Ok((dx, dskip))
}

/// Per-pixel channel normalization with a smooth guard:
/// y = v / sqrt(|v|^2 + eps^2), so zero vectors map to zero.
pub fn l2_normalize_forward<S: Scalar>(x: &Tensor4<S>, eps: f64) -> Tensor4<S> {
    let eps2 = S::from_f64(eps * eps);
    let mut y = x.clone();
    for px in y.data.chunks_exact_mut(x.c) {
        let mut sq = eps2;
        for &v in px.iter() {
            sq += v * v;
        }
        let inv = S::one() / sq.sqrt();
        for v in px.iter_mut() {
            *v *= inv;
        }
    }
    y
}

pub fn l2_normalize_backward<S: Scalar>(
    x: &Tensor4<S>,
    y: &Tensor4<S>,
    dy: &Tensor4<S>,
    eps: f64,
) -> Result<Tensor4<S>> {
    if !x.same_shape(dy) || !x.same_shape(y) {
        return Err(Error::shape_mismatch(
            "l2_normalize_backward",
            x.data.len(),
            dy.data.len(),
        ));
    }
    let eps2 = S::from_f64(eps * eps);
    let mut dx = dy.clone();
    let c = x.c;
    for i in (0..x.data.len()).step_by(c) {
        let xv = &x.data[i..i + c];
        let yv = &y.data[i..i + c];
        let gv = &dy.data[i..i + c];
        let mut sq = eps2;
        for &v in xv.iter() {
            sq += v * v;
        }
        let inv_norm = S::one() / sq.sqrt();
        let mut g_dot_y = S::zero();
        for (&g, &yy) in gv.iter().zip(yv.iter()) {
            g_dot_y += g * yy;
        }
        let out = &mut dx.data[i..i + c];
        for (o, &yy) in out.iter_mut().zip(yv.iter()) {
            *o = (*o - g_dot_y * yy) * inv_norm;
        }
    }
    Ok(dx)
}

/// Two channels of normalized coordinates: channel 0 is column/(w-1),
/// channel 1 is row/(h-1).
pub fn coordinate_channels<S: Scalar>(n: usize, h: usize, w: usize) -> Result<Tensor4<S>> {
    if h < 2 || w < 2 {
        return Err(Error::InvalidConfig(format!(
            "coordinate channels need at least 2x2, got {h}x{w}"
        )));
    }
    let mut t = Tensor4::zeros(n, h, w, 2);
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = t.idx(img, y, x, 0);
                t.data[i] = S::from_f64(x as f64 / (w - 1) as f64);
                t.data[i + 1] = S::from_f64(y as f64 / (h - 1) as f64);
            }
        }
    }
    Ok(t)
}
