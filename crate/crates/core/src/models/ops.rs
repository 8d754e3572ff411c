//! Forward and backward kernels for the layers used by the architectures.
//!
//! All image tensors are `B×C×H×W`. Per-image work fans out through
//! [`crate::par`]; cross-image reductions (weight gradients) are summed in
//! image order so results do not depend on scheduling.

use super::linalg::{col2im, gemm, im2col, ConvGeom};
use crate::error::{Error, Result};
use crate::interp;
use crate::par;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

fn conv_dims(x: &Tensor, w: &Tensor, g: ConvGeom) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, ci, kh, kw) = w.dims4()?;
    if ci != c || kh != g.kernel || kw != g.kernel {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input {:?} with kernel {}",
            w.shape(),
            x.shape(),
            g.kernel
        )));
    }
    let ho = g.out_len(h).ok_or_else(|| Error::Shape(format!("input height {h} too small for {g:?}")))?;
    let wo = g.out_len(wd).ok_or_else(|| Error::Shape(format!("input width {wd} too small for {g:?}")))?;
    Ok((b, c, h, wd, o, ho, wo))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Result<Tensor> {
    let (b, c, h, wd, o, ho, wo) = conv_dims(x, w, g)?;
    let p = ho * wo;
    let kk = c * g.kernel * g.kernel;
    let mut out = vec![0.0; b * o * p];
    let (xd, wdata) = (x.data(), w.data());
    par::for_each_chunk_mut(&mut out, o * p, |bi, ob| {
        let xb = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
        if g.is_pointwise() {
            gemm(o, c, p, wdata, false, xb, false, 0.0, ob);
        } else {
            let mut cols = vec![0.0; kk * p];
            im2col(xb, c, h, wd, g, ho, wo, &mut cols);
            gemm(o, kk, p, wdata, false, &cols, false, 0.0, ob);
        }
        if let Some(bias) = bias {
            for (oc, row) in ob.chunks_mut(p).enumerate() {
                let bv = bias.data()[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::from_vec(&[b, o, ho, wo], out)
}

pub struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Tensor,
    pub b: Tensor,
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, gy: &Tensor, g: ConvGeom, need_x: bool) -> Result<ConvGrads> {
    let (b, c, h, wd, o, ho, wo) = conv_dims(x, w, g)?;
    let p = ho * wo;
    let kk = c * g.kernel * g.kernel;
    let plane = c * h * wd;
    let (xd, wdata, gyd) = (x.data(), w.data(), gy.data());
    let per_image = par::map_indexed(b, |bi| {
        let xb = &xd[bi * plane..(bi + 1) * plane];
        let gyb = &gyd[bi * o * p..(bi + 1) * o * p];
        let owned_cols;
        let cols: &[f64] = if g.is_pointwise() {
            xb
        } else {
            let mut buf = vec![0.0; kk * p];
            im2col(xb, c, h, wd, g, ho, wo, &mut buf);
            owned_cols = buf;
            &owned_cols
        };
        let mut gw = vec![0.0; o * kk];
        gemm(o, p, kk, gyb, false, cols, true, 0.0, &mut gw);
        let gx = need_x.then(|| {
            let mut gcols = vec![0.0; kk * p];
            gemm(kk, o, p, wdata, true, gyb, false, 0.0, &mut gcols);
            if g.is_pointwise() {
                gcols
            } else {
                let mut gx = vec![0.0; plane];
                col2im(&gcols, c, h, wd, g, ho, wo, &mut gx);
                gx
            }
        });
        (gx, gw)
    });
    let mut gw = vec![0.0; o * kk];
    let mut gx = need_x.then(|| Vec::with_capacity(b * plane));
    for (gxb, gwb) in per_image {
        gw.iter_mut().zip(&gwb).for_each(|(a, v)| *a += v);
        if let (Some(all), Some(part)) = (gx.as_mut(), gxb) {
            all.extend_from_slice(&part);
        }
    }
    let mut gb = vec![0.0; o];
    for bi in 0..b {
        for (oc, acc) in gb.iter_mut().enumerate() {
            *acc += gyd[(bi * o + oc) * p..(bi * o + oc + 1) * p].iter().sum::<f64>();
        }
    }
    Ok(ConvGrads {
        x: gx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        w: Tensor::from_vec(w.shape(), gw)?,
        b: Tensor::from_vec(&[o], gb)?,
    })
}

/// `(batch, channels, per-channel length)` view shared by 2-D and 4-D inputs.
fn bcl(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(Error::Shape(format!("normalization expects B×C or B×C×H×W, got {:?}", x.shape()))),
    }
}

pub struct NormForward {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var: Vec<f64>,
}

/// Per-channel normalization with statistics over batch and space.
pub fn norm_train_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<NormForward> {
    let (b, c, l) = bcl(x)?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!("norm affine size {} does not match {c} channels", gamma.numel())));
    }
    let n = (b * l) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += xd[(bi * c + ch) * l..][..l].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for bi in 0..b {
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += xd[(bi * c + ch) * l..][..l].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let (xhat, y) = affine(x, &mean, &inv_std, gamma, beta, b, c, l);
    let unbiased = if n > 1.0 { var.iter().map(|v| v * n / (n - 1.0)).collect() } else { var };
    Ok(NormForward {
        y,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: unbiased,
    })
}

pub fn norm_eval_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (b, c, l) = bcl(x)?;
    if gamma.numel() != c || running_mean.numel() != c {
        return Err(Error::Shape(format!("norm parameter size does not match {c} channels")));
    }
    let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let (xhat, y) = affine(x, running_mean.data(), &inv_std, gamma, beta, b, c, l);
    Ok((y, xhat, inv_std))
}

#[allow(clippy::too_many_arguments)]
fn affine(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
    b: usize,
    c: usize,
    l: usize,
) -> (Tensor, Tensor) {
    let mut xhat = x.clone();
    let mut y = x.clone();
    for bi in 0..b {
        for ch in 0..c {
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            let range = (bi * c + ch) * l..(bi * c + ch + 1) * l;
            for (xh, yv) in xhat.data_mut()[range.clone()].iter_mut().zip(&mut y.data_mut()[range]) {
                *xh = (*xh - mu) * is;
                *yv = ga * *xh + be;
            }
        }
    }
    (xhat, y)
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the statistics are
/// differentiated through; otherwise they are constants (eval mode).
pub fn norm_backward(
    gy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    batch_stats: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, l) = bcl(gy)?;
    let n = (b * l) as f64;
    let (gd, xd) = (gy.data(), xhat.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * l..(bi * c + ch + 1) * l;
            for (g, xh) in gd[r.clone()].iter().zip(&xd[r]) {
                dbeta[ch] += g;
                dgamma[ch] += g * xh;
            }
        }
    }
    let mut dx = gy.clone();
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * l..(bi * c + ch + 1) * l;
            let scale = gamma.data()[ch] * inv_std[ch];
            let dxs = &mut dx.data_mut()[r.clone()];
            if batch_stats {
                let (db, dg) = (dbeta[ch], dgamma[ch]);
                for (d, xh) in dxs.iter_mut().zip(&xd[r]) {
                    *d = scale / n * (n * *d - db - xh * dg);
                }
            } else {
                dxs.iter_mut().for_each(|d| *d *= scale);
            }
        }
    }
    Ok((dx, Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?))
}

/// Max pooling; the second value holds the winning input offset within each plane.
pub fn max_pool_forward(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<u32>)> {
    let (b, c, h, w) = x.dims4()?;
    let g = ConvGeom::new(kernel, stride, pad, 1);
    let ho = g.out_len(h).ok_or_else(|| Error::Shape(format!("pool input {h} too small")))?;
    let wo = g.out_len(w).ok_or_else(|| Error::Shape(format!("pool input {w} too small")))?;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0u32;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i as u32;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, ho, wo], out)?, arg))
}

pub fn max_pool_backward(x_shape: &[usize], gy: &Tensor, argmax: &[u32]) -> Result<Tensor> {
    let mut gx = Tensor::zeros(x_shape);
    let (_, _, h, w) = gx.dims4()?;
    let (_, _, ho, wo) = gy.dims4()?;
    for ((gplane, out), args) in gx
        .data_mut()
        .chunks_mut(h * w)
        .zip(gy.data().chunks(ho * wo))
        .zip(argmax.chunks(ho * wo))
    {
        for (g, &a) in out.iter().zip(args) {
            gplane[a as usize] += g;
        }
    }
    Ok(gx)
}

pub fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            let row = &plane[(y / factor) * w..][..w];
            for xo in 0..ow {
                out.push(row[xo / factor]);
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

pub fn upsample_nearest_backward(x_shape: &[usize], gy: &Tensor, factor: usize) -> Result<Tensor> {
    let mut gx = Tensor::zeros(x_shape);
    let (_, _, h, w) = gx.dims4()?;
    let ow = w * factor;
    for (gp, yp) in gx.data_mut().chunks_mut(h * w).zip(gy.data().chunks(h * w * factor * factor)) {
        for (i, g) in yp.iter().enumerate() {
            let (y, x) = (i / ow, i % ow);
            gp[(y / factor) * w + x / factor] += g;
        }
    }
    Ok(gx)
}

pub fn bilinear_forward(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut out = vec![0.0; b * c * oh * ow];
    let xd = x.data();
    par::for_each_chunk_mut(&mut out, oh * ow, |i, o| {
        o.copy_from_slice(&interp::resize_bilinear(&xd[i * h * w..(i + 1) * h * w], h, w, oh, ow));
    });
    Tensor::from_vec(&[b, c, oh, ow], out)
}

pub fn bilinear_backward(x_shape: &[usize], gy: &Tensor) -> Result<Tensor> {
    let mut gx = Tensor::zeros(x_shape);
    let (_, _, h, w) = gx.dims4()?;
    let (_, _, oh, ow) = gy.dims4()?;
    let gd = gy.data();
    par::for_each_chunk_mut(gx.data_mut(), h * w, |i, gp| {
        interp::resize_bilinear_adjoint(&gd[i * oh * ow..(i + 1) * oh * ow], h, w, oh, ow, gp);
    });
    Ok(gx)
}

/// `B×C×H×W → B×C×1×1`.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let n = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
    Tensor::from_vec(&[b, c, 1, 1], data)
}

pub fn global_avg_pool_backward(x_shape: &[usize], gy: &Tensor) -> Result<Tensor> {
    let mut gx = Tensor::zeros(x_shape);
    let (_, _, h, w) = gx.dims4()?;
    let n = (h * w) as f64;
    for (p, g) in gx.data_mut().chunks_mut(h * w).zip(gy.data()) {
        p.fill(g / n);
    }
    Ok(gx)
}

/// Concatenates along the channel axis.
pub fn concat_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let (b, _, h, w) = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?
        .dims4()?;
    let mut channels = 0;
    for p in parts {
        let (pb, pc, ph, pw) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "cannot concatenate {:?} with {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
        channels += pc;
    }
    let mut out = Vec::with_capacity(b * channels * h * w);
    for bi in 0..b {
        for p in parts {
            let per = p.numel() / b;
            out.extend_from_slice(&p.data()[bi * per..(bi + 1) * per]);
        }
    }
    Tensor::from_vec(&[b, channels, h, w], out)
}

pub fn concat_backward(shapes: &[Vec<usize>], gy: &Tensor) -> Result<Vec<Tensor>> {
    let b = gy.shape()[0];
    let mut outs: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let per_item = gy.numel() / b;
    for bi in 0..b {
        let mut off = bi * per_item;
        for (o, s) in outs.iter_mut().zip(shapes) {
            let n: usize = s[1..].iter().product();
            o.extend_from_slice(&gy.data()[off..off + n]);
            off += n;
        }
    }
    outs.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::from_vec(s, d))
        .collect()
}

/// `x (B×In) · wᵀ (In×Out) + b`.
pub fn linear_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, din) = x.dims2()?;
    let (dout, win) = w.dims2()?;
    if win != din {
        return Err(Error::Shape(format!("linear weight {:?} does not fit input {:?}", w.shape(), x.shape())));
    }
    let mut y = vec![0.0; b * dout];
    gemm(b, din, dout, x.data(), false, w.data(), true, 0.0, &mut y);
    if let Some(bias) = bias {
        for row in y.chunks_mut(dout) {
            row.iter_mut().zip(bias.data()).for_each(|(v, bv)| *v += bv);
        }
    }
    Tensor::from_vec(&[b, dout], y)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, din) = x.dims2()?;
    let (dout, _) = w.dims2()?;
    let mut gx = vec![0.0; b * din];
    gemm(b, dout, din, gy.data(), false, w.data(), false, 0.0, &mut gx);
    let mut gw = vec![0.0; dout * din];
    gemm(dout, b, din, gy.data(), true, x.data(), false, 0.0, &mut gw);
    let mut gb = vec![0.0; dout];
    for row in gy.data().chunks(dout) {
        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    Ok((
        Tensor::from_vec(&[b, din], gx)?,
        Tensor::from_vec(&[dout, din], gw)?,
        Tensor::from_vec(&[dout], gb)?,
    ))
}
