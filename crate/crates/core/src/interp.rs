//! Bilinear and nearest-neighbour resampling of single planes.
//!
//! Sampling uses half-pixel centres: output index `i` maps to source
//! coordinate `(i + 0.5) * in / out - 0.5`, clamped to the valid range.

/// One output position's bilinear taps: lower index, upper index, weight of the upper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { s - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Source index for nearest-neighbour output index `i`.
pub fn nearest_index(i: usize, in_len: usize, out_len: usize) -> usize {
    (((2 * i + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}

pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for y in &ty {
        let r0 = &src[y.lo * w..(y.lo + 1) * w];
        let r1 = &src[y.hi * w..(y.hi + 1) * w];
        for x in &tx {
            let top = (1.0 - x.frac) * r0[x.lo] + x.frac * r0[x.hi];
            let bot = (1.0 - x.frac) * r1[x.lo] + x.frac * r1[x.hi];
            out.push((1.0 - y.frac) * top + y.frac * bot);
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients back onto the source grid.
pub fn resize_bilinear_adjoint(
    grad_out: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_src: &mut [f64],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for (oy, y) in ty.iter().enumerate() {
        for (ox, x) in tx.iter().enumerate() {
            let g = grad_out[oy * ow + ox];
            let gt = (1.0 - y.frac) * g;
            let gb = y.frac * g;
            grad_src[y.lo * w + x.lo] += (1.0 - x.frac) * gt;
            grad_src[y.lo * w + x.hi] += x.frac * gt;
            grad_src[y.hi * w + x.lo] += (1.0 - x.frac) * gb;
            grad_src[y.hi * w + x.hi] += x.frac * gb;
        }
    }
}

pub fn resize_nearest(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let xs: Vec<usize> = (0..ow).map(|x| nearest_index(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let row = &src[nearest_index(y, h, oh) * w..][..w];
        out.extend(xs.iter().map(|&x| row[x]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_bilinear_is_exact_passthrough() {
        let src: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(resize_bilinear(&src, 5, 7, 5, 7), src);
    }

    #[test]
    fn nearest_upscale_duplicates() {
        let src = [1.0, 2.0, 3.0, 4.0];
        let out = resize_nearest(&src, 2, 2, 4, 4);
        assert_eq!(
            out,
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn bilinear_adjoint_matches_dot_product_identity() {
        // <A x, y> == <x, A^T y>
        let (h, w, oh, ow) = (5, 4, 9, 11);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 1.3).cos()).collect();
        let y: Vec<f64> = (0..oh * ow).map(|i| (i as f64 * 0.7).sin()).collect();
        let ax = resize_bilinear(&x, h, w, oh, ow);
        let mut aty = vec![0.0; h * w];
        resize_bilinear_adjoint(&y, h, w, oh, ow, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn constant_field_survives_bilinear() {
        let src = vec![0.25; 12];
        for v in resize_bilinear(&src, 3, 4, 10, 7) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}
