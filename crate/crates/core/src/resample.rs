//! Differentiable bilinear resampling (half-pixel centers, edge clamped).

use ndarray::Array3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, w_hi }
        })
        .collect()
}

/// Output size of a scale factor: `ceil(s·H) × ceil(s·W)`.
pub fn scaled_dims(height: usize, width: usize, scale: f64) -> Result<(usize, usize)> {
    // 1e-9 absorbs representation error such as 1.1 * 10 = 11.000000000000002
    let dim = |n: usize| (scale * n as f64 - 1e-9).ceil().max(0.0) as usize;
    let (h, w) = (dim(height), dim(width));
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!(
            "scale {scale} maps {height}x{width} to an empty image"
        )));
    }
    Ok((h, w))
}

/// Bilinear resize of an `H × W × C` array. Same-size resizes are exact copies.
pub fn resize_bilinear(input: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = input.dim();
    if (h, w) == (out_h, out_w) {
        return input.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (oy, y) in ty.iter().enumerate() {
        for (ox, x) in tx.iter().enumerate() {
            for ch in 0..c {
                let top = input[[y.lo, x.lo, ch]] * (1.0 - x.w_hi) + input[[y.lo, x.hi, ch]] * x.w_hi;
                let bot = input[[y.hi, x.lo, ch]] * (1.0 - x.w_hi) + input[[y.hi, x.hi, ch]] * x.w_hi;
                out[[oy, ox, ch]] = top * (1.0 - y.w_hi) + bot * y.w_hi;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps a gradient on the resized image back
/// to the `in_h × in_w` source.
pub fn resize_bilinear_adjoint(grad_out: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (out_h, out_w, c) = grad_out.dim();
    if (out_h, out_w) == (in_h, in_w) {
        return grad_out.clone();
    }
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let mut grad = Array3::zeros((in_h, in_w, c));
    for (oy, y) in ty.iter().enumerate() {
        for (ox, x) in tx.iter().enumerate() {
            for ch in 0..c {
                let g = grad_out[[oy, ox, ch]];
                grad[[y.lo, x.lo, ch]] += g * (1.0 - y.w_hi) * (1.0 - x.w_hi);
                grad[[y.lo, x.hi, ch]] += g * (1.0 - y.w_hi) * x.w_hi;
                grad[[y.hi, x.lo, ch]] += g * y.w_hi * (1.0 - x.w_hi);
                grad[[y.hi, x.hi, ch]] += g * y.w_hi * x.w_hi;
            }
        }
    }
    grad
}
