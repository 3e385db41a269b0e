//! Vector similarity, budget distances and seed derivation.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::types::{ImageSample, TextSample};

static DEGENERATE_COSINES: AtomicU64 = AtomicU64::new(0);

/// Cosine similarity together with a flag telling whether either input had
/// zero norm (in which case `value` is 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_flagged(u: &[f64], v: &[f64]) -> Cosine {
    assert_eq!(u.len(), v.len(), "cosine of vectors with different lengths");
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        DEGENERATE_COSINES.fetch_add(1, Ordering::Relaxed);
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    // sqrt(n * n) == n exactly, so cos(x, x) is exactly 1
    let value = dot / (nu * nv).sqrt();
    Cosine {
        value: value.clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// `u·v / (‖u‖‖v‖)`. A zero-norm input yields 0 and bumps the counter read by
/// [`degenerate_cosine_count`].
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    cosine_flagged(u, v).value
}

/// Number of zero-norm cosine evaluations seen by this process.
pub fn degenerate_cosine_count() -> u64 {
    DEGENERATE_COSINES.load(Ordering::Relaxed)
}

/// Gradient of `cos(a, b)` with respect to `b`, written into `out` (accumulated
/// with factor `scale`). Returns the cosine value.
pub(crate) fn cosine_grad_wrt_second(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        DEGENERATE_COSINES.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    let cos = dot / (na * nb);
    let inv = 1.0 / (na * nb);
    let self_coef = cos / (nb * nb);
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (x * inv - self_coef * y);
    }
    cos
}

/// Largest absolute per-pixel difference between two images of identical shape.
pub fn linf_distance(a: &ImageSample, b: &ImageSample) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "L-inf distance between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a
        .pixels()
        .iter()
        .zip(b.pixels().iter())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max))
}

/// Number of word positions that differ. Unequal lengths add the length
/// difference to the mismatches over the common prefix.
pub fn word_edit_distance(a: &TextSample, b: &TextSample) -> usize {
    let (ta, tb) = (a.tokens(), b.tokens());
    let common = ta.len().min(tb.len());
    let mismatches = ta[..common]
        .iter()
        .zip(&tb[..common])
        .filter(|(x, y)| x != y)
        .count();
    mismatches + ta.len().abs_diff(tb.len())
}

/// Derives a child seed from a base seed and a label (splitmix64 over FNV-1a).
pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ fnv1a(label.as_bytes()))
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
