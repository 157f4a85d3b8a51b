use rayon::prelude::*;

use super::RgbTile;
use crate::error::{Error, Result};

const ONE: u32 = 1 << 16;

/// Symmetric reflection of `i` into `0..n` (edge pixel repeated: `-1 → 0`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// 1-D Gaussian taps in Q16 fixed point, radius `ceil(3·sigma)`.
///
/// Taps sum to exactly `1 << 16`; the rounding residual goes to the centre
/// tap, so the 2-D separable kernel sums to exactly `1 << 32` and constant
/// tiles pass through unchanged.
pub fn gaussian_kernel_q16(sigma: f64) -> Result<Vec<u32>> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let mut taps: Vec<u32> = raw.iter().map(|g| (g / total * ONE as f64).round() as u32).collect();
    let sum: i64 = taps.iter().map(|&t| t as i64).sum();
    let centre = radius as usize;
    taps[centre] = (taps[centre] as i64 + (ONE as i64 - sum)) as u32;
    Ok(taps)
}

/// Separable Gaussian blur of each channel with reflected edges.
///
/// Arithmetic is exact integer fixed point: the horizontal pass accumulates
/// into `u32`, the vertical pass into `u64`, and the result is rounded once.
pub fn gaussian_smooth(img: &RgbTile, sigma: f64) -> Result<RgbTile> {
    let taps = gaussian_kernel_q16(sigma)?;
    let radius = (taps.len() / 2) as isize;
    let (w, h) = img.dims();
    let src = img.as_slice();

    let mut horiz = vec![[0u32; 3]; w * h];
    horiz.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        let row = &src[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = [0u32; 3];
            for (k, &t) in taps.iter().enumerate() {
                let p = row[reflect_index(x as isize + k as isize - radius, w)];
                acc[0] += t * p[0] as u32;
                acc[1] += t * p[1] as u32;
                acc[2] += t * p[2] as u32;
            }
            *o = acc;
        }
    });

    let mut out = vec![[0u8; 3]; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut acc = vec![[0u64; 3]; w];
        for (k, &t) in taps.iter().enumerate() {
            let sy = reflect_index(y as isize + k as isize - radius, h);
            let src_row = &horiz[sy * w..(sy + 1) * w];
            let t = t as u64;
            for (a, s) in acc.iter_mut().zip(src_row) {
                a[0] += t * s[0] as u64;
                a[1] += t * s[1] as u64;
                a[2] += t * s[2] as u64;
            }
        }
        for (o, a) in row.iter_mut().zip(&acc) {
            for c in 0..3 {
                o[c] = ((a[c] + (1u64 << 31)) >> 32) as u8;
            }
        }
    });
    RgbTile::from_vec(w, h, out)
}
