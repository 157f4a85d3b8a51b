use rayon::prelude::*;

use super::{BitMask, Grid};
use crate::error::{Error, Result};

const FAR: f64 = 1e30;

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher), in place.
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this stops at k == 0
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `region`
/// pixel. Pixels of an empty region get `f64::INFINITY`.
pub fn squared_distance_transform(region: &BitMask) -> Grid<f64> {
    let (w, h) = region.dims();
    if region.count() == 0 {
        return Grid::filled(w, h, f64::INFINITY).expect("positive extent");
    }
    let bits = region.as_slice();

    // column pass into a column-major buffer
    let mut cols = vec![0.0f64; w * h];
    cols.par_chunks_mut(h).enumerate().for_each(|(x, col)| {
        let f: Vec<f64> = (0..h).map(|y| if bits[y * w + x] { 0.0 } else { FAR }).collect();
        let mut v = vec![0usize; h];
        let mut z = vec![0.0f64; h + 1];
        dt_1d(&f, col, &mut v, &mut z);
    });

    let mut out = vec![0.0f64; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let f: Vec<f64> = (0..w).map(|x| cols[x * h + y]).collect();
        let mut v = vec![0usize; w];
        let mut z = vec![0.0f64; w + 1];
        dt_1d(&f, row, &mut v, &mut z);
    });
    for d in out.iter_mut() {
        if *d >= FAR / 2.0 {
            *d = f64::INFINITY;
        }
    }
    Grid::from_vec(w, h, out).expect("same dimensions")
}

/// Pixels outside `region` within `radius_um` (Euclidean, pixel centres) of it.
pub fn distance_band(region: &BitMask, radius_um: f64, mpp: f64) -> Result<BitMask> {
    if !radius_um.is_finite() || radius_um <= 0.0 {
        return Err(Error::InvalidParameter(format!("band radius must be positive, got {radius_um}")));
    }
    if !mpp.is_finite() || mpp <= 0.0 {
        return Err(Error::InvalidParameter(format!("mpp must be positive, got {mpp}")));
    }
    let r = radius_um / mpp;
    let limit = r * r * (1.0 + 1e-12);
    let d2 = squared_distance_transform(region);
    let bits: Vec<bool> = d2
        .as_slice()
        .iter()
        .zip(region.as_slice())
        .map(|(&d, &inside)| !inside && d <= limit)
        .collect();
    BitMask::from_vec(region.width(), region.height(), bits)
}
