use num_bigint::BigUint;

use super::GrayRaster;

/// 256-bin intensity histogram.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram(pub [u64; 256]);

impl Default for Histogram {
    fn default() -> Self {
        Histogram([0; 256])
    }
}

impl Histogram {
    pub fn from_values(values: impl IntoIterator<Item = u8>) -> Self {
        let mut h = Histogram::default();
        for v in values {
            h.0[v as usize] += 1;
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += b;
        }
    }
}

/// Otsu threshold of a raster; pixels `≤ t` form one class, `> t` the other.
pub fn otsu_threshold(gray: &GrayRaster) -> u8 {
    let h = Histogram::from_values(gray.as_slice().iter().copied());
    otsu_threshold_from_histogram(&h).expect("rasters are non-empty")
}

/// Smallest threshold maximizing the between-class variance, or `None` for an
/// empty histogram. A histogram with a single occupied bin returns that bin.
///
/// Comparisons are exact: the between-class variance at `t` is proportional
/// to `(n0·s1 − n1·s0)² / (n0·n1)`, compared by integer cross-multiplication.
pub fn otsu_threshold_from_histogram(hist: &Histogram) -> Option<u8> {
    let total: u64 = hist.total();
    if total == 0 {
        return None;
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| hist.0[i] > 0).collect();
    if occupied.len() == 1 {
        return Some(occupied[0] as u8);
    }
    let sum: u128 = hist.0.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let wide = total > (1 << 28);

    let mut best_t = 0u8;
    let mut best: Option<(u128, u128)> = None;
    let mut best_big: Option<(BigUint, BigUint)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..256usize {
        n0 += hist.0[t] as u128;
        s0 += t as u128 * hist.0[t] as u128;
        let n1 = total as u128 - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = sum - s0;
        let (a, b) = (n0 * s1, n1 * s0);
        let d = a.abs_diff(b);
        let den = n0 * n1;
        if wide {
            let num = BigUint::from(d) * BigUint::from(d);
            let den = BigUint::from(den);
            let better = match &best_big {
                None => true,
                Some((bn, bd)) => &num * bd > bn * &den,
            };
            if better {
                best_big = Some((num, den));
                best_t = t as u8;
            }
        } else {
            let num = d * d;
            let better = match best {
                None => true,
                Some((bn, bd)) => mul_wide(num, bd) > mul_wide(bn, den),
            };
            if better {
                best = Some((num, den));
                best_t = t as u8;
            }
        }
    }
    Some(best_t)
}

/// Full 256-bit product as (high, low).
fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    const MASK: u128 = (1 << 64) - 1;
    let (a_hi, a_lo) = (a >> 64, a & MASK);
    let (b_hi, b_lo) = (b >> 64, b & MASK);
    let ll = a_lo * b_lo;
    let lh = a_lo * b_hi;
    let hl = a_hi * b_lo;
    let hh = a_hi * b_hi;
    let mid = (ll >> 64) + (lh & MASK) + (hl & MASK);
    let lo = (ll & MASK) | (mid << 64);
    let hi = hh + (lh >> 64) + (hl >> 64) + (mid >> 64);
    (hi, lo)
}
