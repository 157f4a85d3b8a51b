use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest smaller-sample size that uses the exact null distribution.
pub const EXACT_MAX_N: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub method: MwMethod,
}

/// Doubled midranks of the pooled sample (integers, so ties stay exact).
fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1..=j average to (i + 1 + j) / 2
        let r2 = (i + 1 + j) as u64;
        for &k in &order[i..j] {
            ranks[k] = r2;
        }
        i = j;
    }
    ranks
}

/// Mann–Whitney U test with midranks for ties.
///
/// When the smaller sample has at most eight values the p-value comes from
/// the exact permutation distribution of the rank sum; otherwise from the
/// normal approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("Mann-Whitney samples must be finite".to_owned()));
    }
    let (na, nb) = (a.len() as u64, b.len() as u64);
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let ra2: u64 = ranks[..a.len()].iter().sum();
    // 2U = 2R - n(n+1)
    let u2 = ra2 - na * (na + 1);
    let u = u2 as f64 / 2.0;

    if a.len().min(b.len()) <= EXACT_MAX_N {
        let (k, observed) = if na <= nb { (a.len(), ra2) } else { (b.len(), ranks.iter().sum::<u64>() - ra2) };
        let p_value = exact_p(&ranks, k, observed);
        return Ok(MannWhitney { u, p_value, method: MwMethod::Exact });
    }

    let (naf, nbf, nf) = (na as f64, nb as f64, n as f64);
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = naf * nbf / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney { u, p_value: 1.0, method: MwMethod::Normal });
    }
    let mean = naf * nbf / 2.0;
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = (2.0 * normal.sf(z)).min(1.0);
    Ok(MannWhitney { u, p_value, method: MwMethod::Normal })
}

/// Exact two-sided p: the share of size-`k` subsets of `ranks` whose rank
/// sum is at least as far from its mean as `observed`.
fn exact_p(ranks: &[u64], k: usize, observed: u64) -> f64 {
    let max_sum: u64 = {
        let mut r = ranks.to_vec();
        r.sort_unstable();
        r.iter().rev().take(k).sum()
    };
    let width = max_sum as usize + 1;
    // counts[j][s]: subsets of size j with doubled rank sum s
    let mut counts = vec![vec![0u128; width]; k + 1];
    counts[0][0] = 1;
    for (seen, &r) in ranks.iter().enumerate() {
        let r = r as usize;
        for j in (1..=k.min(seen + 1)).rev() {
            let (lo, hi) = counts.split_at_mut(j);
            let prev = &lo[j - 1];
            let cur = &mut hi[0];
            for s in (r..width).rev() {
                if prev[s - r] != 0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    let n = ranks.len() as u64;
    // mean doubled rank sum is k(n+1); compare doubled deviations
    let mean = k as u64 * (n + 1);
    let dev = observed.abs_diff(mean);
    let mut extreme = 0u128;
    let mut total = 0u128;
    for (s, &c) in counts[k].iter().enumerate() {
        total += c;
        if (s as u64).abs_diff(mean) >= dev {
            extreme += c;
        }
    }
    (extreme as f64 / total as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_triplets() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.method, MwMethod::Exact);
        assert!((r.p_value - 0.1).abs() < 1e-15);
        let r = mann_whitney_u(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.u, 9.0);
    }

    #[test]
    fn identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.u, 8.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let big: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let r = mann_whitney_u(&big, &big).unwrap();
        assert_eq!(r.method, MwMethod::Normal);
        assert!(r.p_value > 0.95);
    }

    #[test]
    fn midranks() {
        assert_eq!(doubled_midranks(&[3.0, 1.0, 3.0, 2.0]), vec![7, 2, 7, 4]);
        let r = mann_whitney_u(&[1.0, 2.0, 2.0], &[2.0, 3.0]).unwrap();
        let r2 = mann_whitney_u(&[2.0, 3.0], &[1.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.u + r2.u, 6.0);
    }

    #[test]
    fn all_tied() {
        let a = vec![5.0; 12];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn empty_sample() {
        assert!(matches!(mann_whitney_u(&[], &[1.0]), Err(Error::EmptySample)));
    }
}
