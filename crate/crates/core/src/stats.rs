//! Small numeric helpers shared across modules.
//!
//! Percentiles use linear interpolation between order statistics, the same
//! convention everywhere so reported IQRs and medians are reproducible.

/// `p`-th percentile (0..=100) of `values`, linear interpolation between
/// adjacent order statistics. Empty input returns NaN.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in percentile"));
    percentile_sorted(&sorted, p)
}

pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

/// Interquartile range: 75th minus 25th percentile.
pub fn iqr(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in iqr"));
    percentile_sorted(&sorted, 75.0) - percentile_sorted(&sorted, 25.0)
}

/// Weighted mean with weights `w` (assumed non-negative, not all zero).
pub fn weighted_mean(values: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    values.iter().zip(w).map(|(v, wi)| v * wi).sum::<f64>() / sw
}

/// Population-style weighted standard deviation:
/// sqrt(sum w_i (v_i - mu)^2 / sum w_i).
pub fn weighted_std(values: &[f64], w: &[f64]) -> f64 {
    let mu = weighted_mean(values, w);
    let sw: f64 = w.iter().sum();
    let var = values
        .iter()
        .zip(w)
        .map(|(v, wi)| wi * (v - mu) * (v - mu))
        .sum::<f64>()
        / sw;
    var.max(0.0).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// FNV-1a over bytes; used to derive per-mask noise streams that do not
/// depend on query order.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
