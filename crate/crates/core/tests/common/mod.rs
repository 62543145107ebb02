#![allow(dead_code)]

use plasmon_g2::correlator::CorrelationHistogram;
use plasmon_g2::kinetics::{self, RateSet};

/// O(n²) pair counting. Bins are closed toward zero lag: bin `k ≥ 0` holds
/// lags in `[k·w, (k+1)·w)`, bin `−k−1` holds `(−(k+1)·w, −k·w]`.
pub fn brute_force_counts(
    a: &[u64],
    b: &[u64],
    lag_max: u64,
    width: u64,
    skip_self: bool,
) -> (Vec<u64>, u64) {
    let half = (lag_max / width) as i64;
    let mut counts = vec![0u64; 2 * half as usize];
    let mut zero = 0;
    for (i, &ta) in a.iter().enumerate() {
        for (j, &tb) in b.iter().enumerate() {
            if skip_self && i == j {
                continue;
            }
            let lag = tb as i128 - ta as i128;
            if lag.unsigned_abs() >= lag_max as u128 {
                continue;
            }
            let k = (lag.unsigned_abs() / width as u128) as i64;
            let signed = if lag >= 0 { k } else { -k - 1 };
            counts[(signed + half) as usize] += 1;
            if lag == 0 {
                zero += 1;
            }
        }
    }
    (counts, zero)
}

/// Bin-averaged single-emitter g2 from the rate equations (Simpson rule,
/// 16 panels per bin).
pub fn oracle_bin_means(rates: &RateSet, h: &CorrelationHistogram) -> Vec<f64> {
    const PANELS: usize = 16;
    let w_ns = h.bin_width as f64 * 1e-3;
    let half = h.n_bins() / 2;
    let grid: Vec<f64> = (0..=half * PANELS)
        .map(|i| i as f64 * w_ns / PANELS as f64)
        .collect();
    let g = kinetics::conditional_intensity(rates, &grid).unwrap();
    let positive: Vec<f64> = (0..half)
        .map(|k| {
            let s = &g[k * PANELS..=(k + 1) * PANELS];
            let mut acc = s[0] + s[PANELS];
            for (i, v) in s.iter().enumerate().take(PANELS).skip(1) {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * v;
            }
            acc / (3.0 * PANELS as f64)
        })
        .collect();
    (0..h.n_bins())
        .map(|i| {
            if i >= half {
                positive[i - half]
            } else {
                positive[half - 1 - i]
            }
        })
        .collect()
}

/// Share of bins whose counts lie within 3σ (Poisson on the expectation)
/// of `expected_g2 · denominator`.
pub fn share_within_3_sigma(h: &CorrelationHistogram, expected_g2: &[f64]) -> f64 {
    let d = h.denominator();
    let ok = h
        .counts
        .iter()
        .zip(expected_g2)
        .filter(|(&c, &g)| {
            let mu = g * d;
            (c as f64 - mu).abs() <= 3.0 * mu.max(1.0).sqrt()
        })
        .count();
    ok as f64 / h.n_bins() as f64
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
