//! Coincidence histograms from two time-tag streams.
//!
//! The default estimator counts every ordered pair `(t_a, t_b)` whose lag
//! `t_b − t_a` lies inside the window, using one sliding window per stream
//! (`O(n_a + n_b + pairs)`). Normalizing by `n_a·n_b·w/T` turns counts into
//! g2, so independent Poisson streams give 1.
//!
//! Bin layout: `2L/w` bins of width `w` on `[−L, L)`. Bins are closed on the
//! side facing zero lag: `[lo, lo + w)` for `lo ≥ 0` and `(lo, lo + w]` for
//! `lo < 0`, so a lag and its negation always land in mirrored bins. A lag
//! of exactly zero goes to the bin starting at 0; such pairs are also
//! tallied in [`CorrelationHistogram::zero_lag`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Exec};
use crate::Channel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelatorError {
    #[error("time-tag stream on channel {0:?} is empty")]
    EmptyStream(Channel),
    #[error("time tags are not sorted (index {index})")]
    UnsortedInput { index: usize },
    #[error("tag {tag} ps lies beyond the stream duration {duration} ps")]
    OutOfRange { tag: u64, duration: u64 },
    #[error("invalid lag window: {0}")]
    InvalidWindow(String),
    #[error("mirror symmetry violated at bin {bin}: {left} vs {right}")]
    SymmetryViolation { bin: usize, left: u64, right: u64 },
}

pub type Result<T> = std::result::Result<T, CorrelatorError>;

/// Sorted detector clicks in integer picoseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeTagStream {
    tags: Vec<u64>,
    channel: Channel,
    duration: u64,
}

impl TimeTagStream {
    pub fn new(tags: Vec<u64>, channel: Channel, duration: u64) -> Result<Self> {
        if let Some(i) = tags.windows(2).position(|w| w[1] < w[0]) {
            return Err(CorrelatorError::UnsortedInput { index: i + 1 });
        }
        if let Some(&last) = tags.last() {
            if last > duration {
                return Err(CorrelatorError::OutOfRange {
                    tag: last,
                    duration,
                });
            }
        }
        Ok(Self {
            tags,
            channel,
            duration,
        })
    }

    pub fn tags(&self) -> &[u64] {
        &self.tags
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Mean count rate in Hz.
    pub fn rate_hz(&self) -> f64 {
        self.tags.len() as f64 / (self.duration as f64 * 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Every pair inside the window.
    #[default]
    AllPairs,
    /// Only the first stop after each start (legacy TAC-style); non-negative
    /// lags only.
    StartStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    /// ps
    pub bin_width: u64,
    /// ps
    pub lag_min: i64,
    /// ps
    pub lag_max: i64,
    pub counts: Vec<u64>,
    pub g2: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Hz
    pub rate_a: f64,
    /// Hz
    pub rate_b: f64,
    /// ps
    pub duration: u64,
    pub n_a: u64,
    pub n_b: u64,
    /// Pairs with lag exactly 0 (already included in `counts`).
    pub zero_lag: u64,
    pub estimator: Estimator,
}

impl CorrelationHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    /// Lower edge of bin `i`, ps.
    pub fn lag_ps(&self, i: usize) -> i64 {
        self.lag_min + i as i64 * self.bin_width as i64
    }

    /// Bin centers in ns.
    pub fn centers_ns(&self) -> Vec<f64> {
        (0..self.n_bins())
            .map(|i| (self.lag_ps(i) as f64 + 0.5 * self.bin_width as f64) * 1e-3)
            .collect()
    }

    /// Bin `i` mirrored through zero lag.
    pub fn mirror(&self, i: usize) -> usize {
        self.n_bins() - 1 - i
    }

    /// Expected coincidences per bin for uncorrelated streams.
    pub fn denominator(&self) -> f64 {
        self.n_a as f64 * self.n_b as f64 * self.bin_width as f64 / self.duration as f64
    }

    /// Builds a histogram from raw counts and recomputes `g2` and `sigma`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_counts(
        counts: Vec<u64>,
        bin_width: u64,
        lag_max: i64,
        n_a: u64,
        n_b: u64,
        duration: u64,
        zero_lag: u64,
        estimator: Estimator,
    ) -> Self {
        let mut h = Self {
            bin_width,
            lag_min: -lag_max,
            lag_max,
            counts,
            g2: Vec::new(),
            sigma: Vec::new(),
            rate_a: n_a as f64 / (duration as f64 * 1e-12),
            rate_b: n_b as f64 / (duration as f64 * 1e-12),
            duration,
            n_a,
            n_b,
            zero_lag,
            estimator,
        };
        let denom = h.denominator();
        h.g2 = h.counts.iter().map(|&c| c as f64 / denom).collect();
        h.sigma = h
            .counts
            .iter()
            .map(|&c| (c as f64).sqrt() / denom)
            .collect();
        h
    }
}

#[derive(Debug, Clone, Copy)]
struct Window {
    width: u64,
    half_span: i64,
    half_bins: usize,
}

impl Window {
    fn new(lag_max: u64, bin_width: u64) -> Result<Self> {
        if bin_width == 0 {
            return Err(CorrelatorError::InvalidWindow(
                "bin width must be > 0".into(),
            ));
        }
        if lag_max < bin_width {
            return Err(CorrelatorError::InvalidWindow(format!(
                "lag_max {lag_max} ps is smaller than the bin width {bin_width} ps"
            )));
        }
        if !lag_max.is_multiple_of(bin_width) {
            return Err(CorrelatorError::InvalidWindow(format!(
                "lag_max {lag_max} ps is not a multiple of the bin width {bin_width} ps"
            )));
        }
        if lag_max > i64::MAX as u64 / 2 {
            return Err(CorrelatorError::InvalidWindow("lag_max too large".into()));
        }
        Ok(Self {
            width: bin_width,
            half_span: lag_max as i64,
            half_bins: (lag_max / bin_width) as usize,
        })
    }

    #[inline]
    fn bin(&self, lag: i64) -> Option<usize> {
        let m = lag.unsigned_abs();
        if m >= self.half_span as u64 {
            return None;
        }
        let k = (m / self.width) as usize;
        Some(if lag >= 0 {
            self.half_bins + k
        } else {
            self.half_bins - 1 - k
        })
    }
}

struct Tally {
    counts: Vec<u64>,
    zero_lag: u64,
}

impl Tally {
    fn new(n: usize) -> Self {
        Self {
            counts: vec![0; n],
            zero_lag: 0,
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for (c, o) in self.counts.iter_mut().zip(other.counts) {
            *c += o;
        }
        self.zero_lag += other.zero_lag;
        self
    }
}

/// Counts pairs for starts `a[range]` against all of `b`.
/// `skip_self` drops the pair of a tag with itself (auto-correlation).
fn sweep_all_pairs(
    a: &[u64],
    b: &[u64],
    range: std::ops::Range<usize>,
    win: &Window,
    skip_self: bool,
) -> Tally {
    let mut tally = Tally::new(2 * win.half_bins);
    if range.is_empty() {
        return tally;
    }
    let span = win.half_span as u64;
    // First stop with t_b > t_a − L for the first start of the range.
    let first = a[range.start];
    let mut lo = b.partition_point(|&t| t + span <= first);
    for i in range {
        let ta = a[i];
        while lo < b.len() && b[lo] + span <= ta {
            lo += 1;
        }
        let mut k = lo;
        while k < b.len() && b[k] < ta + span {
            if !(skip_self && k == i) {
                let lag = b[k] as i64 - ta as i64;
                if let Some(bin) = win.bin(lag) {
                    tally.counts[bin] += 1;
                    if lag == 0 {
                        tally.zero_lag += 1;
                    }
                }
            }
            k += 1;
        }
    }
    tally
}

fn sweep_start_stop(
    a: &[u64],
    b: &[u64],
    range: std::ops::Range<usize>,
    win: &Window,
    skip_self: bool,
) -> Tally {
    let mut tally = Tally::new(2 * win.half_bins);
    for i in range {
        let ta = a[i];
        let k = if skip_self {
            i + 1
        } else {
            b.partition_point(|&t| t < ta)
        };
        if let Some(&tb) = b.get(k) {
            let lag = tb as i64 - ta as i64;
            if let Some(bin) = win.bin(lag) {
                tally.counts[bin] += 1;
                if lag == 0 {
                    tally.zero_lag += 1;
                }
            }
        }
    }
    tally
}

fn correlate_impl(
    a: &TimeTagStream,
    b: &TimeTagStream,
    lag_max: u64,
    bin_width: u64,
    estimator: Estimator,
    auto: bool,
    exec: Exec,
) -> Result<CorrelationHistogram> {
    let win = Window::new(lag_max, bin_width)?;
    if a.is_empty() {
        return Err(CorrelatorError::EmptyStream(a.channel));
    }
    if b.is_empty() {
        return Err(CorrelatorError::EmptyStream(b.channel));
    }
    let duration = a.duration.min(b.duration);
    if duration == 0 {
        return Err(CorrelatorError::InvalidWindow(
            "zero acquisition span".into(),
        ));
    }
    let (ta, tb) = (a.tags(), b.tags());
    let sweep = match estimator {
        Estimator::AllPairs => sweep_all_pairs,
        Estimator::StartStop => sweep_start_stop,
    };
    // Fixed chunking keeps the reduction identical for any thread count.
    const CHUNK: usize = 1 << 14;
    let n_chunks = ta.len().div_ceil(CHUNK);
    let partial = exec::map_range(exec, n_chunks, |c| {
        let range = c * CHUNK..((c + 1) * CHUNK).min(ta.len());
        sweep(ta, tb, range, &win, auto)
    });
    let tally = partial
        .into_iter()
        .fold(Tally::new(2 * win.half_bins), Tally::merge);
    Ok(CorrelationHistogram::from_counts(
        tally.counts,
        bin_width,
        win.half_span,
        a.len() as u64,
        b.len() as u64,
        duration,
        tally.zero_lag,
        estimator,
    ))
}

/// g2(τ) between two detectors; τ = t_b − t_a.
pub fn cross_correlate(
    a: &TimeTagStream,
    b: &TimeTagStream,
    lag_max: u64,
    bin_width: u64,
) -> Result<CorrelationHistogram> {
    correlate_impl(
        a,
        b,
        lag_max,
        bin_width,
        Estimator::AllPairs,
        false,
        Exec::default(),
    )
}

/// g2(τ) of one stream with itself, excluding each tag's pair with itself.
pub fn auto_correlate(
    a: &TimeTagStream,
    lag_max: u64,
    bin_width: u64,
) -> Result<CorrelationHistogram> {
    correlate_impl(
        a,
        a,
        lag_max,
        bin_width,
        Estimator::AllPairs,
        true,
        Exec::default(),
    )
}

/// Full-control entry point used by the pipeline and benchmarks.
pub fn correlate_with(
    a: &TimeTagStream,
    b: Option<&TimeTagStream>,
    lag_max: u64,
    bin_width: u64,
    estimator: Estimator,
    exec: Exec,
) -> Result<CorrelationHistogram> {
    match b {
        Some(b) => correlate_impl(a, b, lag_max, bin_width, estimator, false, exec),
        None => correlate_impl(a, a, lag_max, bin_width, estimator, true, exec),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub bins_checked: usize,
    pub total_counts: u64,
}

/// Checks `h_ba(τ) = h_ab(−τ)` bin by bin for histograms of the same two
/// streams with roles swapped.
pub fn swap_symmetry_check(
    h_ab: &CorrelationHistogram,
    h_ba: &CorrelationHistogram,
) -> Result<SymmetryReport> {
    if h_ab.bin_width != h_ba.bin_width
        || h_ab.lag_max != h_ba.lag_max
        || h_ab.n_bins() != h_ba.n_bins()
    {
        return Err(CorrelatorError::InvalidWindow(
            "histograms use different binning".into(),
        ));
    }
    if h_ab.zero_lag != h_ba.zero_lag {
        return Err(CorrelatorError::SymmetryViolation {
            bin: h_ab.n_bins() / 2,
            left: h_ab.zero_lag,
            right: h_ba.zero_lag,
        });
    }
    let zero_bin = h_ab.n_bins() / 2;
    // Zero-lag pairs sit in the bin starting at 0 on both sides.
    let strip = |h: &CorrelationHistogram, i: usize| {
        h.counts[i] - if i == zero_bin { h.zero_lag } else { 0 }
    };
    for i in 0..h_ab.n_bins() {
        let left = strip(h_ba, i);
        let right = strip(h_ab, h_ab.mirror(i));
        if left != right {
            return Err(CorrelatorError::SymmetryViolation {
                bin: i,
                left,
                right,
            });
        }
    }
    Ok(SymmetryReport {
        bins_checked: h_ab.n_bins(),
        total_counts: h_ab.counts.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const NS: u64 = 1000;

    fn stream(tags_ns: &[u64], ch: Channel) -> TimeTagStream {
        TimeTagStream::new(tags_ns.iter().map(|t| t * NS).collect(), ch, 30 * NS).unwrap()
    }

    #[test]
    fn small_worked_example() {
        let a = stream(&[0, 10, 20], Channel::A);
        let b = stream(&[5, 15], Channel::B);
        let h = cross_correlate(&a, &b, 6 * NS, NS).unwrap();
        assert_eq!(h.n_bins(), 12);
        let nonzero: Vec<(i64, u64)> = (0..h.n_bins())
            .filter(|&i| h.counts[i] > 0)
            .map(|i| (h.lag_ps(i), h.counts[i]))
            .collect();
        // −5 ns lands in (−6, −5], +5 ns in [5, 6).
        assert_eq!(nonzero, vec![(-6000, 2), (5000, 2)]);
    }

    #[test]
    fn window_validation() {
        let a = stream(&[0, 10], Channel::A);
        assert!(matches!(
            cross_correlate(&a, &a, 500, 1000),
            Err(CorrelatorError::InvalidWindow(_))
        ));
        assert!(matches!(
            cross_correlate(&a, &a, 1500, 1000),
            Err(CorrelatorError::InvalidWindow(_))
        ));
        assert!(matches!(
            cross_correlate(&a, &a, 1000, 0),
            Err(CorrelatorError::InvalidWindow(_))
        ));
        let empty = TimeTagStream::new(vec![], Channel::B, 10).unwrap();
        assert_eq!(
            cross_correlate(&a, &empty, 1000, 1000),
            Err(CorrelatorError::EmptyStream(Channel::B))
        );
    }

    #[test]
    fn unsorted_rejected() {
        assert_eq!(
            TimeTagStream::new(vec![5, 3], Channel::A, 10),
            Err(CorrelatorError::UnsortedInput { index: 1 })
        );
        assert!(TimeTagStream::new(vec![5, 30], Channel::A, 10).is_err());
    }

    #[test]
    fn periodic_stream_has_empty_window() {
        let tags: Vec<u64> = (0..100).map(|i| i * 50 * NS).collect();
        let a = TimeTagStream::new(tags, Channel::A, 5000 * NS).unwrap();
        let h = auto_correlate(&a, 40 * NS, NS).unwrap();
        assert!(h.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn auto_equals_cross_minus_self_pairs() {
        let a = stream(&[1, 2, 2, 4, 9, 13], Channel::A);
        let auto = auto_correlate(&a, 5 * NS, NS).unwrap();
        let cross = cross_correlate(&a, &a, 5 * NS, NS).unwrap();
        let zero = auto.n_bins() / 2;
        for i in 0..auto.n_bins() {
            let self_pairs = if i == zero { a.len() as u64 } else { 0 };
            assert_eq!(auto.counts[i], cross.counts[i] - self_pairs);
        }
        // The duplicated tag at 2 ns pairs with its twin in both directions.
        assert_eq!(auto.zero_lag, 2);
    }

    #[test]
    fn mirror_holds_with_edge_lags_and_zero_lag() {
        let a = stream(&[0, 3, 7, 8, 20], Channel::A);
        let b = stream(&[3, 4, 10, 11, 21, 29], Channel::B);
        let ab = cross_correlate(&a, &b, 8 * NS, NS).unwrap();
        let ba = cross_correlate(&b, &a, 8 * NS, NS).unwrap();
        assert_eq!(ab.zero_lag, 1);
        swap_symmetry_check(&ab, &ba).unwrap();
    }

    #[test]
    fn single_bin_pair_window() {
        let a = stream(&[0, 3, 7], Channel::A);
        let b = stream(&[1, 6], Channel::B);
        let ab = cross_correlate(&a, &b, NS, NS).unwrap();
        let ba = cross_correlate(&b, &a, NS, NS).unwrap();
        assert_eq!(ab.n_bins(), 2);
        swap_symmetry_check(&ab, &ba).unwrap();
    }

    #[test]
    fn symmetry_violation_detected() {
        let a = stream(&[0, 3, 7], Channel::A);
        let b = stream(&[1, 6], Channel::B);
        let ab = cross_correlate(&a, &b, 4 * NS, NS).unwrap();
        let mut ba = cross_correlate(&b, &a, 4 * NS, NS).unwrap();
        ba.counts[0] += 1;
        assert!(matches!(
            swap_symmetry_check(&ab, &ba),
            Err(CorrelatorError::SymmetryViolation { .. })
        ));
    }

    #[test]
    fn start_stop_takes_first_stop_only() {
        let a = stream(&[0, 10], Channel::A);
        let b = stream(&[2, 4, 12], Channel::B);
        let h =
            correlate_with(&a, Some(&b), 6 * NS, NS, Estimator::StartStop, Exec::Serial).unwrap();
        let nonzero: Vec<(i64, u64)> = (0..h.n_bins())
            .filter(|&i| h.counts[i] > 0)
            .map(|i| (h.lag_ps(i), h.counts[i]))
            .collect();
        assert_eq!(nonzero, vec![(2000, 2)]);
    }

    #[test]
    fn normalization_formula() {
        let a = stream(&[0, 10, 20], Channel::A);
        let b = stream(&[5, 15], Channel::B);
        let h = cross_correlate(&a, &b, 6 * NS, NS).unwrap();
        let denom = 3.0 * 2.0 * 1000.0 / (30.0 * 1000.0);
        for i in 0..h.n_bins() {
            assert_eq!(h.g2[i], h.counts[i] as f64 / denom);
            assert_eq!(h.sigma[i], (h.counts[i] as f64).sqrt() / denom);
        }
        assert!((h.rate_a - 1e8).abs() < 1e-3);
    }
}
