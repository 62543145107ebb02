mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plasmon_g2::correlator::{
    auto_correlate, correlate_with, cross_correlate, swap_symmetry_check, Estimator, TimeTagStream,
};
use plasmon_g2::optics::{Background, FiberConfig};
use plasmon_g2::pipeline;
use plasmon_g2::presets;
use plasmon_g2::scenario::Scenario;
use plasmon_g2::{Channel, Exec};

fn sorted(mut v: Vec<u64>) -> Vec<u64> {
    v.sort_unstable();
    v
}

/// Tags drawn from a narrow range so that ties and bin-edge lags are common.
fn tags(max_len: usize) -> impl Strategy<Value = Vec<u64>> {
    (1u64..5_000)
        .prop_flat_map(move |span| prop::collection::vec(0..=span, 1..max_len))
        .prop_map(sorted)
}

fn window() -> impl Strategy<Value = (u64, u64)> {
    (1u64..300, 1u64..30).prop_map(|(w, k)| (w, w * k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_brute_force(a in tags(300), b in tags(300), (width, lag_max) in window()) {
        let duration = a.last().unwrap().max(b.last().unwrap()) + 1;
        let sa = TimeTagStream::new(a.clone(), Channel::A, duration).unwrap();
        let sb = TimeTagStream::new(b.clone(), Channel::B, duration).unwrap();
        let h = cross_correlate(&sa, &sb, lag_max, width).unwrap();
        let (counts, zero) = common::brute_force_counts(&a, &b, lag_max, width, false);
        prop_assert_eq!(&h.counts, &counts);
        prop_assert_eq!(h.zero_lag, zero);

        let auto = auto_correlate(&sa, lag_max, width).unwrap();
        let (auto_counts, _) = common::brute_force_counts(&a, &a, lag_max, width, true);
        prop_assert_eq!(auto.counts, auto_counts);
    }

    #[test]
    fn mirror_identity(a in tags(300), b in tags(300), (width, lag_max) in window()) {
        let duration = a.last().unwrap().max(b.last().unwrap()) + 1;
        let sa = TimeTagStream::new(a, Channel::A, duration).unwrap();
        let sb = TimeTagStream::new(b, Channel::B, duration).unwrap();
        let h_ab = cross_correlate(&sa, &sb, lag_max, width).unwrap();
        let h_ba = cross_correlate(&sb, &sa, lag_max, width).unwrap();
        prop_assert!(swap_symmetry_check(&h_ab, &h_ba).is_ok());
    }

    #[test]
    fn normalization_invariant(a in tags(200), b in tags(200), (width, lag_max) in window()) {
        let duration = a.last().unwrap().max(b.last().unwrap()) + 1;
        let sa = TimeTagStream::new(a, Channel::A, duration).unwrap();
        let sb = TimeTagStream::new(b, Channel::B, duration).unwrap();
        let h = cross_correlate(&sa, &sb, lag_max, width).unwrap();
        let denom = h.rate_a * h.rate_b * (h.duration as f64 * 1e-12) * (h.bin_width as f64 * 1e-12);
        for i in 0..h.n_bins() {
            prop_assert!((h.g2[i] - h.counts[i] as f64 / denom).abs() <= 1e-9 * h.g2[i].max(1.0));
            prop_assert!((h.sigma[i] - (h.counts[i] as f64).sqrt() / denom).abs() <= 1e-9 * h.sigma[i].max(1.0));
            prop_assert!(h.g2[i] >= 0.0);
        }
    }
}

fn poisson(rate_per_ps: f64, duration: u64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += -(1.0 - rng.random::<f64>()).ln() / rate_per_ps;
        if t > duration as f64 {
            return out;
        }
        out.push(t as u64);
    }
}

#[test]
fn independent_poisson_streams_are_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let duration = 1_000_000_000u64;
    let a = poisson(1e-4, duration, &mut rng);
    let b = poisson(1e-4, duration, &mut rng);
    assert!(a.len() > 90_000 && b.len() > 90_000);
    let sa = TimeTagStream::new(a, Channel::A, duration).unwrap();
    let sb = TimeTagStream::new(b, Channel::B, duration).unwrap();
    let h = cross_correlate(&sa, &sb, 150_000, 1000).unwrap();
    let flat = vec![1.0; h.n_bins()];
    assert!(common::share_within_3_sigma(&h, &flat) >= 0.95);
    let total: u64 = h.counts.iter().sum();
    let mean = h.g2.iter().sum::<f64>() / h.n_bins() as f64;
    assert!(
        (mean - 1.0).abs() <= 3.0 / (total as f64).sqrt(),
        "mean g2 {mean}"
    );
}

#[test]
fn serial_and_chunked_parallel_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let duration = 500_000_000u64;
    let a = TimeTagStream::new(poisson(2e-4, duration, &mut rng), Channel::A, duration).unwrap();
    let b = TimeTagStream::new(poisson(2e-4, duration, &mut rng), Channel::B, duration).unwrap();
    assert!(a.len() > 3 * 16_384);
    for est in [Estimator::AllPairs, Estimator::StartStop] {
        let s = correlate_with(&a, Some(&b), 50_000, 500, est, Exec::Serial).unwrap();
        let p = correlate_with(&a, Some(&b), 50_000, 500, est, Exec::Parallel).unwrap();
        assert_eq!(s, p);
        let s = correlate_with(&a, None, 50_000, 500, est, Exec::Serial).unwrap();
        let p = correlate_with(&a, None, 50_000, 500, est, Exec::Parallel).unwrap();
        assert_eq!(s, p);
    }
}

#[test]
fn thinning_preserves_g2() {
    let mut s =
        Scenario::from_preset(&presets::SILVER, FiberConfig::DirectPlane, 1).with_ideal_detection();
    s.background = Background::Rho(1.0);
    s.duration_ns = 5e7;
    s.seed = 91;
    let acq = pipeline::acquire(&s, Exec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    let thin = |v: &[u64], rng: &mut ChaCha8Rng| {
        v.iter()
            .copied()
            .filter(|_| rng.random::<bool>())
            .collect::<Vec<_>>()
    };
    let (ta, tb) = (
        thin(&acq.tags.tags[0], &mut rng),
        thin(&acq.tags.tags[1], &mut rng),
    );
    let sa = TimeTagStream::new(ta, Channel::A, acq.duration_ps).unwrap();
    let sb = TimeTagStream::new(tb, Channel::B, acq.duration_ps).unwrap();
    let thinned = cross_correlate(&sa, &sb, 150_000, 1000).unwrap();
    let full = cross_correlate(
        &acq.stream(Channel::A).unwrap(),
        &acq.stream(Channel::B).unwrap(),
        150_000,
        1000,
    )
    .unwrap();
    let oracle = common::oracle_bin_means(&s.rates, &full);
    assert!(common::share_within_3_sigma(&full, &oracle) >= 0.95);
    assert!(common::share_within_3_sigma(&thinned, &oracle) >= 0.95);
    // The dip survives at the same depth.
    let zero = full.n_bins() / 2;
    assert!(thinned.g2[zero] < 0.2 && full.g2[zero] < 0.2);
}

#[test]
fn start_stop_agrees_with_all_pairs_at_short_lags_for_sparse_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let duration = 2_000_000_000u64;
    let a = TimeTagStream::new(poisson(1e-6, duration, &mut rng), Channel::A, duration).unwrap();
    let b = TimeTagStream::new(poisson(1e-6, duration, &mut rng), Channel::B, duration).unwrap();
    let all = correlate_with(
        &a,
        Some(&b),
        20_000,
        1000,
        Estimator::AllPairs,
        Exec::Serial,
    )
    .unwrap();
    let ss = correlate_with(
        &a,
        Some(&b),
        20_000,
        1000,
        Estimator::StartStop,
        Exec::Serial,
    )
    .unwrap();
    let half = all.n_bins() / 2;
    let positive_all: u64 = all.counts[half..].iter().sum();
    let positive_ss: u64 = ss.counts[half..].iter().sum();
    assert!(positive_ss <= positive_all);
    assert!(positive_all - positive_ss <= 2);
    assert!(ss.counts[..half].iter().all(|&c| c == 0));
}
