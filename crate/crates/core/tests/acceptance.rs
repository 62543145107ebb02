//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run a subset with
//! `cargo test -p plasmon-g2 --test acceptance -- 2 5`.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plasmon_g2::correlator::{self, cross_correlate, swap_symmetry_check, TimeTagStream};
use plasmon_g2::fitter::{self, FitConfig, FitParams, FitResult, Inversion, ShelvingLifetime};
use plasmon_g2::kinetics::{self, EnsembleConfig, RateSet};
use plasmon_g2::optics::{self, Background, FiberConfig};
use plasmon_g2::pipeline;
use plasmon_g2::presets::{self, Preset};
use plasmon_g2::scenario::Scenario;
use plasmon_g2::{Channel, Exec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Preset rates, lossless direct collection split 50:50 over two detectors.
fn ideal(p: &Preset, n: u32, duration_ns: f64, seed: u64) -> Scenario {
    let mut s = Scenario::from_preset(p, FiberConfig::DirectPlane, n).with_ideal_detection();
    s.channel.fibers = FiberConfig::DirectPlane;
    s.background = Background::Rho(1.0);
    s.duration_ns = duration_ns;
    s.seed = seed;
    s
}

fn fit_of(s: &Scenario) -> FitResult {
    let out = pipeline::run(s, Exec::default()).expect("pipeline runs");
    let fit = out.fit.expect("fit produced");
    assert!(fit.converged, "fit of {} did not converge", s.name);
    fit
}

fn model_minimum(fit: &FitResult, window_ns: f64) -> f64 {
    (0..=20_000)
        .map(|i| fitter::model(i as f64 * window_ns / 20_000.0, &fit.params))
        .fold(f64::INFINITY, f64::min)
}

fn antibunching_law() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [1u32, 2, 5, 10] {
        let t = Instant::now();
        let fit = fit_of(&ideal(&presets::SILVER, n, 1e7, 100 + n as u64));
        let secs = t.elapsed().as_secs_f64();
        let g0 = model_minimum(&fit, 150.0);
        let want = 1.0 - 1.0 / n as f64;
        let ok = (g0 - want).abs() <= 0.03 && secs < 30.0;
        pass &= ok;
        parts.push(format!("N={n}: g2(0)={g0:.4} (want {want:.3}, {secs:.1}s)"));
    }
    outcome(pass, parts.join("; "))
}

fn lifetimes_within(p: &Preset, s: &Scenario) -> (bool, String) {
    let t = Instant::now();
    let fit = fit_of(s);
    let r = fitter::report_photophysics(&fit, p.k12(), &s.ensemble(), Inversion::Exact)
        .expect("inversion");
    let secs = t.elapsed().as_secs_f64();
    let tau23 = match r.tau23 {
        ShelvingLifetime::Finite(e) => e.value,
        ShelvingLifetime::NoShelving => f64::INFINITY,
    };
    let rel = |got: f64, want: f64| (got - want).abs() / want;
    let q = 100.0 * r.quantum_yield.value;
    let ok = rel(r.tau21.value, p.tau21) <= 0.15
        && rel(tau23, p.tau23) <= 0.15
        && rel(r.tau31.value, p.tau31) <= 0.15
        && (q - p.quantum_yield_percent).abs() <= 5.0
        && secs < 60.0;
    let detail = format!(
        "{}: tau21={:.2} tau23={:.2} tau31={:.1} ns, Q={:.1}% ({:.1}s)",
        p.key, r.tau21.value, tau23, r.tau31.value, q, secs
    );
    (ok, detail)
}

fn glass_run(seed: u64) -> Scenario {
    let mut s = ideal(&presets::GLASS, 10, 1e9, seed);
    s.correlator.window_ps = 300_000;
    s
}

fn table_round_trip() -> Outcome {
    let (a, da) = lifetimes_within(&presets::SILVER, &ideal(&presets::SILVER, 10, 1e8, 200));
    let (b, db) = lifetimes_within(&presets::GLASS, &glass_run(201));
    outcome(a && b, format!("{da}; {db}"))
}

fn dip_narrowing() -> Outcome {
    let mut ratios = Vec::new();
    for seed in 300..310 {
        let g = fit_of(&glass_run(seed));
        let s = fit_of(&ideal(&presets::SILVER, 10, 1e8, seed));
        let rep = fitter::dip_width_compare(
            &g,
            &s,
            presets::GLASS.k12(),
            presets::SILVER.k12(),
            Inversion::Exact,
        )
        .expect("comparison");
        assert!(rep.silver_narrower);
        ratios.push(rep.tau21_ratio);
    }
    let (m, sd) = common::mean_sd(&ratios);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    let pass = (m - 6.2).abs() <= 1.0 && lo >= 5.2 && hi <= 7.2;
    outcome(
        pass,
        format!(
            "tau21 glass/silver over 10 seeds: mean {m:.2}, sd {sd:.2}, range [{lo:.2}, {hi:.2}]"
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (p, seed) in [(presets::SILVER, 400), (presets::GLASS, 401)] {
        let s = ideal(&p, 1, 1e8, seed);
        let out = pipeline::run(&s, Exec::default()).unwrap();
        let expected = common::oracle_bin_means(&s.rates, &out.histogram);
        let share = common::share_within_3_sigma(&out.histogram, &expected);
        pass &= share >= 0.95;
        parts.push(format!(
            "{} N=1: {:.1}% of bins within 3σ",
            p.key,
            100.0 * share
        ));
    }
    let two_level = RateSet::new(0.05, 0.1, 0.0, 0.02).unwrap();
    let dp = kinetics::derived_params(&two_level).unwrap();
    let grid: Vec<f64> = (0..3000).map(|i| i as f64 * 0.1).collect();
    let ode = kinetics::conditional_intensity(&two_level, &grid).unwrap();
    let one = EnsembleConfig::default();
    let dev = grid
        .iter()
        .zip(&ode)
        .map(|(&t, o)| (kinetics::g2_model(t, &dp, &one) - o).abs())
        .fold(0.0, f64::max);
    pass &= dev <= 1e-6;
    parts.push(format!("k23=0 closed form vs ODE: max |Δ| = {dev:.2e}"));
    outcome(pass, parts.join("; "))
}

fn exact_properties() -> Outcome {
    let mut parts = Vec::new();
    // Inversion identity.
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut sets: Vec<RateSet> = presets::ALL.iter().map(|p| p.rates()).collect();
    for _ in 0..200 {
        sets.push(
            RateSet::new(
                rng.random_range(0.01..0.2),
                rng.random_range(0.01..0.5),
                rng.random_range(0.001..0.2),
                rng.random_range(0.001..0.1),
            )
            .unwrap(),
        );
    }
    for r in &sets {
        let back = kinetics::invert_rates(&kinetics::derived_params(r).unwrap(), r.k12).unwrap();
        for (a, b) in [(back.k21, r.k21), (back.k23, r.k23), (back.k31, r.k31)] {
            worst = worst.max((a - b).abs() / b);
        }
    }
    let inversion_ok = worst <= 1e-12;
    parts.push(format!("inversion identity max rel err {worst:.1e}"));

    // Brute-force pair counting on 1e3-tag streams.
    let mut brute_ok = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(510 + seed);
        let duration = 2_000_000u64;
        let mut tags = |n: usize| {
            let mut v: Vec<u64> = (0..n).map(|_| rng.random_range(0..=duration)).collect();
            v.sort_unstable();
            v
        };
        let (a, b) = (tags(1000), tags(1000));
        let width = [1u64, 7, 1000, 2500][seed as usize % 4];
        let lag_max = width * [3u64, 40, 17, 10][seed as usize % 4];
        let sa = TimeTagStream::new(a.clone(), Channel::A, duration).unwrap();
        let sb = TimeTagStream::new(b.clone(), Channel::B, duration).unwrap();
        let h = cross_correlate(&sa, &sb, lag_max, width).unwrap();
        let (counts, zero) = common::brute_force_counts(&a, &b, lag_max, width, false);
        brute_ok &= h.counts == counts && h.zero_lag == zero;
        let h_auto = correlator::auto_correlate(&sa, lag_max, width).unwrap();
        let (auto_counts, _) = common::brute_force_counts(&a, &a, lag_max, width, true);
        brute_ok &= h_auto.counts == auto_counts;
    }
    parts.push(format!(
        "brute-force pair counts {}",
        if brute_ok { "identical" } else { "DIFFER" }
    ));

    // Mirror identity on a pipeline stream pair.
    let s = ideal(&presets::SILVER, 10, 2e6, 520);
    let acq = pipeline::acquire(&s, Exec::default()).unwrap();
    let (a, b) = (
        acq.stream(Channel::A).unwrap(),
        acq.stream(Channel::B).unwrap(),
    );
    let h_ab = cross_correlate(&a, &b, 150_000, 1000).unwrap();
    let h_ba = cross_correlate(&b, &a, 150_000, 1000).unwrap();
    let mirror_ok = swap_symmetry_check(&h_ab, &h_ba).is_ok();
    parts.push(format!(
        "mirror identity {}",
        if mirror_ok { "exact" } else { "VIOLATED" }
    ));

    // Byte-identical reruns.
    let mut s = Scenario::from_preset(&presets::SILVER, FiberConfig::AB, 10);
    s.duration_ns = 5e6;
    s.seed = 530;
    let s = s.with_ideal_detection();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    pipeline::run_pipeline(&s, d1.path(), Exec::Parallel).unwrap();
    pipeline::run_pipeline(&s, d2.path(), Exec::Serial).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(d1.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let rerun_ok = names.len() >= 7
        && names.iter().all(|n| {
            std::fs::read(d1.path().join(n)).unwrap() == std::fs::read(d2.path().join(n)).unwrap()
        });
    parts.push(format!(
        "{} artifacts byte-identical across reruns: {rerun_ok}",
        names.len()
    ));

    outcome(
        inversion_ok && brute_ok && mirror_ok && rerun_ok,
        parts.join("; "),
    )
}

fn background_law() -> Outcome {
    let mut s = ideal(&presets::SILVER, 1, 3e7, 600);
    s.background = Background::Rho(0.8);
    let fit = fit_of(&s);
    let g0 = model_minimum(&fit, 150.0);
    outcome(
        (g0 - 0.36).abs() <= 0.03,
        format!("rho=0.8, N=1: g2(0)={g0:.4} (want 0.36)"),
    )
}

fn geometry_values() -> Outcome {
    let eta = optics::coupling_ratio(1.04).unwrap();
    let formula = 1.04f64.powi(2) / (1.04f64.powi(2) - 1.0);
    let eta_ok = (eta - formula).abs() <= 1e-10 && format!("{eta:.2}") == "13.25";
    let g = optics::DetectionGeometry::default();
    let frac = g.collection_fraction();
    let frac_ok = (frac - 0.07).abs() <= 1e-12;
    let mut s = Scenario::from_preset(&presets::SILVER, FiberConfig::AB, 10);
    s.duration_ns = 2e8;
    s.seed = 700;
    let acq = pipeline::acquire(&s, Exec::default()).unwrap();
    let rates = [acq.rate_hz(Channel::A) / 1e3, acq.rate_hz(Channel::B) / 1e3];
    let rate_ok = rates.iter().all(|r| (5.0..=10.0).contains(r));
    outcome(
        eta_ok && frac_ok && rate_ok,
        format!(
            "eta(1.04)={eta:.10} (n²/(n²−1)={formula:.10}); collection={frac:.4}; silver N=10 A-B rates {:.2}/{:.2} kHz",
            rates[0], rates[1]
        ),
    )
}

fn isotropy() -> Outcome {
    let fits: Vec<(FiberConfig, FitResult)> = [FiberConfig::AA, FiberConfig::BB, FiberConfig::AB]
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let mut s = Scenario::from_preset(&presets::SILVER, f, 10).with_ideal_detection();
            s.duration_ns = 1e8;
            s.seed = 800 + i as u64;
            (f, fit_of(&s))
        })
        .collect();
    let mut pass = true;
    let mut worst = 0.0f64;
    for i in 0..fits.len() {
        for j in i + 1..fits.len() {
            let (a, b) = (&fits[i].1, &fits[j].1);
            let (pa, pb) = (a.params.to_array(), b.params.to_array());
            for k in 0..4 {
                let z = (pa[k] - pb[k]).abs() / (a.sigma[k].powi(2) + b.sigma[k].powi(2)).sqrt();
                worst = worst.max(z);
                pass &= z <= 2.0;
            }
        }
    }
    let summary: Vec<String> = fits
        .iter()
        .map(|(f, r)| {
            format!(
                "{f:?} γ1={:.3}±{:.3} β={:.2}±{:.2}",
                r.params.gamma1, r.sigma[0], r.params.beta, r.sigma[2]
            )
        })
        .collect();
    outcome(
        pass,
        format!(
            "{}; largest pairwise |Δ|/σ = {worst:.2}",
            summary.join(", ")
        ),
    )
}

fn fitter_numerics() -> Outcome {
    let grid: Vec<f64> = (-150..150).map(|i| i as f64 + 0.5).collect();
    let silver = FitParams::from_shape(
        &kinetics::derived_params(&presets::SILVER.rates()).unwrap(),
        0.1,
    );
    let jac = fitter::jacobian_check(&silver, &grid);
    let mut worst = 0.0f64;
    for p in [
        silver,
        FitParams::from_shape(
            &kinetics::exact_params(&presets::GLASS.rates()).unwrap(),
            0.1,
        ),
    ] {
        let y: Vec<f64> = grid.iter().map(|&t| fitter::model(t, &p)).collect();
        let fit =
            fitter::fit_points(&grid, &y, &vec![0.01; grid.len()], &FitConfig::default()).unwrap();
        for (a, b) in fit.params.to_array().iter().zip(p.to_array()) {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }
    outcome(
        jac < 1e-5 && worst < 1e-6,
        format!("Jacobian deviation {jac:.1e}; noiseless refit max rel err {worst:.1e}"),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "antibunching law g2(0) = 1 - 1/N", antibunching_law),
        (2, "lifetime table round trip", table_round_trip),
        (3, "dip narrowing glass vs silver", dip_narrowing),
        (4, "rate-equation oracle equivalence", oracle_equivalence),
        (5, "exact properties", exact_properties),
        (6, "background law g2(0) = 1 - rho^2/N", background_law),
        (7, "geometry values and count rate", geometry_values),
        (8, "isotropy of A-A, B-B, A-B", isotropy),
        (9, "fitter numerics", fitter_numerics),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n} {}: {name} | {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
