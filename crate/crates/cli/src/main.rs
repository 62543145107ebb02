//! `plasmon-g2`: simulate, correlate, fit and report antibunching
//! experiments on quantum-dot ensembles.
//!
//! Each command prints the path of its main artifact on stdout and a human
//! summary on stderr, so commands chain with `$(...)`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use plasmon_g2::correlator::Estimator;
use plasmon_g2::fitter::{self, FitConfig, Inversion, ShelvingLifetime};
use plasmon_g2::kinetics::EnsembleConfig;
use plasmon_g2::pipeline::{self, LabeledReport, RunManifest};
use plasmon_g2::scenario::{self, CorrelatorSettings, DEFAULT_BIN_WIDTH_PS, DEFAULT_WINDOW_PS};
use plasmon_g2::{histio, Exec};

#[derive(Parser)]
#[command(
    name = "plasmon-g2",
    version,
    about = "Photon antibunching of quantum-dot ensembles near plasmonic structures"
)]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full chain for a scenario file and write all artifacts.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: $PLASMON_G2_OUT or ./out].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-correlate detector A against B from a time-tag file.
    Correlate {
        #[arg(long)]
        tags: PathBuf,
        /// Bin width, ps.
        #[arg(long, default_value_t = DEFAULT_BIN_WIDTH_PS)]
        bins: u64,
        /// Half-width of the lag window, ps.
        #[arg(long, default_value_t = DEFAULT_WINDOW_PS)]
        window: u64,
        /// Acquisition length, ps [default: from a manifest.json next to
        /// the tags, else last tag + 1].
        #[arg(long)]
        duration: Option<u64>,
        #[arg(long, value_enum, default_value_t = EstimatorArg::AllPairs)]
        estimator: EstimatorArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a histogram CSV and convert it to lifetimes.
    Fit {
        #[arg(long)]
        hist: PathBuf,
        /// Pump rate, ns⁻¹.
        #[arg(long)]
        k12: f64,
        #[arg(long, default_value_t = 1)]
        n_emitters: u32,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long, value_enum, default_value_t = InversionArg::Exact)]
        inversion: InversionArg,
        /// Row label in the report table [default: histogram file stem].
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate one or more report.json files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Add a row with the mean of all reports.
        #[arg(long)]
        average: bool,
    },
    /// Check a scenario file and echo the resolved configuration.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    AllPairs,
    StartStop,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::AllPairs => Estimator::AllPairs,
            EstimatorArg::StartStop => Estimator::StartStop,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InversionArg {
    Exact,
    ClosedForm,
}

impl From<InversionArg> for Inversion {
    fn from(i: InversionArg) -> Self {
        match i {
            InversionArg::Exact => Inversion::Exact,
            InversionArg::ClosedForm => Inversion::ClosedForm,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.serial {
        Exec::Serial
    } else {
        Exec::default()
    };
    let result = match cli.command {
        Command::Simulate {
            scenario,
            seed,
            out,
        } => simulate(&scenario, seed, out.as_deref(), exec),
        Command::Correlate {
            tags,
            bins,
            window,
            duration,
            estimator,
            out,
        } => {
            let settings = CorrelatorSettings {
                bin_width_ps: bins,
                window_ps: window,
                estimator: estimator.into(),
            };
            correlate(&tags, &settings, duration, out.as_deref(), exec)
        }
        Command::Fit {
            hist,
            k12,
            n_emitters,
            rho,
            inversion,
            label,
            out,
        } => fit(
            &hist,
            k12,
            n_emitters,
            rho,
            inversion.into(),
            label,
            out.as_deref(),
        ),
        Command::Report { reports, average } => report(&reports, average),
        Command::Validate { scenario } => return validate(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_scenario(path: &Path) -> Result<scenario::Scenario> {
    scenario::validate_config(path).map_err(|d| anyhow::anyhow!("{}:\n{d}", path.display()))
}

fn simulate(path: &Path, seed: Option<u64>, out: Option<&Path>, exec: Exec) -> Result<()> {
    let mut s = load_scenario(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let dir = pipeline::output_dir(out);
    let run = pipeline::run(&s, exec)?;
    let manifest = pipeline::write_artifacts(&dir, &s, &run)?;

    eprintln!(
        "scenario {} (seed {}), {} emitters",
        s.name, s.seed, s.n_emitters
    );
    eprintln!(
        "clicks A/B: {} / {} ({:.2} / {:.2} kHz)",
        manifest.clicks[0],
        manifest.clicks[1],
        run.acquisition.rate_hz(plasmon_g2::Channel::A) * 1e-3,
        run.acquisition.rate_hz(plasmon_g2::Channel::B) * 1e-3
    );
    if let Some(f) = &run.fit {
        eprintln!(
            "fit: g2(0) = {:.4} ± {:.4}, gamma1 = {:.4}, gamma2 = {:.5} ns^-1, beta = {:.3}, chi2/dof = {:.3}",
            f.g2_zero(),
            f.sigma[3],
            f.params.gamma1,
            f.params.gamma2,
            f.params.beta,
            f.chi2_reduced
        );
    }
    if let Some(r) = &run.report {
        eprint!(
            "{}",
            fitter::render_table(&[(r.label.clone(), r.report.clone())])
        );
    }
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("artifacts in {}", dir.display());
    println!("{}", dir.join(pipeline::TAGS_FILE).display());
    Ok(())
}

/// Acquisition length for a tag file: explicit, else the sibling manifest,
/// else just past the last tag.
fn resolve_duration(
    tags_path: &Path,
    tags: &plasmon_g2::ttag::TagSet,
    explicit: Option<u64>,
) -> Result<u64> {
    if let Some(d) = explicit {
        return Ok(d);
    }
    let manifest = tags_path.with_file_name(pipeline::MANIFEST_FILE);
    if manifest.exists() {
        return Ok(RunManifest::read(&manifest)?.duration_ps);
    }
    match tags.first_last() {
        Some((_, last)) => Ok(last + 1),
        None => bail!(
            "{} holds no tags and no --duration was given",
            tags_path.display()
        ),
    }
}

fn correlate(
    tags_path: &Path,
    settings: &CorrelatorSettings,
    duration: Option<u64>,
    out: Option<&Path>,
    exec: Exec,
) -> Result<()> {
    let tags = pipeline::read_tags(tags_path)?;
    let duration = resolve_duration(tags_path, &tags, duration)?;
    let h = pipeline::correlate_tags(&tags, duration, settings, exec)?;
    let dir = pipeline::output_dir(out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv = dir.join(pipeline::HISTOGRAM_FILE);
    histio::write(&h, &csv)?;
    let zero = h.n_bins() / 2;
    eprintln!(
        "{} bins of {} ps, rates A/B {:.1} / {:.1} Hz, g2 at first positive bin {:.4}",
        h.n_bins(),
        h.bin_width,
        h.rate_a,
        h.rate_b,
        h.g2[zero]
    );
    println!("{}", csv.display());
    Ok(())
}

fn fit(
    hist: &Path,
    k12: f64,
    n_emitters: u32,
    rho: f64,
    inversion: Inversion,
    label: Option<String>,
    out: Option<&Path>,
) -> Result<()> {
    let ensemble = EnsembleConfig::new(n_emitters, rho)?;
    let h = histio::read(hist)?;
    let result = match fitter::fit_g2(&h, &FitConfig::default()) {
        Ok(r) => r,
        Err(fitter::FitError::NonConvergence(r)) => {
            eprintln!(
                "warning: fit did not converge after {} iterations",
                r.n_iterations
            );
            *r
        }
        Err(e) => return Err(e.into()),
    };
    let dir = pipeline::output_dir(out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    pipeline::write_json(&dir.join(pipeline::FIT_FILE), &result)?;
    if !result.is_identifiable() {
        eprintln!("warning: fit amplitude is compatible with zero; lifetimes are not identifiable");
    }
    let label = label.unwrap_or_else(|| {
        hist.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let rep = fitter::report_photophysics(&result, k12, &ensemble, inversion)?;
    let labeled = LabeledReport {
        label: label.clone(),
        k12,
        report: rep.clone(),
    };
    pipeline::write_json(&dir.join(pipeline::REPORT_FILE), &labeled)?;
    let table = fitter::render_table(&[(label, rep)]);
    fs::write(dir.join(pipeline::TABLE_FILE), &table)
        .with_context(|| format!("writing {}", dir.display()))?;
    eprintln!(
        "g2(0) = {:.4} ± {:.4}, chi2/dof = {:.3}",
        result.g2_zero(),
        result.sigma[3],
        result.chi2_reduced
    );
    eprint!("{table}");
    println!("{}", dir.join(pipeline::REPORT_FILE).display());
    Ok(())
}

fn report(paths: &[PathBuf], average: bool) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<LabeledReport>(&text)
                .with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<_> = reports
        .iter()
        .map(|r| (r.label.clone(), r.report.clone()))
        .collect();
    if average {
        let all: Vec<_> = reports.iter().map(|r| r.report.clone()).collect();
        if let Some(mean) = fitter::average_reports(&all) {
            rows.push(("mean".into(), mean));
        }
    }
    print!("{}", fitter::render_table(&rows));
    if let [a, b] = reports.as_slice() {
        let (ta, tb) = (a.report.tau21, b.report.tau21);
        let ratio = ta.value / tb.value;
        let sigma = ratio * ((ta.sigma / ta.value).powi(2) + (tb.sigma / tb.value).powi(2)).sqrt();
        println!(
            "tau21 ratio {} / {} = {ratio:.2} ± {sigma:.2}",
            a.label, b.label
        );
    }
    for r in &reports {
        if matches!(r.report.tau23, ShelvingLifetime::NoShelving) {
            println!("{}: no shelving detected", r.label);
        }
    }
    Ok(())
}

fn validate(path: &Path) -> ExitCode {
    match scenario::validate_config(path) {
        Ok(s) => {
            print!("{}", scenario::describe(&s));
            ExitCode::SUCCESS
        }
        Err(d) => {
            eprintln!("{}:\n{d}", path.display());
            ExitCode::from(2)
        }
    }
}
