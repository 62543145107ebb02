//! End-to-end chain: simulate → route → time tags → correlate → fit →
//! report, plus the on-disk artifact set and its manifest.

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correlator::{self, CorrelationHistogram, CorrelatorError, TimeTagStream};
use crate::exec::{self, Exec};
use crate::fitter::{self, FitError, FitResult, PhotophysicsReport};
use crate::histio::{self, HistIoError};
use crate::montecarlo::{EnsembleStream, SimConfig, SimError};
use crate::optics::{self, Routed};
use crate::rng::{substream, Stream};
use crate::scenario::{CorrelatorSettings, Diagnostics, Scenario};
use crate::ttag::{self, TagSet, TtagError};
use crate::Channel;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "PLASMON_G2_OUT";
pub const DEFAULT_OUT_DIR: &str = "out";

pub const SCENARIO_FILE: &str = "scenario.json";
pub const TAGS_FILE: &str = "tags.ttag";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const FIT_FILE: &str = "fit.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid scenario:\n{0}")]
    Config(Diagnostics),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Correlator(#[from] CorrelatorError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Ttag(#[from] TtagError),
    #[error(transparent)]
    HistIo(#[from] HistIoError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Output directory: explicit value, else `$PLASMON_G2_OUT`, else `out`.
pub fn output_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| {
            std::env::var_os(OUT_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Detector clicks of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub tags: TagSet,
    pub duration_ps: u64,
    pub emitted_photons: u64,
    pub background_clicks: u64,
}

impl Acquisition {
    pub fn stream(&self, ch: Channel) -> std::result::Result<TimeTagStream, CorrelatorError> {
        TimeTagStream::new(self.tags.tags[ch.index()].clone(), ch, self.duration_ps)
    }

    /// Mean click rate per detector, Hz.
    pub fn rate_hz(&self, ch: Channel) -> f64 {
        self.tags.tags[ch.index()].len() as f64 / (self.duration_ps as f64 * 1e-12)
    }
}

pub fn sim_config(s: &Scenario) -> SimConfig {
    SimConfig {
        duration: s.duration_ns,
        seed: s.seed,
        n_emitters: s.n_emitters,
        rates: s.rates,
        background_rate: s.background_rate(),
    }
}

/// Simulates the ensemble and routes every event to a detector.
///
/// Emitter `i` routes its photons with its own random stream, so the
/// result does not depend on thread count or chunk length.
pub fn acquire(s: &Scenario, exec: Exec) -> Result<Acquisition> {
    s.validate().map_err(PipelineError::Config)?;
    let cfg = sim_config(s);
    let mut stream = EnsembleStream::new(&cfg, exec)?;
    let duration_ps = (s.duration_ns * 1e3).round() as u64;
    let channel = s.channel;
    let mut routers: Vec<(crate::rng::SimRng, Vec<crate::montecarlo::EmissionEvent>)> = (0..s
        .n_emitters)
        .map(|i| (substream(s.seed, Stream::Router(i)), Vec::new()))
        .collect();
    let mut jitter: Vec<_> = Channel::ALL
        .iter()
        .map(|c| substream(s.seed, Stream::Jitter(c.index() as u8)))
        .collect();
    let mut tags = TagSet::default();
    let (mut emitted, mut background) = (0u64, 0u64);

    while let Some((emitter_lists, background_lists)) = stream.next_chunk_by_source() {
        for ((_, slot), list) in routers.iter_mut().zip(emitter_lists) {
            emitted += list.len() as u64;
            *slot = list;
        }
        let routed = exec::map_mut(exec, &mut routers, |(rng, events)| {
            let mut hits = [Vec::new(), Vec::new()];
            for ev in events.drain(..) {
                if let Routed::Hit(h) = optics::route_event(&ev, &channel, rng) {
                    hits[h.channel.index()].push(h.time.min(duration_ps));
                }
            }
            hits
        });
        for [a, b] in routed {
            tags.tags[0].extend(a);
            tags.tags[1].extend(b);
        }
        for list in background_lists {
            background += list.len() as u64;
            for ev in list {
                let crate::montecarlo::Source::Background(ch) = ev.source else {
                    continue;
                };
                if let Routed::Hit(h) = optics::route_event(&ev, &channel, &mut jitter[ch.index()])
                {
                    tags.tags[h.channel.index()].push(h.time.min(duration_ps));
                }
            }
        }
    }
    for t in &mut tags.tags {
        t.sort_unstable();
    }
    Ok(Acquisition {
        tags,
        duration_ps,
        emitted_photons: emitted,
        background_clicks: background,
    })
}

/// Cross-correlates detector A against detector B.
pub fn correlate_tags(
    tags: &TagSet,
    duration_ps: u64,
    settings: &CorrelatorSettings,
    exec: Exec,
) -> Result<CorrelationHistogram> {
    let a = TimeTagStream::new(tags.tags[0].clone(), Channel::A, duration_ps)?;
    let b = TimeTagStream::new(tags.tags[1].clone(), Channel::B, duration_ps)?;
    Ok(correlator::correlate_with(
        &a,
        Some(&b),
        settings.window_ps,
        settings.bin_width_ps,
        settings.estimator,
        exec,
    )?)
}

/// A report tagged with the configuration it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledReport {
    pub label: String,
    pub k12: f64,
    pub report: PhotophysicsReport,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub acquisition: Acquisition,
    pub histogram: CorrelationHistogram,
    /// Absent only when the fit could not start; a non-converged fit is
    /// kept with `converged = false`.
    pub fit: Option<FitResult>,
    pub report: Option<LabeledReport>,
    pub warnings: Vec<String>,
}

/// Runs the whole chain in memory.
pub fn run(s: &Scenario, exec: Exec) -> Result<PipelineOutput> {
    let acquisition = acquire(s, exec)?;
    let histogram = correlate_tags(
        &acquisition.tags,
        acquisition.duration_ps,
        &s.correlator,
        exec,
    )?;
    let mut warnings = Vec::new();
    let fit = match fitter::fit_g2(&histogram, &s.fit.fit_config()) {
        Ok(f) => Some(f),
        Err(FitError::NonConvergence(f)) => {
            warnings.push(format!(
                "fit did not converge after {} iterations",
                f.n_iterations
            ));
            Some(*f)
        }
        Err(e) => {
            warnings.push(format!("fit skipped: {e}"));
            None
        }
    };
    let report = match &fit {
        Some(f) if f.converged => {
            if !f.is_identifiable() {
                warnings.push(
                    "fit amplitude is compatible with zero; lifetimes are not identifiable".into(),
                );
            }
            match fitter::report_photophysics(f, s.fit.k12, &s.ensemble(), s.fit.inversion) {
                Ok(r) => Some(LabeledReport {
                    label: s.name.clone(),
                    k12: s.fit.k12,
                    report: r,
                }),
                Err(e) => {
                    warnings.push(format!("no photophysics report: {e}"));
                    None
                }
            }
        }
        _ => None,
    };
    Ok(PipelineOutput {
        acquisition,
        histogram,
        fit,
        report,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Provenance of a run. It holds no wall-clock time, so two runs of the
/// same scenario produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub duration_ps: u64,
    /// Simulated time span covered by the tags, ps.
    pub first_tag_ps: Option<u64>,
    pub last_tag_ps: Option<u64>,
    pub clicks: [u64; 2],
    pub artifacts: Vec<ArtifactRecord>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Io {
            path: path.into(),
            source: io::Error::new(io::ErrorKind::InvalidData, e),
        })
    }
}

fn json_string<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data");
    s.push('\n');
    s
}

fn record(dir: &Path, file: &str) -> Result<ArtifactRecord> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(ArtifactRecord {
        file: file.to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

pub fn write_tags(path: &Path, tags: &TagSet) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    ttag::write(BufWriter::new(f), tags)?;
    Ok(())
}

pub fn read_tags(path: &Path) -> Result<TagSet> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(ttag::read(io::BufReader::new(f))?)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, json_string(v)).map_err(io_err(path))
}

/// Writes every artifact of `out` into `dir` and returns the manifest
/// (also written as `manifest.json`).
pub fn write_artifacts(dir: &Path, s: &Scenario, out: &PipelineOutput) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = vec![SCENARIO_FILE, TAGS_FILE, HISTOGRAM_FILE, "histogram.json"];
    write_json(&dir.join(SCENARIO_FILE), s)?;
    write_tags(&dir.join(TAGS_FILE), &out.acquisition.tags)?;
    histio::write(&out.histogram, &dir.join(HISTOGRAM_FILE))?;
    if let Some(fit) = &out.fit {
        write_json(&dir.join(FIT_FILE), fit)?;
        files.push(FIT_FILE);
    }
    if let Some(r) = &out.report {
        write_json(&dir.join(REPORT_FILE), r)?;
        let table = fitter::render_table(&[(r.label.clone(), r.report.clone())]);
        fs::write(dir.join(TABLE_FILE), table).map_err(io_err(dir))?;
        files.extend([REPORT_FILE, TABLE_FILE]);
    }
    let artifacts = files
        .iter()
        .map(|f| record(dir, f))
        .collect::<Result<Vec<_>>>()?;
    let span = out.acquisition.tags.first_last();
    let manifest = RunManifest {
        tool: "plasmon-g2".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        scenario: s.name.clone(),
        config_hash: s.config_hash(),
        seed: s.seed,
        duration_ps: out.acquisition.duration_ps,
        first_tag_ps: span.map(|s| s.0),
        last_tag_ps: span.map(|s| s.1),
        clicks: [
            out.acquisition.tags.tags[0].len() as u64,
            out.acquisition.tags.tags[1].len() as u64,
        ],
        artifacts,
        warnings: out.warnings.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Runs a scenario and writes all artifacts to `dir`.
pub fn run_pipeline(s: &Scenario, dir: &Path, exec: Exec) -> Result<RunManifest> {
    let out = run(s, exec)?;
    write_artifacts(dir, s, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::FiberConfig;
    use crate::presets;

    fn small() -> Scenario {
        let mut s =
            Scenario::from_preset(&presets::SILVER, FiberConfig::AB, 3).with_ideal_detection();
        s.duration_ns = 2e5;
        s.seed = 11;
        s
    }

    #[test]
    fn acquisition_is_deterministic_and_exec_independent() {
        let s = small();
        let a = acquire(&s, Exec::Serial).unwrap();
        let b = acquire(&s, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.tags.len() > 100);
        assert!(a
            .tags
            .tags
            .iter()
            .all(|t| t.windows(2).all(|w| w[0] <= w[1])));
        assert!(a.tags.tags.iter().flatten().all(|&t| t <= a.duration_ps));
    }

    #[test]
    fn seeds_matter() {
        let s = small();
        let t = Scenario {
            seed: 12,
            ..s.clone()
        };
        assert_ne!(
            acquire(&s, Exec::Serial).unwrap().tags,
            acquire(&t, Exec::Serial).unwrap().tags
        );
    }

    #[test]
    fn background_only_from_rho() {
        let mut s = small();
        s.background = optics::Background::Rho(0.5);
        let a = acquire(&s, Exec::Serial).unwrap();
        assert!(a.background_clicks > 0);
        let r = s.background_rate();
        assert!((r - s.signal_rate_per_detector()).abs() < 1e-15);
    }

    #[test]
    fn invalid_scenario_is_rejected_before_running() {
        let mut s = small();
        s.background = optics::Background::Rho(1.5);
        assert!(matches!(
            acquire(&s, Exec::Serial),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn output_dir_resolution() {
        assert_eq!(output_dir(Some(Path::new("x"))), PathBuf::from("x"));
    }
}
