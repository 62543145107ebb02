//! Scenario files.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! name = "silver_AB"
//! rates = "silver"          # preset key, or { k12 = .., k21 = .., k23 = .., k31 = .. }
//!                           # or { tau12 = .., tau21 = .., tau23 = .., tau31 = .. } in ns
//! n_emitters = 10
//! rho = 1.0                 # or background_rate = <ns^-1 per detector>
//! duration_ns = 1e8
//! seed = 42
//! fiber_config = "AB"       # AA, BB, AB, DirectPlane
//! budget = "silver_filtered" # glass, silver_filtered, silver_unfiltered, ideal, or a table
//!
//! [geometry]                # optional overrides
//! n_spp = 1.04
//!
//! [optics]
//! fraction_vertical = 0.333
//! jitter_ps = 0.0
//!
//! [correlator]
//! bin_width_ps = 1000
//! window_ps = 150000
//!
//! [fit]
//! k12 = 0.037               # defaults to the scenario's k12
//! inversion = "exact"       # or "closed_form"
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correlator::Estimator;
use crate::fitter::{FitConfig, Inversion};
use crate::kinetics::{self, EnsembleConfig, RateSet};
use crate::optics::{
    self, AzimuthPattern, Background, ChannelScenario, DetectionChannel, DetectionGeometry,
    DipoleMix, EfficiencyBudget, FiberConfig,
};
use crate::presets::{self, Preset};

pub const DEFAULT_BIN_WIDTH_PS: u64 = 1000;
pub const DEFAULT_WINDOW_PS: u64 = 150_000;
pub const DEFAULT_DURATION_NS: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DiagnosticKind {
    Syntax,
    InvalidValue,
    InvalidGeometry,
    InvalidBudget,
    InvalidRates,
    UnknownPreset,
}

/// One problem found in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    /// 1-based line, when the offending key could be located.
    pub line: Option<usize>,
    pub field: String,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if !self.field.is_empty() {
            write!(f, "{}: ", self.field)?;
        }
        match self.kind {
            DiagnosticKind::InvalidGeometry => write!(f, "InvalidGeometry: {}", self.message),
            DiagnosticKind::InvalidBudget => write!(f, "InvalidBudget: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics(pub Vec<Diagnostic>);

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Diagnostics {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelatorSettings {
    pub bin_width_ps: u64,
    /// Half-width of the symmetric lag window.
    pub window_ps: u64,
    pub estimator: Estimator,
}

impl Default for CorrelatorSettings {
    fn default() -> Self {
        Self {
            bin_width_ps: DEFAULT_BIN_WIDTH_PS,
            window_ps: DEFAULT_WINDOW_PS,
            estimator: Estimator::AllPairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    /// Pump rate used for rate inversion, ns⁻¹.
    pub k12: f64,
    pub inversion: Inversion,
    pub max_iterations: usize,
}

impl FitSettings {
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            max_iterations: self.max_iterations,
            ..FitConfig::default()
        }
    }
}

/// A fully resolved scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub preset: Option<String>,
    pub rates: RateSet,
    pub n_emitters: u32,
    pub background: Background,
    pub channel: DetectionChannel,
    pub duration_ns: f64,
    pub seed: u64,
    pub correlator: CorrelatorSettings,
    pub fit: FitSettings,
}

impl Scenario {
    /// Preset rates measured through the preset's own detection chain.
    pub fn from_preset(p: &Preset, fibers: FiberConfig, n_emitters: u32) -> Self {
        let (budget, background) = optics::scenario_budget(p.channel);
        let fibers = if p.channel == ChannelScenario::Glass {
            FiberConfig::DirectPlane
        } else {
            fibers
        };
        Self {
            name: format!("{}_{:?}", p.key, fibers),
            preset: Some(p.key.to_string()),
            rates: p.rates(),
            n_emitters,
            background,
            channel: DetectionChannel {
                geometry: DetectionGeometry {
                    fourier_filter_on: p.channel != ChannelScenario::Glass,
                    ..DetectionGeometry::default()
                },
                budget,
                mix: DipoleMix::default(),
                fibers,
                pattern: AzimuthPattern::Isotropic,
                jitter_ps: 0.0,
            },
            duration_ns: DEFAULT_DURATION_NS,
            seed: 0,
            correlator: CorrelatorSettings::default(),
            fit: FitSettings {
                k12: p.k12(),
                inversion: Inversion::Exact,
                max_iterations: FitConfig::default().max_iterations,
            },
        }
    }

    /// Lossless detection: every photon that reaches a fiber is counted.
    pub fn with_ideal_detection(mut self) -> Self {
        self.channel.budget = EfficiencyBudget::ideal();
        self
    }

    /// Checks every invariant; field names match the file keys.
    pub fn validate(&self) -> Result<(), Diagnostics> {
        let mut d = Vec::new();
        let mut push = |field: &str, kind, message: String| {
            d.push(Diagnostic {
                line: None,
                field: field.to_string(),
                kind,
                message,
            });
        };
        if let Err(e) = self.rates.validate() {
            push("rates", DiagnosticKind::InvalidRates, e.to_string());
        }
        if self.n_emitters == 0 {
            push(
                "n_emitters",
                DiagnosticKind::InvalidValue,
                "n_emitters must be >= 1".into(),
            );
        }
        match self.background {
            Background::Rho(rho) if !(0.0..=1.0).contains(&rho) => push(
                "rho",
                DiagnosticKind::InvalidValue,
                "rho out of [0,1]".into(),
            ),
            Background::Rho(0.0) => push(
                "rho",
                DiagnosticKind::InvalidValue,
                "rho = 0 means no signal at all".into(),
            ),
            Background::Rate(r) if !(r >= 0.0 && r.is_finite()) => push(
                "background_rate",
                DiagnosticKind::InvalidValue,
                "background_rate must be >= 0".into(),
            ),
            _ => {}
        }
        if let Err(e) = self.channel.geometry.validate() {
            push(
                "geometry",
                DiagnosticKind::InvalidGeometry,
                strip_kind(&e.to_string()),
            );
        }
        if let Err(e) = self.channel.budget.validate() {
            push(
                "budget",
                DiagnosticKind::InvalidBudget,
                strip_kind(&e.to_string()),
            );
        }
        if let Err(e) = self.channel.mix.validate() {
            push(
                "optics.fraction_vertical",
                DiagnosticKind::InvalidValue,
                e.to_string(),
            );
        }
        if let Err(e) = self.channel.validate() {
            if self.channel.geometry.validate().is_ok()
                && self.channel.budget.validate().is_ok()
                && self.channel.mix.validate().is_ok()
            {
                push("optics", DiagnosticKind::InvalidValue, e.to_string());
            }
        }
        if !(self.duration_ns > 0.0 && self.duration_ns.is_finite()) {
            push(
                "duration_ns",
                DiagnosticKind::InvalidValue,
                "duration_ns must be > 0".into(),
            );
        } else if self.duration_ns * 1e3 >= u64::MAX as f64 {
            push(
                "duration_ns",
                DiagnosticKind::InvalidValue,
                "duration_ns does not fit in u64 picoseconds".into(),
            );
        }
        let c = &self.correlator;
        if c.bin_width_ps == 0 {
            push(
                "correlator.bin_width_ps",
                DiagnosticKind::InvalidValue,
                "bin_width_ps must be > 0".into(),
            );
        } else if c.window_ps < c.bin_width_ps || !c.window_ps.is_multiple_of(c.bin_width_ps) {
            push(
                "correlator.window_ps",
                DiagnosticKind::InvalidValue,
                format!(
                    "window_ps = {} must be a positive multiple of bin_width_ps = {}",
                    c.window_ps, c.bin_width_ps
                ),
            );
        }
        if !(self.fit.k12 > 0.0 && self.fit.k12.is_finite()) {
            push(
                "fit.k12",
                DiagnosticKind::InvalidValue,
                "k12 must be > 0".into(),
            );
        }
        if self.fit.max_iterations == 0 {
            push(
                "fit.max_iterations",
                DiagnosticKind::InvalidValue,
                "max_iterations must be > 0".into(),
            );
        }
        if d.is_empty() {
            Ok(())
        } else {
            Err(Diagnostics(d))
        }
    }

    /// Detector-level signal fraction ρ (1 without background).
    pub fn rho(&self) -> f64 {
        match self.background {
            Background::Rho(rho) => rho,
            Background::Rate(r) => {
                let s = self.signal_rate_per_detector();
                if s + r > 0.0 {
                    s / (s + r)
                } else {
                    1.0
                }
            }
        }
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            n_emitters: self.n_emitters,
            rho: self.rho(),
        }
    }

    /// Expected emitter clicks per detector, ns⁻¹ (mean of both detectors).
    pub fn signal_rate_per_detector(&self) -> f64 {
        let per_emitter = kinetics::photon_rate(&self.rates).unwrap_or(0.0);
        let eff = self.channel.detection_efficiency();
        self.n_emitters as f64 * per_emitter * 0.5 * (eff[0] + eff[1])
    }

    /// Background clicks per detector, ns⁻¹.
    pub fn background_rate(&self) -> f64 {
        self.background.rate(self.signal_rate_per_detector())
    }

    /// Lifetimes of the resolved rates, ns.
    pub fn lifetimes(&self) -> [f64; 4] {
        let r = &self.rates;
        [1.0 / r.k12, 1.0 / r.k21, 1.0 / r.k23, 1.0 / r.k31]
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plain data");
        hex::encode(Sha256::digest(&json))
    }
}

fn strip_kind(s: &str) -> String {
    s.split_once(": ")
        .map(|(_, rest)| rest.to_string())
        .unwrap_or_else(|| s.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawRates {
    Preset(String),
    Rates(RateSet),
    Lifetimes(RawLifetimes),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLifetimes {
    tau12: f64,
    tau21: f64,
    tau23: f64,
    tau31: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawBudget {
    Preset(String),
    Table(EfficiencyBudget),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    n_spp: Option<f64>,
    n_glass: Option<f64>,
    fiber_a_angle: Option<f64>,
    fiber_b_angle: Option<f64>,
    fiber_effective_diameter: Option<f64>,
    ring_radius_bfp: Option<f64>,
    fourier_filter_on: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptics {
    fraction_vertical: Option<f64>,
    jitter_ps: Option<f64>,
    pattern: Option<AzimuthPattern>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorrelator {
    bin_width_ps: Option<u64>,
    window_ps: Option<u64>,
    estimator: Option<Estimator>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFit {
    k12: Option<f64>,
    inversion: Option<Inversion>,
    max_iterations: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    rates: RawRates,
    n_emitters: Option<u32>,
    rho: Option<f64>,
    background_rate: Option<f64>,
    duration_ns: Option<f64>,
    seed: Option<u64>,
    fiber_config: Option<String>,
    budget: Option<RawBudget>,
    #[serde(default)]
    geometry: RawGeometry,
    #[serde(default)]
    optics: RawOptics,
    #[serde(default)]
    correlator: RawCorrelator,
    #[serde(default)]
    fit: RawFit,
}

/// Line of `key` inside `[section]` (or the top level), 1-based.
fn locate(src: &str, field: &str) -> Option<usize> {
    let (section, key) = match field.split_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, field),
    };
    let mut current: Option<&str> = None;
    let mut section_line = None;
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = Some(name.trim());
            if current == Some(field) {
                section_line = Some(i + 1);
            }
            continue;
        }
        let Some((k, _)) = t.split_once('=') else {
            continue;
        };
        if current == section && k.trim() == key {
            return Some(i + 1);
        }
    }
    section_line
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Parses and resolves a scenario; all problems are reported together.
pub fn parse_scenario(src: &str) -> Result<Scenario, Diagnostics> {
    let raw: RawScenario = toml::from_str(src).map_err(|e| {
        let line = e.span().map(|s| line_of(src, s.start));
        Diagnostics(vec![Diagnostic {
            line,
            field: String::new(),
            kind: DiagnosticKind::Syntax,
            message: e.message().to_string(),
        }])
    })?;
    let mut diags = Vec::new();
    let mut err = |field: &str, kind, message: String| {
        diags.push(Diagnostic {
            line: locate(src, field),
            field: field.to_string(),
            kind,
            message,
        });
    };

    let (rates, preset) = match raw.rates {
        RawRates::Preset(key) => match presets::preset(&key) {
            Some(p) => (p.rates(), Some(p)),
            None => {
                err(
                    "rates",
                    DiagnosticKind::UnknownPreset,
                    format!("unknown preset {key:?} (known: glass, silver)"),
                );
                (presets::SILVER.rates(), None)
            }
        },
        RawRates::Rates(r) => (r, None),
        RawRates::Lifetimes(l) => match RateSet::from_lifetimes(l.tau12, l.tau21, l.tau23, l.tau31)
        {
            Ok(r) => (r, None),
            Err(e) => {
                err("rates", DiagnosticKind::InvalidRates, e.to_string());
                (presets::SILVER.rates(), None)
            }
        },
    };

    let fibers = match raw.fiber_config.as_deref() {
        None => match preset.map(|p| p.channel) {
            Some(ChannelScenario::Glass) => FiberConfig::DirectPlane,
            _ => FiberConfig::AB,
        },
        Some(s) => s.parse().unwrap_or_else(|_| {
            err(
                "fiber_config",
                DiagnosticKind::InvalidValue,
                format!("unknown fiber_config {s:?} (AA, BB, AB, DirectPlane)"),
            );
            FiberConfig::AB
        }),
    };

    let default_channel = preset.map(|p| p.channel);
    let (budget, preset_background) = match raw.budget {
        None => match default_channel {
            Some(c) => optics::scenario_budget(c),
            None => (EfficiencyBudget::ideal(), Background::Rho(1.0)),
        },
        Some(RawBudget::Table(b)) => (b, Background::Rho(1.0)),
        Some(RawBudget::Preset(name)) if name == "ideal" => {
            (EfficiencyBudget::ideal(), Background::Rho(1.0))
        }
        Some(RawBudget::Preset(name)) => match name.parse::<ChannelScenario>() {
            Ok(c) => optics::scenario_budget(c),
            Err(_) => {
                err(
                    "budget",
                    DiagnosticKind::UnknownPreset,
                    format!("unknown budget {name:?} (glass, silver_filtered, silver_unfiltered, ideal)"),
                );
                (EfficiencyBudget::ideal(), Background::Rho(1.0))
            }
        },
    };

    let background = match (raw.rho, raw.background_rate) {
        (Some(_), Some(_)) => {
            err(
                "background_rate",
                DiagnosticKind::InvalidValue,
                "give either rho or background_rate, not both".into(),
            );
            preset_background
        }
        (Some(rho), None) => Background::Rho(rho),
        (None, Some(rate)) => Background::Rate(rate),
        (None, None) => preset_background,
    };

    let g = raw.geometry;
    let base = DetectionGeometry {
        fourier_filter_on: default_channel != Some(ChannelScenario::Glass),
        ..DetectionGeometry::default()
    };
    let geometry = DetectionGeometry {
        n_spp: g.n_spp.unwrap_or(base.n_spp),
        n_glass: g.n_glass.unwrap_or(base.n_glass),
        fiber_a_angle: g.fiber_a_angle.unwrap_or(base.fiber_a_angle),
        fiber_b_angle: g.fiber_b_angle.unwrap_or(base.fiber_b_angle),
        fiber_effective_diameter: g
            .fiber_effective_diameter
            .unwrap_or(base.fiber_effective_diameter),
        ring_radius_bfp: g.ring_radius_bfp.unwrap_or(base.ring_radius_bfp),
        fourier_filter_on: g.fourier_filter_on.unwrap_or(base.fourier_filter_on),
    };

    let o = raw.optics;
    let channel = DetectionChannel {
        geometry,
        budget,
        mix: DipoleMix {
            fraction_vertical: o
                .fraction_vertical
                .unwrap_or(DipoleMix::default().fraction_vertical),
        },
        fibers,
        pattern: o.pattern.unwrap_or_default(),
        jitter_ps: o.jitter_ps.unwrap_or(0.0),
    };

    let c = raw.correlator;
    let correlator = CorrelatorSettings {
        bin_width_ps: c.bin_width_ps.unwrap_or(DEFAULT_BIN_WIDTH_PS),
        window_ps: c.window_ps.unwrap_or(DEFAULT_WINDOW_PS),
        estimator: c.estimator.unwrap_or_default(),
    };
    let f = raw.fit;
    let fit = FitSettings {
        k12: f.k12.unwrap_or(rates.k12),
        inversion: f.inversion.unwrap_or_default(),
        max_iterations: f
            .max_iterations
            .unwrap_or(FitConfig::default().max_iterations),
    };

    let scenario = Scenario {
        name: raw.name.unwrap_or_else(|| {
            preset
                .map(|p| format!("{}_{fibers:?}", p.key))
                .unwrap_or("scenario".into())
        }),
        preset: preset.map(|p| p.key.to_string()),
        rates,
        n_emitters: raw.n_emitters.unwrap_or(1),
        background,
        channel,
        duration_ns: raw.duration_ns.unwrap_or(DEFAULT_DURATION_NS),
        seed: raw.seed.unwrap_or(0),
        correlator,
        fit,
    };

    if let Err(Diagnostics(found)) = scenario.validate() {
        for mut d in found {
            // Point at the most specific key present in the file.
            let refined = match (d.kind, d.field.as_str()) {
                (DiagnosticKind::InvalidGeometry, _) => refine_geometry(&d.message),
                _ => None,
            };
            if let Some(f) = refined {
                d.field = f;
            }
            d.line = locate(src, &d.field)
                .or_else(|| d.field.split_once('.').and_then(|(s, _)| locate(src, s)));
            diags.push(d);
        }
    }

    if diags.is_empty() {
        Ok(scenario)
    } else {
        Err(Diagnostics(diags))
    }
}

fn refine_geometry(message: &str) -> Option<String> {
    [
        "n_spp",
        "n_glass",
        "fiber_a_angle",
        "fiber_b_angle",
        "fiber",
        "ring",
    ]
    .iter()
    .find(|k| message.starts_with(*k))
    .map(|k| match *k {
        "fiber" => "geometry.fiber_effective_diameter".to_string(),
        "ring" => "geometry.ring_radius_bfp".to_string(),
        k => format!("geometry.{k}"),
    })
}

/// Reads, parses and checks a scenario file without running anything.
pub fn validate_config(path: &Path) -> Result<Scenario, Diagnostics> {
    let src = std::fs::read_to_string(path).map_err(|e| {
        Diagnostics(vec![Diagnostic {
            line: None,
            field: String::new(),
            kind: DiagnosticKind::Syntax,
            message: format!("{}: {e}", path.display()),
        }])
    })?;
    parse_scenario(&src)
}

/// Human-readable summary of a resolved scenario.
pub fn describe(s: &Scenario) -> String {
    let [t12, t21, t23, t31] = s.lifetimes();
    let q = kinetics::quantum_yield(&s.rates).unwrap_or(f64::NAN);
    let mut out = String::new();
    let mut line = |l: String| {
        out.push_str(&l);
        out.push('\n');
    };
    line(format!("scenario {}", s.name));
    if let Some(p) = &s.preset {
        line(format!("preset {p}"));
    }
    line(format!(
        "tau12 = {t12} ns, tau21 = {t21} ns, tau23 = {t23} ns, tau31 = {t31} ns, Q = {:.1}%",
        100.0 * q
    ));
    line(format!(
        "k12 = {:.6} /ns, k21 = {:.6} /ns, k23 = {:.6} /ns, k31 = {:.6} /ns",
        s.rates.k12, s.rates.k21, s.rates.k23, s.rates.k31
    ));
    line(format!(
        "N = {}, rho = {}, fibers = {:?}",
        s.n_emitters,
        s.rho(),
        s.channel.fibers
    ));
    let eff = s.channel.detection_efficiency();
    line(format!(
        "detection efficiency A = {:.4e}, B = {:.4e}; signal {:.3} kHz/detector, background {:.3} kHz/detector",
        eff[0],
        eff[1],
        s.signal_rate_per_detector() * 1e6,
        s.background_rate() * 1e6
    ));
    line(format!(
        "duration = {} ns, seed = {}, bins = {} ps, window = ±{} ps",
        s.duration_ns, s.seed, s.correlator.bin_width_ps, s.correlator.window_ps
    ));
    line(format!(
        "fit k12 = {} /ns, inversion = {:?}",
        s.fit.k12, s.fit.inversion
    ));
    out
}
