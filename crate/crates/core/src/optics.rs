//! Fourier-plane detection channel.
//!
//! Surface plasmons leak into the glass substrate at `sin Θ = n_spp/n_glass`
//! and show up in the back focal plane as a ring of radius `NA = n_spp`.
//! Two fibers sit on that ring (or, in the direct plane, on the image of the
//! tip). Every emitted photon runs through a chain of independent Bernoulli
//! losses, which thins the point process without altering its normalized
//! correlations.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::montecarlo::{EmissionEvent, Source};
use crate::rng::SimRng;
use crate::Channel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid efficiency budget: {0}")]
    InvalidBudget(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

pub type Result<T> = std::result::Result<T, OpticsError>;

/// Refractive index of the glass substrate.
pub const N_GLASS: f64 = 1.5;
/// Effective index of the leaky plasmon mode (ring radius in NA units).
pub const N_SPP: f64 = 1.04;
/// Physical fiber core, mm.
pub const FIBER_CORE_MM: f64 = 0.2;
/// Share of the ring perimeter seen by one fiber.
pub const FIBER_RING_FRACTION: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionGeometry {
    pub n_spp: f64,
    pub n_glass: f64,
    /// Azimuth of fiber position A on the ring, rad.
    pub fiber_a_angle: f64,
    /// Azimuth of fiber position B on the ring, rad.
    pub fiber_b_angle: f64,
    /// Fiber core diameter in back-focal-plane units (mm).
    pub fiber_effective_diameter: f64,
    /// Ring radius in back-focal-plane units (mm).
    pub ring_radius_bfp: f64,
    pub fourier_filter_on: bool,
}

impl Default for DetectionGeometry {
    /// The ring radius is set so that a 200 µm core spans 7% of the ring.
    fn default() -> Self {
        Self {
            n_spp: N_SPP,
            n_glass: N_GLASS,
            fiber_a_angle: 0.0,
            fiber_b_angle: PI / 2.0,
            fiber_effective_diameter: FIBER_CORE_MM,
            ring_radius_bfp: FIBER_CORE_MM / (TAU * FIBER_RING_FRACTION),
            fourier_filter_on: true,
        }
    }
}

impl DetectionGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OpticsError::InvalidGeometry(m));
        if !(self.n_glass > 1.0) {
            return bad(format!("n_glass = {} must be > 1", self.n_glass));
        }
        if !(self.n_spp > 1.0 && self.n_spp < self.n_glass) {
            return bad(format!(
                "n_spp = {} must lie in (1, n_glass = {})",
                self.n_spp, self.n_glass
            ));
        }
        if !(self.fiber_effective_diameter > 0.0 && self.ring_radius_bfp > 0.0) {
            return bad("fiber diameter and ring radius must be > 0".into());
        }
        for (name, a) in [
            ("fiber_a_angle", self.fiber_a_angle),
            ("fiber_b_angle", self.fiber_b_angle),
        ] {
            if !(0.0..TAU).contains(&a) {
                return bad(format!("{name} = {a} must lie in [0, 2π)"));
            }
        }
        Ok(())
    }

    pub fn collection_fraction(&self) -> f64 {
        collection_fraction(self.fiber_effective_diameter, self.ring_radius_bfp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyBudget {
    pub p_couple_vertical: f64,
    pub p_couple_horizontal: f64,
    pub p_survive: f64,
    pub p_leak: f64,
    /// Collection probability of the direct-plane fiber spot. In Fourier
    /// configurations the ring geometry decides instead.
    pub p_collect: f64,
    /// Share of doubly-collectable photons sent to detector A.
    pub p_bs: f64,
    pub p_qe: f64,
}

impl EfficiencyBudget {
    pub fn ideal() -> Self {
        Self {
            p_couple_vertical: 1.0,
            p_couple_horizontal: 1.0,
            p_survive: 1.0,
            p_leak: 1.0,
            p_collect: 1.0,
            p_bs: 0.5,
            p_qe: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("p_couple_vertical", self.p_couple_vertical),
            ("p_couple_horizontal", self.p_couple_horizontal),
            ("p_survive", self.p_survive),
            ("p_leak", self.p_leak),
            ("p_collect", self.p_collect),
            ("p_bs", self.p_bs),
            ("p_qe", self.p_qe),
        ];
        for (name, p) in fields {
            if !(0.0..=1.0).contains(&p) {
                return Err(OpticsError::InvalidBudget(format!(
                    "{name} = {p} out of [0,1]"
                )));
            }
        }
        Ok(())
    }

    /// Coupling probability averaged over dipole orientations.
    pub fn coupling(&self, mix: &DipoleMix) -> f64 {
        mix.fraction_vertical * self.p_couple_vertical
            + (1.0 - mix.fraction_vertical) * self.p_couple_horizontal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipoleMix {
    pub fraction_vertical: f64,
}

impl Default for DipoleMix {
    /// Randomly oriented dipoles: one of three axes is vertical.
    fn default() -> Self {
        Self {
            fraction_vertical: 1.0 / 3.0,
        }
    }
}

impl DipoleMix {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction_vertical) {
            return Err(OpticsError::InvalidBudget(format!(
                "fraction_vertical = {} out of [0,1]",
                self.fraction_vertical
            )));
        }
        Ok(())
    }
}

/// Where the two fibers sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FiberConfig {
    AA,
    BB,
    AB,
    DirectPlane,
}

impl FromStr for FiberConfig {
    type Err = OpticsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AA" | "A-A" => Ok(Self::AA),
            "BB" | "B-B" => Ok(Self::BB),
            "AB" | "A-B" => Ok(Self::AB),
            "DirectPlane" | "direct" => Ok(Self::DirectPlane),
            other => Err(OpticsError::UnknownScenario(other.to_string())),
        }
    }
}

/// Angular emission weight on the ring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AzimuthPattern {
    #[default]
    Isotropic,
    /// Weight `1 + strength·cos(2(φ − axis))`, `strength ∈ [0, 1]`.
    Dipolar { strength: f64, axis: f64 },
}

impl AzimuthPattern {
    fn sample(&self, rng: &mut SimRng) -> f64 {
        match *self {
            AzimuthPattern::Isotropic => rng.random::<f64>() * TAU,
            AzimuthPattern::Dipolar { strength, axis } => loop {
                let phi = rng.random::<f64>() * TAU;
                let w = 1.0 + strength * (2.0 * (phi - axis)).cos();
                if rng.random::<f64>() * (1.0 + strength) < w {
                    return phi;
                }
            },
        }
    }

    fn weight(&self, phi: f64) -> f64 {
        match *self {
            AzimuthPattern::Isotropic => 1.0,
            AzimuthPattern::Dipolar { strength, axis } => {
                1.0 + strength * (2.0 * (phi - axis)).cos()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingGeometry {
    /// Ring radius in the back focal plane, NA units.
    pub na: f64,
    /// Leakage angle in the substrate, rad.
    pub theta_lrm: f64,
}

/// Plasmon ring position and leakage angle for effective index `n_spp`.
pub fn spp_ring_na(n_spp: f64, n_glass: f64) -> Result<RingGeometry> {
    if !(n_spp >= 1.0) {
        return Err(OpticsError::InvalidGeometry(format!(
            "n_spp = {n_spp} below the light line"
        )));
    }
    if !(n_spp < n_glass) {
        return Err(OpticsError::InvalidGeometry(format!(
            "n_spp = {n_spp} >= n_glass = {n_glass}: no leakage angle"
        )));
    }
    Ok(RingGeometry {
        na: n_spp,
        theta_lrm: (n_spp / n_glass).asin(),
    })
}

/// Vertical/horizontal dipole coupling ratio `|k/k_z|² = n²/(n² − 1)`.
pub fn coupling_ratio(n_spp: f64) -> Result<f64> {
    if !(n_spp > 1.0) || !n_spp.is_finite() {
        return Err(OpticsError::InvalidGeometry(format!(
            "n_spp = {n_spp} must be > 1"
        )));
    }
    let n2 = n_spp * n_spp;
    Ok(n2 / (n2 - 1.0))
}

/// Share of the ring perimeter covered by a fiber of diameter `d` on a ring
/// of radius `r`.
pub fn collection_fraction(d: f64, r: f64) -> f64 {
    if !(d > 0.0 && r > 0.0) {
        return 0.0;
    }
    (d / (TAU * r)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorHit {
    pub channel: Channel,
    /// ps
    pub time: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routed {
    Hit(DetectorHit),
    Lost,
}

/// Everything needed to route photons to detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionChannel {
    pub geometry: DetectionGeometry,
    pub budget: EfficiencyBudget,
    pub mix: DipoleMix,
    pub fibers: FiberConfig,
    #[serde(default)]
    pub pattern: AzimuthPattern,
    /// Gaussian timing jitter σ, ps.
    #[serde(default)]
    pub jitter_ps: f64,
}

impl DetectionChannel {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.budget.validate()?;
        self.mix.validate()?;
        if let AzimuthPattern::Dipolar { strength, .. } = self.pattern {
            if !(0.0..=1.0).contains(&strength) {
                return Err(OpticsError::InvalidGeometry(format!(
                    "pattern strength {strength} out of [0,1]"
                )));
            }
        }
        if !(self.jitter_ps >= 0.0 && self.jitter_ps.is_finite()) {
            return Err(OpticsError::InvalidGeometry(format!(
                "jitter_ps = {} must be >= 0",
                self.jitter_ps
            )));
        }
        Ok(())
    }

    fn fiber_angles(&self) -> Option<[f64; 2]> {
        let g = &self.geometry;
        match self.fibers {
            FiberConfig::AA => Some([g.fiber_a_angle, g.fiber_a_angle]),
            FiberConfig::BB => Some([g.fiber_b_angle, g.fiber_b_angle]),
            FiberConfig::AB => Some([g.fiber_a_angle, g.fiber_b_angle]),
            FiberConfig::DirectPlane => None,
        }
    }

    /// Angular half-width of one fiber's arc on the ring.
    fn half_width(&self) -> f64 {
        PI * self.geometry.collection_fraction()
    }

    /// Probability that an emitted photon is detected on each channel.
    pub fn detection_efficiency(&self) -> [f64; 2] {
        let b = &self.budget;
        let chain = b.coupling(&self.mix) * b.p_survive * b.p_leak * b.p_qe;
        let (only, both) = match self.fiber_angles() {
            None => ([0.0, 0.0], b.p_collect),
            Some(angles) => self.arc_shares(angles),
        };
        [
            chain * (only[0] + both * b.p_bs),
            chain * (only[1] + both * (1.0 - b.p_bs)),
        ]
    }

    /// Probability mass on the ring seen by fiber A only, B only and both.
    fn arc_shares(&self, angles: [f64; 2]) -> ([f64; 2], f64) {
        let w = self.half_width();
        match self.pattern {
            AzimuthPattern::Isotropic => {
                let f = (2.0 * w / TAU).min(1.0);
                let d = angular_distance(angles[0], angles[1]);
                let overlap =
                    ((2.0 * w - d).max(0.0) + (2.0 * w - (TAU - d)).max(0.0)).min(TAU) / TAU;
                ([f - overlap, f - overlap], overlap)
            }
            pattern => {
                const STEPS: usize = 1 << 16;
                let (mut a, mut bo, mut both, mut total) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..STEPS {
                    let phi = (i as f64 + 0.5) * TAU / STEPS as f64;
                    let wt = pattern.weight(phi);
                    total += wt;
                    let in_a = angular_distance(phi, angles[0]) <= w;
                    let in_b = angular_distance(phi, angles[1]) <= w;
                    match (in_a, in_b) {
                        (true, true) => both += wt,
                        (true, false) => a += wt,
                        (false, true) => bo += wt,
                        _ => {}
                    }
                }
                ([a / total, bo / total], both / total)
            }
        }
    }
}

fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

fn to_ps(time_ns: f64, jitter: Option<&Normal<f64>>, rng: &mut SimRng) -> u64 {
    let mut ps = time_ns * 1000.0;
    if let Some(n) = jitter {
        ps += n.sample(rng);
    }
    ps.round().max(0.0) as u64
}

/// Sends one event through the loss chain.
///
/// Emitter photons: dipole orientation → plasmon coupling → propagation →
/// leakage → fiber collection (ring arc or direct-plane spot) → beam
/// splitter (only when both fibers see the photon) → detector efficiency.
/// Background events are already detector counts and only pick up jitter.
pub fn route_event(event: &EmissionEvent, channel: &DetectionChannel, rng: &mut SimRng) -> Routed {
    let jitter = (channel.jitter_ps > 0.0)
        .then(|| Normal::new(0.0, channel.jitter_ps).expect("σ validated"));
    let hit = |ch: Channel, rng: &mut SimRng| {
        Routed::Hit(DetectorHit {
            channel: ch,
            time: to_ps(event.time, jitter.as_ref(), rng),
        })
    };
    if let Source::Background(ch) = event.source {
        return hit(ch, rng);
    }
    let b = &channel.budget;
    let vertical = rng.random::<f64>() < channel.mix.fraction_vertical;
    let couple = if vertical {
        b.p_couple_vertical
    } else {
        b.p_couple_horizontal
    };
    if !bernoulli(rng, couple) || !bernoulli(rng, b.p_survive) || !bernoulli(rng, b.p_leak) {
        return Routed::Lost;
    }
    let (in_a, in_b) = match channel.fiber_angles() {
        None => {
            let seen = bernoulli(rng, b.p_collect);
            (seen, seen)
        }
        Some(angles) => {
            let phi = channel.pattern.sample(rng);
            let w = channel.half_width();
            (
                angular_distance(phi, angles[0]) <= w,
                angular_distance(phi, angles[1]) <= w,
            )
        }
    };
    let target = match (in_a, in_b) {
        (false, false) => return Routed::Lost,
        (true, false) => Channel::A,
        (false, true) => Channel::B,
        (true, true) => {
            if bernoulli(rng, b.p_bs) {
                Channel::A
            } else {
                Channel::B
            }
        }
    };
    if !bernoulli(rng, b.p_qe) {
        return Routed::Lost;
    }
    hit(target, rng)
}

fn bernoulli(rng: &mut SimRng, p: f64) -> bool {
    p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p)
}

/// Named measurement configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelScenario {
    /// Tip over glass, direct fluorescence collection.
    Glass,
    /// Tip over silver, plasmon ring with the Fourier filter in place.
    SilverFiltered,
    /// Tip over silver without the Fourier filter: extra uncorrelated light.
    SilverUnfiltered,
}

impl FromStr for ChannelScenario {
    type Err = OpticsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glass" | "Glass" => Ok(Self::Glass),
            "silver_filtered" | "SilverFiltered" => Ok(Self::SilverFiltered),
            "silver_unfiltered" | "SilverUnfiltered" => Ok(Self::SilverUnfiltered),
            other => Err(OpticsError::UnknownScenario(other.to_string())),
        }
    }
}

/// Background level of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Detector-level signal fraction; the rate follows from the signal.
    Rho(f64),
    /// Explicit rate per detector, ns⁻¹.
    Rate(f64),
}

impl Background {
    /// Background rate per detector for a given signal rate per detector.
    pub fn rate(&self, signal_per_detector: f64) -> f64 {
        match *self {
            Background::Rate(r) => r,
            Background::Rho(rho) if rho > 0.0 => signal_per_detector * (1.0 - rho) / rho,
            Background::Rho(_) => f64::INFINITY,
        }
    }
}

/// Preset loss budget and background of a named configuration.
///
/// The silver budget is calibrated so that ten emitters with the silver
/// rates give about 7.6 kHz per detector in the A-B ring configuration:
/// per-stage losses are not individually known, only the end-to-end rate.
pub fn scenario_budget(scenario: ChannelScenario) -> (EfficiencyBudget, Background) {
    match scenario {
        ChannelScenario::Glass => (
            EfficiencyBudget {
                p_couple_vertical: 1.0,
                p_couple_horizontal: 1.0,
                p_survive: 1.0,
                p_leak: 1.0,
                p_collect: 0.024,
                p_bs: 0.5,
                p_qe: 0.65,
            },
            Background::Rho(1.0),
        ),
        ChannelScenario::SilverFiltered | ChannelScenario::SilverUnfiltered => {
            let vertical = 0.3;
            let eta = coupling_ratio(N_SPP).expect("constant index is valid");
            let budget = EfficiencyBudget {
                p_couple_vertical: vertical,
                p_couple_horizontal: vertical / eta,
                p_survive: 0.04,
                p_leak: 0.3,
                p_collect: FIBER_RING_FRACTION,
                p_bs: 0.5,
                p_qe: 0.65,
            };
            let rho = if scenario == ChannelScenario::SilverFiltered {
                1.0
            } else {
                0.8
            };
            (budget, Background::Rho(rho))
        }
    }
}
