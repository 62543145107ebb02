//! Kinetic Monte Carlo of independent three-level emitters.
//!
//! Each emitter is a continuous-time Markov chain over {ground, excited,
//! shelved}. In every level one exponential waiting time is drawn per
//! outgoing channel and the earliest one fires (first-reaction Gillespie).
//! Only excited → ground transitions emit a photon. Antibunching is not
//! imposed anywhere: it follows from the emitter having to be re-pumped
//! after each photon.

use itertools::Itertools;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Exec};
use crate::kinetics::{derived_params, exact_params, KineticsError, RateSet};
use crate::rng::{substream, SimRng, Stream};
use crate::Channel;

/// Generation window used by [`EnsembleStream`] unless overridden.
pub const DEFAULT_CHUNK_NS: f64 = 1.0e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Ground,
    Excited,
    Shelved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitterState {
    pub level: Level,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    Emitter(u32),
    /// Uncorrelated counts that enter directly at one detector.
    Background(Channel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Radiative,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionEvent {
    /// ns since the start of acquisition.
    pub time: f64,
    pub source: Source,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration: f64,
    pub seed: u64,
    pub n_emitters: u32,
    pub rates: RateSet,
    /// Poisson background per detector, ns⁻¹.
    pub background_rate: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.rates.validate()?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "duration = {} must be > 0",
                self.duration
            )));
        }
        if self.n_emitters < 1 {
            return Err(SimError::InvalidConfig("n_emitters must be >= 1".into()));
        }
        if !(self.background_rate >= 0.0 && self.background_rate.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "background_rate = {} must be >= 0",
                self.background_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub from: Level,
    pub to: Level,
    pub time: f64,
}

/// Time discarded before acquisition so the emitter starts stationary:
/// ten times the slowest relaxation time of the rate equations.
pub fn burn_in(rates: &RateSet) -> f64 {
    if rates.k12 == 0.0 {
        return 0.0;
    }
    let Ok(approx) = derived_params(rates) else {
        return 0.0;
    };
    if rates.k23 == 0.0 {
        return 10.0 / approx.gamma1;
    }
    let slow = exact_params(rates)
        .map(|p| p.gamma2.min(approx.gamma2))
        .unwrap_or(approx.gamma2);
    if slow > 0.0 {
        10.0 / slow
    } else {
        0.0
    }
}

/// One emitter's Markov chain with its private random stream.
#[derive(Debug, Clone)]
pub struct Emitter {
    id: u32,
    rates: RateSet,
    level: Level,
    time: f64,
    rng: SimRng,
    pending: Option<Transition>,
}

impl Emitter {
    /// Emitter `id` of a run seeded with `seed`, in the ground level at
    /// `-burn_in(rates)`.
    pub fn new(rates: RateSet, id: u32, seed: u64) -> Self {
        Self::with_rng(
            rates,
            id,
            substream(seed, Stream::Emitter(id)),
            -burn_in(&rates),
        )
    }

    pub fn with_rng(rates: RateSet, id: u32, rng: SimRng, start: f64) -> Self {
        Self {
            id,
            rates,
            level: Level::Ground,
            time: start,
            rng,
            pending: None,
        }
    }

    pub fn state(&self) -> EmitterState {
        EmitterState { level: self.level }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    fn wait(&mut self, rate: f64) -> f64 {
        if rate > 0.0 {
            let e: f64 = self.rng.sample(Exp1);
            e / rate
        } else {
            f64::INFINITY
        }
    }

    fn draw(&mut self) -> Transition {
        let RateSet { k12, k21, k23, k31 } = self.rates;
        let (to, dt) = match self.level {
            Level::Ground => (Level::Excited, self.wait(k12)),
            Level::Excited => {
                let radiative = self.wait(k21);
                let shelving = self.wait(k23);
                if radiative <= shelving {
                    (Level::Ground, radiative)
                } else {
                    (Level::Shelved, shelving)
                }
            }
            Level::Shelved => (Level::Ground, self.wait(k31)),
        };
        Transition {
            from: self.level,
            to,
            time: self.time + dt,
        }
    }

    fn peek(&mut self) -> Transition {
        match self.pending {
            Some(t) => t,
            None => {
                let t = self.draw();
                self.pending = Some(t);
                t
            }
        }
    }

    /// Fires the next transition. Returns `None` if the emitter is stuck
    /// in a level with no open exit.
    pub fn step(&mut self) -> Option<Transition> {
        let t = self.peek();
        if !t.time.is_finite() {
            return None;
        }
        self.pending = None;
        self.level = t.to;
        self.time = t.time;
        Some(t)
    }

    /// Appends photons emitted in `[0, t_end]` and stops at the last
    /// transition not later than `t_end`.
    pub fn advance_until(&mut self, t_end: f64, out: &mut Vec<EmissionEvent>) {
        loop {
            let next = self.peek();
            if !(next.time <= t_end) {
                return;
            }
            self.step();
            if next.from == Level::Excited && next.to == Level::Ground && next.time >= 0.0 {
                out.push(EmissionEvent {
                    time: next.time,
                    source: Source::Emitter(self.id),
                    kind: EventKind::Radiative,
                });
            }
        }
    }
}

/// Homogeneous Poisson arrivals feeding one detector.
#[derive(Debug, Clone)]
pub struct BackgroundProcess {
    channel: Channel,
    rate: f64,
    next: f64,
    rng: SimRng,
}

impl BackgroundProcess {
    pub fn new(rate: f64, channel: Channel, seed: u64) -> Self {
        let rng = substream(seed, Stream::Background(channel.index() as u8));
        let mut process = Self {
            channel,
            rate,
            next: 0.0,
            rng,
        };
        process.next = process.gap();
        process
    }

    fn gap(&mut self) -> f64 {
        if self.rate > 0.0 {
            let e: f64 = self.rng.sample(Exp1);
            e / self.rate
        } else {
            f64::INFINITY
        }
    }

    pub fn advance_until(&mut self, t_end: f64, out: &mut Vec<EmissionEvent>) {
        while self.next <= t_end {
            out.push(EmissionEvent {
                time: self.next,
                source: Source::Background(self.channel),
                kind: EventKind::Background,
            });
            self.next += self.gap();
        }
    }
}

/// Photon emissions of a single emitter over `[0, duration]`, using the
/// stream of emitter 0 of a run seeded with `seed`.
pub fn simulate_emitter(
    rates: &RateSet,
    duration: f64,
    seed: u64,
) -> Result<Vec<EmissionEvent>, SimError> {
    rates.validate()?;
    if !(duration > 0.0) {
        return Err(SimError::InvalidConfig(format!(
            "duration = {duration} must be > 0"
        )));
    }
    let mut emitter = Emitter::new(*rates, 0, seed);
    let mut out = Vec::new();
    emitter.advance_until(duration, &mut out);
    Ok(out)
}

/// Poisson background events for detector `channel` over `[0, duration]`.
pub fn poisson_background(
    rate: f64,
    duration: f64,
    seed: u64,
    channel: Channel,
) -> Result<Vec<EmissionEvent>, SimError> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(SimError::InvalidConfig(format!(
            "background rate = {rate} must be >= 0"
        )));
    }
    let mut process = BackgroundProcess::new(rate, channel, seed);
    let mut out = Vec::new();
    process.advance_until(duration, &mut out);
    Ok(out)
}

fn event_order(a: &EmissionEvent, b: &EmissionEvent) -> bool {
    match a.time.total_cmp(&b.time) {
        std::cmp::Ordering::Equal => a.source < b.source,
        o => o == std::cmp::Ordering::Less,
    }
}

/// k-way merge of individually time-sorted event lists.
pub fn merge_sorted(lists: Vec<Vec<EmissionEvent>>) -> Vec<EmissionEvent> {
    lists.into_iter().kmerge_by(event_order).collect()
}

/// One event list per source.
pub type SourceLists = Vec<Vec<EmissionEvent>>;

/// Chunked generator of the merged event stream of a whole ensemble.
///
/// Emitter state persists across chunks, so the concatenated output does
/// not depend on the chunk length.
#[derive(Debug, Clone)]
pub struct EnsembleStream {
    emitters: Vec<Emitter>,
    backgrounds: Vec<BackgroundProcess>,
    duration: f64,
    chunk: f64,
    cursor: f64,
    exec: Exec,
}

impl EnsembleStream {
    pub fn new(cfg: &SimConfig, exec: Exec) -> Result<Self, SimError> {
        cfg.validate()?;
        let emitters = (0..cfg.n_emitters)
            .map(|i| Emitter::new(cfg.rates, i, cfg.seed))
            .collect();
        let backgrounds = if cfg.background_rate > 0.0 {
            Channel::ALL
                .iter()
                .map(|&c| BackgroundProcess::new(cfg.background_rate, c, cfg.seed))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            emitters,
            backgrounds,
            duration: cfg.duration,
            chunk: DEFAULT_CHUNK_NS,
            cursor: 0.0,
            exec,
        })
    }

    pub fn with_chunk(mut self, chunk_ns: f64) -> Self {
        assert!(chunk_ns > 0.0, "chunk length must be positive");
        self.chunk = chunk_ns;
        self
    }

    /// Per-source event lists of the next window, each sorted by time:
    /// emitter lists in emitter order, then background lists.
    pub fn next_chunk_by_source(&mut self) -> Option<(SourceLists, SourceLists)> {
        if self.cursor >= self.duration {
            return None;
        }
        let end = (self.cursor + self.chunk).min(self.duration);
        let emitted = exec::map_mut(self.exec, &mut self.emitters, |e| {
            let mut out = Vec::new();
            e.advance_until(end, &mut out);
            out
        });
        let background = self
            .backgrounds
            .iter_mut()
            .map(|b| {
                let mut out = Vec::new();
                b.advance_until(end, &mut out);
                out
            })
            .collect();
        self.cursor = end;
        Some((emitted, background))
    }
}

impl Iterator for EnsembleStream {
    type Item = Vec<EmissionEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        let (mut lists, background) = self.next_chunk_by_source()?;
        lists.extend(background);
        Some(merge_sorted(lists))
    }
}

/// All events of the ensemble, merged and sorted by time.
pub fn simulate_ensemble(cfg: &SimConfig) -> Result<Vec<EmissionEvent>, SimError> {
    simulate_ensemble_with(cfg, Exec::default())
}

pub fn simulate_ensemble_with(cfg: &SimConfig, exec: Exec) -> Result<Vec<EmissionEvent>, SimError> {
    Ok(EnsembleStream::new(cfg, exec)?.flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_level() -> RateSet {
        RateSet::new(0.1, 0.1, 0.0, 0.0).unwrap()
    }

    #[test]
    fn no_pump_no_photons() {
        let r = RateSet::new(0.0, 0.1, 0.1, 0.1).unwrap();
        assert!(simulate_emitter(&r, 1e5, 1).unwrap().is_empty());
    }

    #[test]
    fn events_sorted_and_in_range() {
        let r = RateSet::from_lifetimes(27.0, 9.7, 27.4, 102.0).unwrap();
        let ev = simulate_emitter(&r, 1e4, 3).unwrap();
        assert!(!ev.is_empty());
        assert!(ev.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(ev.iter().all(|e| (0.0..=1e4).contains(&e.time)));
    }

    #[test]
    fn two_level_mean_rate() {
        let duration = 1e6;
        let n = simulate_emitter(&two_level(), duration, 11).unwrap().len() as f64;
        let expected = 0.05 * duration;
        // Photon counts of a renewal process are sub-Poissonian, so the
        // Poisson σ bound is conservative.
        assert!((n - expected).abs() < 3.0 * expected.sqrt(), "n = {n}");
    }

    #[test]
    fn background_count() {
        let ev = poisson_background(0.01, 1e6, 5, Channel::A).unwrap();
        assert!((ev.len() as f64 - 1e4).abs() < 300.0, "{}", ev.len());
        assert!(ev.iter().all(|e| e.kind == EventKind::Background));
        assert!(poisson_background(0.0, 1e6, 5, Channel::A)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_emitter_ensemble_equals_emitter() {
        let r = RateSet::from_lifetimes(27.0, 9.7, 27.4, 102.0).unwrap();
        let cfg = SimConfig {
            duration: 2e5,
            seed: 42,
            n_emitters: 1,
            rates: r,
            background_rate: 0.0,
        };
        assert_eq!(
            simulate_ensemble(&cfg).unwrap(),
            simulate_emitter(&r, 2e5, 42).unwrap()
        );
    }

    #[test]
    fn chunking_does_not_change_output() {
        let r = RateSet::from_lifetimes(27.0, 9.7, 27.4, 102.0).unwrap();
        let cfg = SimConfig {
            duration: 3e5,
            seed: 9,
            n_emitters: 4,
            rates: r,
            background_rate: 0.002,
        };
        let whole: Vec<_> = EnsembleStream::new(&cfg, Exec::Serial)
            .unwrap()
            .with_chunk(1e9)
            .flatten()
            .collect();
        let small: Vec<_> = EnsembleStream::new(&cfg, Exec::Parallel)
            .unwrap()
            .with_chunk(777.0)
            .flatten()
            .collect();
        assert_eq!(whole, small);
    }

    #[test]
    fn config_validation() {
        let r = two_level();
        let good = SimConfig {
            duration: 1.0,
            seed: 0,
            n_emitters: 1,
            rates: r,
            background_rate: 0.0,
        };
        assert!(good.validate().is_ok());
        assert!(SimConfig {
            duration: 0.0,
            ..good
        }
        .validate()
        .is_err());
        assert!(SimConfig {
            n_emitters: 0,
            ..good
        }
        .validate()
        .is_err());
        assert!(SimConfig {
            background_rate: -1.0,
            ..good
        }
        .validate()
        .is_err());
    }

    #[test]
    fn burn_in_scales_with_slow_rate() {
        let silver = RateSet::from_lifetimes(27.0, 9.7, 27.4, 102.0).unwrap();
        let gamma2 = derived_params(&silver).unwrap().gamma2;
        assert!(burn_in(&silver) >= 10.0 / gamma2 - 1e-9);
        assert_eq!(burn_in(&RateSet::new(0.0, 0.1, 0.0, 0.0).unwrap()), 0.0);
        assert!((burn_in(&two_level()) - 50.0).abs() < 1e-12);
    }
}
