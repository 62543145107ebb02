//! Simulation and analysis of second-order photon correlations from
//! ensembles of three-level emitters coupled to plasmonic films.
//!
//! The pipeline runs kinetic Monte Carlo emission ([`montecarlo`]), routes
//! photons through a detection chain ([`optics`]), histograms time-tag
//! coincidences ([`correlator`]) and fits the three-level g2 model to
//! recover lifetimes ([`fitter`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlator;
pub mod exec;
pub mod fitter;
pub mod histio;
pub mod kinetics;
pub mod montecarlo;
pub mod optics;
pub mod pipeline;
pub mod presets;
pub mod rng;
pub mod scenario;
pub mod ttag;

use serde::{Deserialize, Serialize};

pub use exec::Exec;

/// Detector arm of the Hanbury Brown–Twiss setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    A,
    B,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::A, Channel::B];

    pub fn index(self) -> usize {
        match self {
            Channel::A => 0,
            Channel::B => 1,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Channel::A),
            1 => Some(Channel::B),
            _ => None,
        }
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channel::A => "A",
            Channel::B => "B",
        })
    }
}
