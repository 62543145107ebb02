//! Reference photophysics of a nanodiamond NV ensemble on a tip, above
//! glass and above a silver film. These rows are the only place the
//! published lifetimes are written down.

use serde::Serialize;

use crate::kinetics::{self, RateSet};
use crate::optics::ChannelScenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Preset {
    pub key: &'static str,
    pub label: &'static str,
    /// Lifetimes τij = 1/kij, ns.
    pub tau12: f64,
    pub tau21: f64,
    pub tau23: f64,
    pub tau31: f64,
    /// Published quantum yield, percent.
    pub quantum_yield_percent: f64,
    /// Detection chain the preset is normally measured with.
    #[serde(skip)]
    pub channel: ChannelScenario,
}

pub const GLASS: Preset = Preset {
    key: "glass",
    label: "Facing glass",
    tau12: 51.0,
    tau21: 60.0,
    tau23: 23.0,
    tau31: 300.0,
    quantum_yield_percent: 27.0,
    channel: ChannelScenario::Glass,
};

pub const SILVER: Preset = Preset {
    key: "silver",
    label: "Facing silver",
    tau12: 27.0,
    tau21: 9.7,
    tau23: 27.4,
    tau31: 102.0,
    quantum_yield_percent: 74.0,
    channel: ChannelScenario::SilverFiltered,
};

pub const ALL: [Preset; 2] = [GLASS, SILVER];

pub fn preset(key: &str) -> Option<Preset> {
    ALL.iter()
        .copied()
        .find(|p| p.key.eq_ignore_ascii_case(key))
}

impl Preset {
    pub fn rates(&self) -> RateSet {
        RateSet::from_lifetimes(self.tau12, self.tau21, self.tau23, self.tau31)
            .expect("preset lifetimes are positive")
    }

    pub fn k12(&self) -> f64 {
        1.0 / self.tau12
    }

    /// `k21/(k21 + k23)` of the listed lifetimes.
    pub fn quantum_yield(&self) -> f64 {
        kinetics::quantum_yield(&self.rates()).expect("preset rates are valid")
    }
}
