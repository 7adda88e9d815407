//! Bundled single-phase 37-bus feeder and its base profiles.
//!
//! The topology and segment lengths follow the standard 37-bus test feeder;
//! impedances come from the positive-sequence equivalents of its underground
//! cable configurations, scaled to produce a voltage-stressed single-phase
//! study case. Buses are renumbered breadth-first from the substation (id 0).
//! Inverters at buses {12, 20, 22, 24, 25} provide reactive power control;
//! the remaining solar buses operate at unit power factor. Per-bus benchmark
//! loads and panel sizes are artifact inputs of the study case, not claims
//! about the original feeder; panels peak at twice the bus load benchmark.

use crate::feeder::{FeederError, FeederModel};
use crate::scenarios::{ProfileSpec, ScenarioError};

/// JSON text of the bundled feeder file.
pub const FEEDER37_JSON: &str = include_str!("../data/feeder37.json");

/// JSON text of the bundled base-profile file (one 4-hour window at
/// one-minute resolution).
pub const PROFILES37_JSON: &str = include_str!("../data/profiles37.json");

/// Parses the bundled 37-bus feeder.
pub fn feeder37() -> Result<FeederModel, FeederError> {
    FeederModel::from_json_str(FEEDER37_JSON)
}

/// Parses the bundled profile description.
pub fn profiles37() -> Result<ProfileSpec, ScenarioError> {
    Ok(serde_json::from_str(PROFILES37_JSON)?)
}
