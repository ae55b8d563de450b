//! Origin-destination demand: piecewise-constant 5-minute rates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{RoadNetwork, Side};
use crate::error::{Error, Result};

/// Length of one rate interval.
pub const INTERVAL_S: f64 = 300.0;
/// Peak rate of a heavy direction.
pub const PEAK_RATE: f64 = 900.0;
/// Scale applied to the opposite (light) direction of a flow family.
pub const OPPOSITE_SCALE: f64 = 0.6;

/// One constant-rate interval between a fringe entry and a fringe exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowInterval {
    pub start_s: f64,
    pub end_s: f64,
    /// Fringe entry, e.g. `r0c0:W`.
    pub origin: String,
    /// Fringe exit, e.g. `r0c3:E`.
    pub destination: String,
    /// Vehicles per hour.
    pub rate: f64,
}

/// Generated demand scenario families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    OuterHeavy,
    InnerHeavy,
    SingleOd,
    Custom,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "outer-heavy" => Ok(Self::OuterHeavy),
            "inner-heavy" => Ok(Self::InnerHeavy),
            "single-od" => Ok(Self::SingleOd),
            "custom" => Ok(Self::Custom),
            other => Err(Error::InvalidArgument(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Shape of the generated demand. The per-interval multipliers are
/// configuration; only the peak, the opposite-direction scale, the 5-minute
/// granularity, the 35-minute family duration and the 15-minute offset are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowProfile {
    pub peak_rate: f64,
    pub opposite_scale: f64,
    /// Multiplier of `peak_rate` for each 5-minute interval of a family.
    pub interval_multipliers: Vec<f64>,
    /// Start offsets (seconds within the hour) of the east-west and north-south families.
    pub family_offsets_s: [f64; 2],
    /// Rate multiplier on the routes that are not favoured by the scenario.
    pub light_route_factor: f64,
    pub hours: usize,
}

impl Default for FlowProfile {
    fn default() -> Self {
        Self {
            peak_rate: PEAK_RATE,
            opposite_scale: OPPOSITE_SCALE,
            interval_multipliers: vec![1.0; 7],
            family_offsets_s: [0.0, 900.0],
            light_route_factor: 0.25,
            hours: 1,
        }
    }
}

/// Demand over the simulated horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSchedule {
    pub scenario: ScenarioKind,
    pub intervals: Vec<FlowInterval>,
    /// Per hour: `[ew_heavy_eastbound, ns_heavy_southbound]`.
    pub heavy_directions: Vec<[bool; 2]>,
}

/// A scheduled vehicle insertion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Insertion {
    pub time_s: f64,
    pub origin: (usize, Side),
    pub destination: (usize, Side),
}

impl FlowSchedule {
    pub fn custom(intervals: Vec<FlowInterval>) -> Result<Self> {
        validate(&intervals)?;
        Ok(Self { scenario: ScenarioKind::Custom, intervals, heavy_directions: Vec::new() })
    }

    /// Insertion times within `[from_s, to_s)`, uniformly spaced inside each
    /// interval (`3600 / rate` seconds apart, first at the interval start).
    pub fn insertions(&self, network: &RoadNetwork, from_s: f64, to_s: f64) -> Result<Vec<Insertion>> {
        let mut out = Vec::new();
        for f in &self.intervals {
            if f.rate <= 0.0 {
                continue;
            }
            let origin = network.parse_fringe(&f.origin)?;
            let destination = network.parse_fringe(&f.destination)?;
            let spacing = 3600.0 / f.rate;
            let mut k = 0usize;
            loop {
                let t = f.start_s + k as f64 * spacing;
                if t >= f.end_s {
                    break;
                }
                if t >= from_s && t < to_s {
                    out.push(Insertion { time_s: t, origin, destination });
                }
                k += 1;
            }
        }
        out.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
        Ok(out)
    }

    /// Largest rate of any interval.
    pub fn peak_rate(&self) -> f64 {
        self.intervals.iter().map(|f| f.rate).fold(0.0, f64::max)
    }

    pub fn horizon_s(&self) -> f64 {
        self.intervals.iter().map(|f| f.end_s).fold(0.0, f64::max)
    }
}

fn validate(intervals: &[FlowInterval]) -> Result<()> {
    for (i, f) in intervals.iter().enumerate() {
        if !(f.rate >= 0.0) || !f.rate.is_finite() {
            return Err(Error::InvalidArgument(format!("flow {i}: rate must be non-negative")));
        }
        if !(f.end_s > f.start_s) {
            return Err(Error::InvalidArgument(format!("flow {i}: empty interval")));
        }
        for g in &intervals[..i] {
            if g.origin == f.origin && g.destination == f.destination && f.start_s < g.end_s && g.start_s < f.end_s {
                return Err(Error::InvalidArgument(format!(
                    "overlapping intervals for {} -> {}",
                    f.origin, f.destination
                )));
            }
        }
    }
    Ok(())
}

/// Generates the demand for one of the built-in scenario families.
///
/// East-west and north-south families each run for the profile's intervals
/// from their offset within every hour. Every hour a coin per family decides
/// which direction is heavy; the other runs at `opposite_scale`.
pub fn generate_flows(network: &RoadNetwork, kind: ScenarioKind, profile: &FlowProfile, seed: u64) -> Result<FlowSchedule> {
    if kind == ScenarioKind::Custom {
        return Err(Error::InvalidArgument("custom scenarios carry explicit intervals".into()));
    }
    if profile.interval_multipliers.iter().any(|m| !(*m >= 0.0)) || profile.peak_rate < 0.0 {
        return Err(Error::InvalidArgument("flow profile rates must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (network.rows, network.cols);
    let id = |r: usize, c: usize| r * cols + c;
    let outer_row = |r: usize| r == 0 || r + 1 == rows;
    let outer_col = |c: usize| c == 0 || c + 1 == cols;
    let mut intervals = Vec::new();
    let mut heavy_directions = Vec::new();
    for hour in 0..profile.hours.max(1) {
        let base = hour as f64 * 3600.0;
        let east_heavy: bool = rng.random();
        let south_heavy: bool = rng.random();
        heavy_directions.push([east_heavy, south_heavy]);
        // (origin, destination, route factor, family, forward-direction)
        let mut routes: Vec<(String, String, f64, usize, bool)> = Vec::new();
        match kind {
            ScenarioKind::SingleOd => {
                routes.push((
                    network.fringe_name(id(0, 0), Side::West),
                    network.fringe_name(id(0, cols - 1), Side::East),
                    1.0,
                    0,
                    true,
                ));
            }
            _ => {
                let favoured = |outer: bool| match kind {
                    ScenarioKind::OuterHeavy => outer,
                    _ => !outer,
                };
                for r in 0..rows {
                    let w = network.fringe_name(id(r, 0), Side::West);
                    let e = network.fringe_name(id(r, cols - 1), Side::East);
                    let f = if favoured(outer_row(r)) { 1.0 } else { profile.light_route_factor };
                    routes.push((w.clone(), e.clone(), f, 0, true));
                    routes.push((e, w, f, 0, false));
                }
                for c in 0..cols {
                    let n = network.fringe_name(id(0, c), Side::North);
                    let s = network.fringe_name(id(rows - 1, c), Side::South);
                    let f = if favoured(outer_col(c)) { 1.0 } else { profile.light_route_factor };
                    routes.push((n.clone(), s.clone(), f, 1, true));
                    routes.push((s, n, f, 1, false));
                }
            }
        }
        for (origin, destination, factor, family, forward) in routes {
            let heavy = if kind == ScenarioKind::SingleOd {
                true
            } else if family == 0 {
                forward == east_heavy
            } else {
                forward == south_heavy
            };
            let dir_scale = if heavy { 1.0 } else { profile.opposite_scale };
            let start = base + profile.family_offsets_s[family];
            for (k, m) in profile.interval_multipliers.iter().enumerate() {
                let s = start + k as f64 * INTERVAL_S;
                intervals.push(FlowInterval {
                    start_s: s,
                    end_s: s + INTERVAL_S,
                    origin: origin.clone(),
                    destination: destination.clone(),
                    rate: profile.peak_rate * m * factor * dir_scale,
                });
            }
        }
    }
    validate(&intervals)?;
    Ok(FlowSchedule { scenario: kind, intervals, heavy_directions })
}
