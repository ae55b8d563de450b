//! Classical signal controllers used as baselines.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::network::{lane_exits, lane_id, Side, LANES_PER_APPROACH, LANES_PER_INTERSECTION};
use super::sim::Simulation;

/// Green time per phase of the fixed-time plan.
pub const FIXED_GREEN_S: u64 = 30;

/// Cyclic plan with `FIXED_GREEN_S` of green per phase. The yellow that
/// `advance` inserts on every change is part of the cycle, so a 4-phase
/// intersection repeats every `4 * (30 + yellow)` seconds.
pub fn fixed_time_policy(num_phases: usize, clock: u64, yellow_s: u64) -> usize {
    if num_phases <= 1 {
        return 0;
    }
    let slot = FIXED_GREEN_S + yellow_s;
    (((clock + yellow_s) / slot) as usize) % num_phases
}

pub fn fixed_time_cycle(num_phases: usize, yellow_s: u64) -> u64 {
    num_phases as u64 * (FIXED_GREEN_S + yellow_s)
}

/// Halted vehicles in the detector zone, capped at the detector capacity.
fn zone_queue(sim: &Simulation, lane: usize) -> f64 {
    let (_, halted, _) = sim.zone_counts(lane);
    (halted.min(sim.config().detector_capacity)) as f64
}

/// Mean zone queue over the lanes of the approach a movement leaves into; 0 when it exits the network.
fn downstream_queue(sim: &Simulation, i: usize, out: Side) -> f64 {
    match sim.network().neighbor(i, out) {
        None => 0.0,
        Some(j) => {
            let entry = out.opposite();
            let total: f64 = (0..LANES_PER_APPROACH).map(|l| zone_queue(sim, lane_id(j, entry, l))).sum();
            total / LANES_PER_APPROACH as f64
        }
    }
}

/// Pressure of a phase: over its permitted lanes, upstream queue minus the
/// downstream queue averaged over the lane's movements.
pub fn pressure(sim: &Simulation, i: usize, phase: usize) -> f64 {
    let p = &sim.network().intersections[i].phases[phase];
    let mut total = 0.0;
    for &local in &p.lanes {
        let side = Side::from_index(local / LANES_PER_APPROACH);
        let l = local % LANES_PER_APPROACH;
        let up = zone_queue(sim, i * LANES_PER_INTERSECTION + local);
        let exits = lane_exits(side, l);
        let down: f64 = exits.iter().map(|&o| downstream_queue(sim, i, o)).sum::<f64>() / exits.len() as f64;
        total += up - down;
    }
    total
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

pub fn max_pressure_policy(sim: &Simulation, i: usize) -> usize {
    let phases = sim.network().intersections[i].phases.len();
    let p: Vec<f64> = (0..phases).map(|k| pressure(sim, i, k)).collect();
    argmax_lowest(&p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SotlParams {
    /// Vehicle-seconds a red lane must accumulate before it requests service.
    pub threshold: f64,
    pub min_green: f64,
}

impl Default for SotlParams {
    fn default() -> Self {
        Self { threshold: 50.0, min_green: 10.0 }
    }
}

/// Self-organising traffic lights: integrates zone vehicle counts on red lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct SotlController {
    pub params: SotlParams,
    integrals: Vec<f64>,
    green_time: Vec<f64>,
    phase: Vec<usize>,
}

impl SotlController {
    pub fn new(params: SotlParams, num_intersections: usize) -> Self {
        Self {
            params,
            integrals: vec![0.0; num_intersections * LANES_PER_INTERSECTION],
            green_time: vec![0.0; num_intersections],
            phase: vec![0; num_intersections],
        }
    }

    pub fn integral(&self, lane: usize) -> f64 {
        self.integrals[lane]
    }

    /// Accumulates `dt` seconds of observation and returns the requested phase.
    pub fn decide(&mut self, sim: &Simulation, i: usize, dt: f64) -> usize {
        let x = &sim.network().intersections[i];
        let current = self.phase[i];
        self.green_time[i] += dt;
        let base = i * LANES_PER_INTERSECTION;
        for local in 0..LANES_PER_INTERSECTION {
            if !x.phases[current].permits(local) {
                let (n, _, _) = sim.zone_counts(base + local);
                self.integrals[base + local] += n as f64 * dt;
            }
        }
        if self.green_time[i] < self.params.min_green {
            return current;
        }
        let mut best: Option<(usize, f64)> = None;
        for local in 0..LANES_PER_INTERSECTION {
            let v = self.integrals[base + local];
            if !x.phases[current].permits(local) && v >= self.params.threshold && v > 0.0 {
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((local, v));
                }
            }
        }
        let Some((lane, _)) = best else { return current };
        let target = x.phases.iter().position(|p| p.permits(lane)).unwrap_or(current);
        for &l in &x.phases[target].lanes {
            self.integrals[base + l] = 0.0;
        }
        self.phase[i] = target;
        self.green_time[i] = 0.0;
        target
    }
}
