//! Grid traffic environment and classical signal controllers.

pub mod controllers;
pub mod env;
pub mod flows;
pub mod network;
pub mod sim;

#[cfg(test)]
mod tests;

pub use controllers::{
    argmax_lowest, fixed_time_cycle, fixed_time_policy, max_pressure_policy, pressure, SotlController, SotlParams,
};
pub use env::EnvSpec;
pub use flows::{generate_flows, FlowInterval, FlowProfile, FlowSchedule, Insertion, ScenarioKind};
pub use network::{build_grid, LANES_PER_INTERSECTION, build_grid_with, lane_id, GridSpec, Intersection, Phase, RoadNetwork, Side};
pub use sim::{Event, EventKind, EventLog, SimConfig, SimMetrics, Simulation, StepMetrics, StepOutcome};
