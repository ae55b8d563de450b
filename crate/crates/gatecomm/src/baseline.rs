//! Classical controllers run through the same metric pipeline as learned policies.

use std::str::FromStr;

use gatecomm_core::eval::{traffic_totals, EvalMetrics, TrafficTotals};
use gatecomm_core::traffic::{fixed_time_policy, max_pressure_policy, EnvSpec, EventLog, SotlController, SotlParams};
use gatecomm_core::train::stream_rng;
use rand::Rng;

use crate::error::{AppError, AppResult};

const BASELINE_STREAM: u64 = 3 << 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Controller {
    Fixed,
    MaxPressure,
    Sotl,
    Random,
}

impl Controller {
    pub const ALL: [Controller; 4] = [Self::Fixed, Self::MaxPressure, Self::Sotl, Self::Random];

    pub fn label(self) -> &'static str {
        match self {
            Self::Fixed => "fixed",
            Self::MaxPressure => "maxpressure",
            Self::Sotl => "sotl",
            Self::Random => "random",
        }
    }
}

impl FromStr for Controller {
    type Err = AppError;

    fn from_str(s: &str) -> AppResult<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| AppError::Usage(format!("unknown controller {s:?} (fixed, maxpressure, sotl, random)")))
    }
}

/// Metrics of `episodes` controller runs plus their event logs.
pub struct BaselineRun {
    pub metrics: EvalMetrics,
    pub logs: Vec<EventLog>,
}

pub fn run_baseline(env: &EnvSpec, controller: Controller, episodes: usize, seed: u64) -> AppResult<BaselineRun> {
    let mut spec = env.clone();
    spec.sim.record_events = true;
    let n = env.n_agents();
    let dt = spec.sim.substeps as f64;
    let mut totals = TrafficTotals { intersections: n, ..Default::default() };
    let mut returns = 0.0;
    let mut logs = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut rng = stream_rng(seed, BASELINE_STREAM | e as u64);
        let mut sim = spec.make(rng.random())?;
        let mut sotl = SotlController::new(SotlParams::default(), n);
        for _ in 0..spec.steps() {
            let actions: Vec<usize> = (0..n)
                .map(|i| {
                    let phases = sim.network().intersections[i].num_phases();
                    match controller {
                        Controller::Fixed => fixed_time_policy(phases, sim.clock(), spec.sim.yellow_s),
                        Controller::MaxPressure => max_pressure_policy(&sim, i),
                        Controller::Sotl => sotl.decide(&sim, i, dt),
                        Controller::Random => rng.random_range(0..phases),
                    }
                })
                .collect();
            returns += sim.advance(&actions)?.reward;
        }
        let log = sim.take_event_log();
        totals.merge(&traffic_totals(&log)?);
        logs.push(log);
    }
    let m = totals.metrics(spec.sim.free_flow_speed);
    let metrics = EvalMetrics {
        episodes,
        mean_queue_length: m.mean_queue_length,
        mean_wait_time: m.mean_wait_time,
        no_completions: m.no_completions,
        mean_speed: m.mean_speed,
        pct_communication: 0.0,
        mean_return: if episodes == 0 { 0.0 } else { returns / episodes as f64 },
        completed: totals.completed,
    };
    Ok(BaselineRun { metrics, logs })
}
