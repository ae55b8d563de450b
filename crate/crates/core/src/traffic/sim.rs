//! Point-queue simulator: vehicles queue at the stop line of each incoming lane
//! and discharge through green movements at saturation headway.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flows::{FlowSchedule, Insertion};
use super::network::{
    lane_for_turn, lane_id, lane_location, turn_between, RoadNetwork, Side, LANES_PER_INTERSECTION,
};
use crate::error::{Error, Result};

/// Physical and timing constants of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Free-flow speed (m/s).
    pub free_flow_speed: f64,
    /// Space occupied by a queued vehicle (m).
    pub vehicle_slot: f64,
    /// Minimum seconds between two departures from one lane.
    pub discharge_headway: u64,
    pub yellow_s: u64,
    /// One-second substeps per action.
    pub substeps: u64,
    pub detector_zone: f64,
    pub detector_capacity: usize,
    /// Below this speed (m/s) a vehicle counts as halted.
    pub halt_speed: f64,
    pub steps_per_episode: usize,
    /// Scenario time (s) at which the episode starts.
    pub start_s: f64,
    /// Draw the start uniformly (on the action grid) from the schedule horizon instead.
    pub random_start: bool,
    pub record_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            free_flow_speed: 13.89,
            vehicle_slot: 7.5,
            discharge_headway: 2,
            yellow_s: 5,
            substeps: 5,
            detector_zone: 50.0,
            detector_capacity: 7,
            halt_speed: 0.1,
            steps_per_episode: 90,
            start_s: 0.0,
            random_start: false,
            record_events: false,
        }
    }
}

impl SimConfig {
    pub fn step_seconds(&self) -> u64 {
        self.substeps
    }

    pub fn episode_seconds(&self) -> f64 {
        (self.steps_per_episode as u64 * self.substeps) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Vehicle {
    id: u64,
    /// Distance to the stop line (m).
    pos: f64,
    speed: f64,
    halted: bool,
    wait: f64,
    route: Vec<(usize, Side)>,
    hop: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct LaneState {
    vehicles: VecDeque<Vehicle>,
    last_discharge: Option<u64>,
    pending: VecDeque<Vehicle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SignalState {
    current: usize,
    previous: usize,
    yellow: u64,
}

/// Kind of an event-log record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    /// Vehicle placed on its entry lane.
    Insert,
    /// Vehicle crossed the stop line into a downstream lane.
    Discharge,
    /// Vehicle left the network at its destination.
    Complete,
    /// Per-vehicle samples after a substep; `value` is the speed.
    /// `Queued` is a halted vehicle inside the detector zone, `Halted` one behind it.
    Queued,
    Halted,
    Moving,
    /// End of a one-second substep; `value` is the halted count.
    Tick,
    /// End of an action step; `value` is the reward.
    Step,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Insert => "insert",
            Self::Discharge => "discharge",
            Self::Complete => "complete",
            Self::Queued => "queued",
            Self::Halted => "halted",
            Self::Moving => "moving",
            Self::Tick => "tick",
            Self::Step => "step",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "insert" => Self::Insert,
            "discharge" => Self::Discharge,
            "complete" => Self::Complete,
            "queued" => Self::Queued,
            "halted" => Self::Halted,
            "moving" => Self::Moving,
            "tick" => Self::Tick,
            "step" => Self::Step,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_s: u64,
    pub event: EventKind,
    pub vehicle_id: Option<u64>,
    pub lane_id: Option<usize>,
    pub intersection_id: Option<usize>,
    pub value: f64,
}

/// Event history of one episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventLog {
    pub num_intersections: usize,
    pub events: Vec<Event>,
}

/// Counters accumulated over an episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimMetrics {
    pub inserted: u64,
    pub completed: u64,
    pub halted_vehicle_seconds: f64,
    pub speed_sum: f64,
    pub speed_samples: u64,
    /// Sum over steps of the end-of-step queue (zone-halted vehicles) averaged over intersections.
    pub queue_sum: f64,
    pub steps: u64,
}

impl SimMetrics {
    /// Halted vehicle-seconds per completed trip; `None` before any completion.
    pub fn mean_wait(&self) -> Option<f64> {
        (self.completed > 0).then(|| self.halted_vehicle_seconds / self.completed as f64)
    }

    /// Mean vehicle speed (m/s); free flow when the network was always empty.
    pub fn mean_speed(&self, free_flow: f64) -> f64 {
        if self.speed_samples == 0 {
            free_flow
        } else {
            self.speed_sum / self.speed_samples as f64
        }
    }

    pub fn mean_queue(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.queue_sum / self.steps as f64
        }
    }
}

/// Per-step diagnostics returned by [`Simulation::advance`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub queued: usize,
    pub queue_per_intersection: f64,
    pub halted_vehicle_seconds: f64,
    pub inserted: u64,
    pub completed: u64,
    pub departures: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    /// Episode step limit reached.
    pub done: bool,
    /// True environment termination (never raised by this model; time limits bootstrap).
    pub terminal: bool,
    pub metrics: StepMetrics,
}

/// The full simulation state.
#[derive(Debug, Clone)]
pub struct Simulation {
    network: RoadNetwork,
    config: SimConfig,
    lanes: Vec<LaneState>,
    signals: Vec<SignalState>,
    clock: u64,
    offset_s: f64,
    steps: usize,
    insertions: Vec<Insertion>,
    next_insertion: usize,
    next_vehicle: u64,
    routes: BTreeMap<((usize, Side), (usize, Side)), Vec<(usize, Side)>>,
    metrics: SimMetrics,
    log: EventLog,
    rng: ChaCha8Rng,
}

impl Simulation {
    pub fn new(network: RoadNetwork, schedule: &FlowSchedule, config: SimConfig, seed: u64) -> Result<Self> {
        if config.substeps == 0 || config.detector_capacity == 0 || !(config.free_flow_speed > 0.0) {
            return Err(Error::InvalidArgument("degenerate simulator configuration".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let episode = config.episode_seconds();
        let offset_s = if config.random_start {
            let step = config.substeps as f64;
            let slots = crate::math::floor((schedule.horizon_s() - episode) / step).max(0.0) as u64;
            rng.random_range(0..=slots) as f64 * step
        } else {
            config.start_s
        };
        let insertions = schedule.insertions(&network, offset_s, offset_s + episode)?;
        let n = network.num_intersections();
        let mut sim = Self {
            lanes: vec![LaneState::default(); network.num_lanes()],
            signals: vec![SignalState { current: 0, previous: 0, yellow: 0 }; n],
            log: EventLog { num_intersections: n, events: Vec::new() },
            network,
            config,
            clock: 0,
            offset_s,
            steps: 0,
            insertions,
            next_insertion: 0,
            next_vehicle: 0,
            routes: BTreeMap::new(),
            metrics: SimMetrics::default(),
            rng,
        };
        // Resolve every route up front so bad schedules fail at construction.
        let pairs: Vec<_> = sim.insertions.iter().map(|x| (x.origin, x.destination)).collect();
        for (o, d) in pairs {
            sim.route_for(o, d)?;
        }
        Ok(sim)
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Seconds since the episode start.
    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Scenario time of the episode start.
    pub fn start_offset(&self) -> f64 {
        self.offset_s
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn metrics(&self) -> &SimMetrics {
        &self.metrics
    }

    pub fn event_log(&self) -> &EventLog {
        &self.log
    }

    pub fn take_event_log(&mut self) -> EventLog {
        let n = self.log.num_intersections;
        core::mem::replace(&mut self.log, EventLog { num_intersections: n, events: Vec::new() })
    }

    pub fn current_phase(&self, i: usize) -> usize {
        self.signals[i].current
    }

    pub fn in_yellow(&self, i: usize) -> bool {
        self.signals[i].yellow > 0
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Vehicles currently on lanes (pending insertions excluded).
    pub fn vehicles_in_network(&self) -> u64 {
        self.lanes.iter().map(|l| l.vehicles.len() as u64).sum()
    }

    /// Vehicles waiting at the fringe for room on their entry lane.
    pub fn pending_insertions(&self) -> u64 {
        self.lanes.iter().map(|l| l.pending.len() as u64).sum()
    }

    pub fn lane_len(&self, lane: usize) -> usize {
        self.lanes[lane].vehicles.len()
    }

    pub fn lane_halted(&self, lane: usize) -> usize {
        self.lanes[lane].vehicles.iter().filter(|v| v.halted).count()
    }

    /// Vehicle positions on a lane, front first.
    pub fn lane_positions(&self, lane: usize) -> Vec<f64> {
        self.lanes[lane].vehicles.iter().map(|v| v.pos).collect()
    }

    /// Whether the incoming lane may discharge right now.
    pub fn permitted(&self, i: usize, local_lane: usize) -> bool {
        let s = self.signals[i];
        let phases = &self.network.intersections[i].phases;
        if s.yellow > 0 {
            phases[s.previous].permits(local_lane) && phases[s.current].permits(local_lane)
        } else {
            phases[s.current].permits(local_lane)
        }
    }

    /// Vehicles and halted vehicles inside the detector zone of a lane.
    pub fn zone_counts(&self, lane: usize) -> (usize, usize, f64) {
        let mut n = 0;
        let mut halted = 0;
        let mut speed = 0.0;
        for v in &self.lanes[lane].vehicles {
            if v.pos <= self.config.detector_zone {
                n += 1;
                if v.halted {
                    halted += 1;
                } else {
                    speed += 1.0;
                }
            }
        }
        (n, halted, speed)
    }

    /// Local observation of intersection `i`: `(n, s, q)` per incoming lane, then the phase one-hot.
    pub fn observe(&self, i: usize) -> Vec<f64> {
        let cap = self.config.detector_capacity as f64;
        let phases = self.network.intersections[i].phases.len();
        let mut obs = Vec::with_capacity(3 * LANES_PER_INTERSECTION + phases);
        for local in 0..LANES_PER_INTERSECTION {
            let (n, halted, moving) = self.zone_counts(i * LANES_PER_INTERSECTION + local);
            let s = if n == 0 { 1.0 } else { moving / n as f64 };
            obs.push((n as f64).min(cap) / cap);
            obs.push(s);
            obs.push((halted as f64).min(cap) / cap);
        }
        for p in 0..phases {
            obs.push(if p == self.signals[i].current { 1.0 } else { 0.0 });
        }
        obs
    }

    pub fn observation_len(&self) -> usize {
        3 * LANES_PER_INTERSECTION + self.network.max_phases()
    }

    pub fn observe_all(&self) -> Vec<Vec<f64>> {
        (0..self.network.num_intersections()).map(|i| self.observe(i)).collect()
    }

    /// Mixer state: concatenation of all local observations.
    pub fn global_state(&self) -> Vec<f64> {
        self.observe_all().concat()
    }

    pub fn state_len(&self) -> usize {
        self.observation_len() * self.network.num_intersections()
    }

    /// `-Σ q_l`: minus the halted vehicles inside the detector zones of all lanes.
    pub fn global_reward(&self) -> f64 {
        -(self.total_queued() as f64)
    }

    pub fn total_queued(&self) -> usize {
        (0..self.lanes.len()).map(|l| self.zone_counts(l).1).sum()
    }

    pub fn total_halted(&self) -> usize {
        self.lanes.iter().map(|l| l.vehicles.iter().filter(|v| v.halted).count()).sum()
    }

    /// Places `count` halted vehicles at the stop line of `lane`, each routed
    /// straight out of the network along the lane's first movement.
    pub fn inject_queue(&mut self, lane: usize, count: usize) -> Result<()> {
        if lane >= self.lanes.len() {
            return Err(Error::InvalidArgument(format!("lane {lane} out of range")));
        }
        let (i, side, l) = lane_location(lane);
        let out = super::network::lane_exits(side, l)[0];
        let mut route = vec![(i, out)];
        let mut cur = i;
        while let Some(j) = self.network.neighbor(cur, out) {
            route.push((j, out));
            cur = j;
        }
        let length = self.network.lane_length(lane);
        for _ in 0..count {
            let pos = self.lanes[lane].vehicles.back().map_or(0.0, |v| v.pos + self.config.vehicle_slot);
            if pos > length {
                return Err(Error::InvalidArgument(format!("lane {lane} is full")));
            }
            let id = self.next_vehicle;
            self.next_vehicle += 1;
            self.lanes[lane].vehicles.push_back(Vehicle {
                id,
                pos,
                speed: 0.0,
                halted: true,
                wait: 0.0,
                route: route.clone(),
                hop: 0,
            });
            self.metrics.inserted += 1;
        }
        Ok(())
    }

    fn route_for(&mut self, o: (usize, Side), d: (usize, Side)) -> Result<Vec<(usize, Side)>> {
        if let Some(r) = self.routes.get(&(o, d)) {
            return Ok(r.clone());
        }
        let r = self.network.route(o, d)?;
        self.routes.insert((o, d), r.clone());
        Ok(r)
    }

    /// Applies one joint action and runs the substeps of one action interval.
    pub fn advance(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        let n = self.network.num_intersections();
        if actions.len() != n {
            return Err(Error::InvalidArgument(format!("expected {n} actions, got {}", actions.len())));
        }
        for (i, &a) in actions.iter().enumerate() {
            let phases = self.network.intersections[i].phases.len();
            if a >= phases {
                return Err(Error::InvalidPhase { intersection: i, phase: a, phases });
            }
        }
        for (i, &a) in actions.iter().enumerate() {
            let s = &mut self.signals[i];
            if a != s.current {
                if s.yellow == 0 {
                    s.previous = s.current;
                }
                s.current = a;
                s.yellow = self.config.yellow_s;
            }
        }
        let before = self.metrics;
        let mut step = StepMetrics::default();
        for _ in 0..self.config.substeps {
            step.departures += self.substep()?;
        }
        self.steps += 1;
        let queued = self.total_queued();
        let reward = -(queued as f64);
        let queue = queued as f64 / n as f64;
        self.metrics.queue_sum += queue;
        self.metrics.steps += 1;
        if self.config.record_events {
            self.log.events.push(Event {
                time_s: self.clock,
                event: EventKind::Step,
                vehicle_id: None,
                lane_id: None,
                intersection_id: None,
                value: reward,
            });
        }
        step.queued = queued;
        step.queue_per_intersection = queue;
        step.halted_vehicle_seconds = self.metrics.halted_vehicle_seconds - before.halted_vehicle_seconds;
        step.inserted = self.metrics.inserted - before.inserted;
        step.completed = self.metrics.completed - before.completed;
        Ok(StepOutcome {
            observations: self.observe_all(),
            reward,
            done: self.steps >= self.config.steps_per_episode,
            terminal: false,
            metrics: step,
        })
    }

    fn emit(&mut self, event: EventKind, vehicle: Option<u64>, lane: Option<usize>, at: Option<usize>, value: f64) {
        if self.config.record_events {
            self.log.events.push(Event {
                time_s: self.clock,
                event,
                vehicle_id: vehicle,
                lane_id: lane,
                intersection_id: at,
                value,
            });
        }
    }

    /// Lane a vehicle at hop `hop` of `route` queues on.
    fn lane_for_hop(route: &[(usize, Side)], hop: usize, entry: Side) -> Option<usize> {
        let (j, out) = route[hop];
        let turn = turn_between(entry, out)?;
        Some(lane_id(j, entry, lane_for_turn(turn)))
    }

    fn has_room(&self, lane: usize) -> bool {
        let length = self.network.lane_length(lane);
        self.lanes[lane].vehicles.back().map_or(true, |v| v.pos <= length - self.config.vehicle_slot)
    }

    fn substep(&mut self) -> Result<u64> {
        let t = self.clock;
        let mut departures = 0;

        // Discharge.
        for i in 0..self.network.num_intersections() {
            for local in 0..LANES_PER_INTERSECTION {
                let lane = i * LANES_PER_INTERSECTION + local;
                let Some(front) = self.lanes[lane].vehicles.front() else { continue };
                if front.pos > 0.0 || !self.permitted(i, local) {
                    continue;
                }
                if let Some(last) = self.lanes[lane].last_discharge {
                    if t < last + self.config.discharge_headway {
                        continue;
                    }
                }
                let (_, out) = front.route[front.hop];
                let target = match self.network.neighbor(i, out) {
                    None => None,
                    Some(j) => {
                        let entry = out.opposite();
                        let next = Self::lane_for_hop(&front.route, front.hop + 1, entry)
                            .ok_or_else(|| Error::InvalidArgument("route makes a U-turn".into()))?;
                        debug_assert_eq!(lane_location(next).0, j);
                        if !self.has_room(next) {
                            continue;
                        }
                        Some(next)
                    }
                };
                let mut v = self.lanes[lane].vehicles.pop_front().expect("front exists");
                self.lanes[lane].last_discharge = Some(t);
                departures += 1;
                self.emit(EventKind::Discharge, Some(v.id), Some(lane), Some(i), 0.0);
                match target {
                    None => {
                        self.metrics.completed += 1;
                        self.emit(EventKind::Complete, Some(v.id), Some(lane), Some(i), v.wait);
                    }
                    Some(next) => {
                        v.hop += 1;
                        v.pos = self.network.lane_length(next);
                        self.lanes[next].vehicles.push_back(v);
                    }
                }
            }
        }

        // Insertions due by the end of this second.
        let now = self.offset_s + t as f64;
        while self.next_insertion < self.insertions.len() && self.insertions[self.next_insertion].time_s < now + 1.0 {
            let ins = self.insertions[self.next_insertion];
            self.next_insertion += 1;
            let route = self.route_for(ins.origin, ins.destination)?;
            let lane = Self::lane_for_hop(&route, 0, ins.origin.1)
                .ok_or_else(|| Error::InvalidArgument("origin and destination coincide".into()))?;
            let id = self.next_vehicle;
            self.next_vehicle += 1;
            self.lanes[lane].pending.push_back(Vehicle {
                id,
                pos: 0.0,
                speed: self.config.free_flow_speed,
                halted: false,
                wait: 0.0,
                route,
                hop: 0,
            });
        }
        for lane in 0..self.lanes.len() {
            if self.lanes[lane].pending.is_empty() || !self.has_room(lane) {
                continue;
            }
            let mut v = self.lanes[lane].pending.pop_front().expect("non-empty");
            v.pos = self.network.lane_length(lane);
            let id = v.id;
            self.lanes[lane].vehicles.push_back(v);
            self.metrics.inserted += 1;
            self.emit(EventKind::Insert, Some(id), Some(lane), Some(lane_location(lane).0), 0.0);
        }

        // Movement, front to back.
        let dx = self.config.free_flow_speed;
        let slot = self.config.vehicle_slot;
        for l in &mut self.lanes {
            let mut pred: Option<f64> = None;
            for v in l.vehicles.iter_mut() {
                let floor = pred.map_or(0.0, |p| p + slot);
                let new = (v.pos - dx).max(floor).min(v.pos);
                v.speed = v.pos - new;
                v.pos = new;
                v.halted = v.speed < self.config.halt_speed;
                if v.halted {
                    v.wait += 1.0;
                }
                pred = Some(new);
            }
        }

        // Metrics, in log order.
        let mut halted = 0usize;
        for lane in 0..self.lanes.len() {
            for k in 0..self.lanes[lane].vehicles.len() {
                let v = &self.lanes[lane].vehicles[k];
                let (id, speed, is_halted) = (v.id, v.speed, v.halted);
                let in_zone = v.pos <= self.config.detector_zone;
                self.metrics.speed_sum += speed;
                self.metrics.speed_samples += 1;
                if is_halted {
                    halted += 1;
                    self.metrics.halted_vehicle_seconds += 1.0;
                }
                let kind = match (is_halted, in_zone) {
                    (false, _) => EventKind::Moving,
                    (true, true) => EventKind::Queued,
                    (true, false) => EventKind::Halted,
                };
                self.emit(kind, Some(id), Some(lane), Some(lane_location(lane).0), speed);
            }
        }
        self.emit(EventKind::Tick, None, None, None, halted as f64);

        for s in &mut self.signals {
            s.yellow = s.yellow.saturating_sub(1);
        }
        self.clock += 1;
        Ok(departures)
    }
}
