use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nets::ArchConfig;
use crate::traffic::{build_grid, generate_flows, Event, FlowProfile, FlowSchedule, ScenarioKind, SimConfig};

fn env(rows: usize, cols: usize, steps: usize) -> EnvSpec {
    let network = build_grid(rows, cols, 120.0).unwrap();
    let schedule = generate_flows(&network, ScenarioKind::OuterHeavy, &FlowProfile::default(), 0).unwrap();
    EnvSpec { network, schedule, sim: SimConfig { steps_per_episode: steps, ..SimConfig::default() } }
}

fn nets_for(env: &EnvSpec, seed: u64) -> (Networks, ParameterSet) {
    let a = ArchConfig { hidden: 8, encoder: 8, mixer_embed: 6, hyper_hidden: 8, ..ArchConfig::new(env.obs_dim(), env.n_phases(), env.n_agents()) };
    Networks::new(a, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn ev(time_s: u64, event: EventKind, vehicle: Option<u64>, value: f64) -> Event {
    Event { time_s, event, vehicle_id: vehicle, lane_id: vehicle.map(|_| 0), intersection_id: vehicle.map(|_| 0), value }
}

#[test]
fn pct_communication_counts_active_bits() {
    let topo = Topology::from_network(&build_grid(1, 2, 100.0).unwrap(), 4, 5);
    let g = topo.gate_dim();
    let mut gates = vec![0.0; 2 * g];
    let (s0, s1) = (topo.active_pairs()[0].1, topo.active_pairs()[1].1);
    gates[s0 * 5..s0 * 5 + 5].copy_from_slice(&[1.0, 1.0, 1.0, 0.0, 0.0]);
    gates[g + s1 * 5..g + s1 * 5 + 5].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0]);
    // Bits on inactive slots never count.
    for s in 0..4 {
        if !topo.is_active(0, s) {
            gates[s * 5] = 1.0;
        }
    }
    let t = tally_gates(&gates, &topo, 1);
    assert_eq!(t, GateTally { set: 4, total: 10 });
    assert_eq!(t.percent(), 40.0);
    assert_eq!(pct_communication(&vec![0.0; 2 * g], &topo, 1), 0.0);
}

#[test]
fn random_half_gates_are_half_set() {
    let bits = sample_mode_gates(CommMode::Random(0.5), 10_000, &mut ChaCha8Rng::seed_from_u64(0));
    let pct = 100.0 * bits.iter().sum::<f64>() / bits.len() as f64;
    assert!((pct - 50.0).abs() < 1.5, "{pct}");
}

#[test]
fn empty_traffic_metrics() {
    let log = EventLog { num_intersections: 4, events: Vec::new() };
    let m = traffic_metrics(&log, 13.89).unwrap();
    assert_eq!(m, TrafficMetrics { mean_queue_length: 0.0, mean_wait_time: 0.0, no_completions: true, mean_speed: 13.89 });
}

#[test]
fn single_vehicle_halted_ten_seconds() {
    let mut events = vec![ev(0, EventKind::Insert, Some(1), 0.0)];
    for s in 0..10 {
        events.push(ev(s, EventKind::Queued, Some(1), 0.0));
        events.push(ev(s, EventKind::Tick, None, 1.0));
        if s % 5 == 4 {
            events.push(ev(s + 1, EventKind::Step, None, -1.0));
        }
    }
    for s in 10..15 {
        events.push(ev(s, EventKind::Moving, Some(1), 10.0));
        events.push(ev(s, EventKind::Tick, None, 0.0));
    }
    events.push(ev(14, EventKind::Complete, Some(1), 10.0));
    events.push(ev(15, EventKind::Step, None, 0.0));
    let log = EventLog { num_intersections: 1, events };
    let m = traffic_metrics(&log, 13.89).unwrap();
    assert_eq!(m.mean_wait_time, 10.0);
    assert!(!m.no_completions);
    assert_eq!(m.mean_speed, 50.0 / 15.0);
    assert_eq!(m.mean_queue_length, 2.0 / 3.0);
}

#[test]
fn truncated_log_is_rejected() {
    let log = EventLog { num_intersections: 1, events: vec![ev(0, EventKind::Tick, None, 0.0)] };
    assert!(matches!(traffic_metrics(&log, 13.89), Err(Error::IncompleteLog(_))));
}

#[test]
fn log_pass_agrees_with_simulator_counters() {
    let e = env(2, 2, 90);
    let mut spec = e.clone();
    spec.sim.record_events = true;
    spec.sim.start_s = 600.0;
    let mut sim = spec.make(3).unwrap();
    for t in 0..90 {
        sim.advance(&vec![(t / 7) % 4; 4]).unwrap();
    }
    let totals = traffic_totals(sim.event_log()).unwrap();
    let m = sim.metrics();
    assert!(m.completed > 0);
    assert_eq!(totals.completed, m.completed);
    assert_eq!(totals.halted_seconds, m.halted_vehicle_seconds);
    assert_eq!(totals.speed_sum, m.speed_sum);
    assert_eq!(totals.steps, m.steps);
    let t = totals.metrics(spec.sim.free_flow_speed);
    assert!((t.mean_queue_length - m.mean_queue()).abs() < 1e-12);
    assert_eq!(Some(t.mean_wait_time), m.mean_wait());
    // A second pass over the same log is bit-identical.
    assert_eq!(traffic_totals(sim.event_log()).unwrap(), totals);
}

#[test]
fn ablation_modes_report_expected_communication() {
    let e = env(2, 2, 10);
    let (nets, params) = nets_for(&e, 0);
    let run = |mode| evaluate(&nets, &params, &e, 2, mode, MessageTiming::Delayed, 5).unwrap();
    assert_eq!(run(CommMode::None).pct_communication, 0.0);
    assert_eq!(run(CommMode::Full).pct_communication, 100.0);
    assert_eq!(run(CommMode::Random(0.0)).pct_communication, 0.0);
    assert_eq!(run(CommMode::Random(1.0)).pct_communication, 100.0);
    let learned = run(CommMode::Learned);
    assert!((0.0..=100.0).contains(&learned.pct_communication));
    assert!(learned.mean_queue_length.is_finite() && learned.mean_speed.is_finite());
    // No messages and all-zero gates deliver the same (empty) inboxes.
    let none = run(CommMode::None);
    let zero = run(CommMode::Random(0.0));
    assert_eq!(none.mean_queue_length, zero.mean_queue_length);
    assert_eq!(none.mean_wait_time, zero.mean_wait_time);
}

#[test]
fn evaluation_is_idempotent_and_read_only() {
    let e = env(1, 3, 12);
    let (nets, params) = nets_for(&e, 1);
    let before = params.clone();
    let a = evaluate(&nets, &params, &e, 3, CommMode::Learned, MessageTiming::Delayed, 9).unwrap();
    for mode in [CommMode::Full, CommMode::None, CommMode::Random(0.3)] {
        evaluate(&nets, &params, &e, 1, mode, MessageTiming::Delayed, 9).unwrap();
    }
    let b = evaluate(&nets, &params, &e, 3, CommMode::Learned, MessageTiming::Delayed, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(params, before);
    assert_eq!(a.episodes, 3);
}

#[test]
fn message_export_shape_and_bounds() {
    let e = env(1, 2, 7);
    let (nets, params) = nets_for(&e, 2);
    let rows = export_messages(&nets, &params, &e, 3, MessageTiming::Delayed, 0).unwrap();
    assert_eq!(rows.len(), 3 * 7 * 2);
    for r in &rows {
        assert_eq!(r.message.len() + 3 + 1, 9);
        for f in [r.mean_speed, r.mean_density, r.mean_queue] {
            assert!((0.0..=1.0).contains(&f));
        }
        assert!(r.action < 4);
    }
}

#[test]
fn influence_vanishes_without_messages() {
    let e = env(1, 2, 6);
    let (nets, mut params) = nets_for(&e, 3);
    let none = message_influence(&nets, &params, &e, 2, CommMode::None, MessageTiming::Delayed, 0).unwrap();
    assert_eq!(none, 0.0);
    let full = message_influence(&nets, &params, &e, 2, CommMode::Full, MessageTiming::Delayed, 0).unwrap();
    assert!(full > 0.0);
    // Gates that never open: identical inboxes.
    params.set("comm.gate.bias", crate::diff::Tensor::new(vec![20], vec![-50.0; 20]).unwrap()).unwrap();
    let id = params.find("comm.gate.weight").unwrap();
    params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let closed = message_influence(&nets, &params, &e, 2, CommMode::Learned, MessageTiming::Delayed, 0).unwrap();
    assert_eq!(closed, 0.0);
}

#[test]
fn policy_kl_properties() {
    assert_eq!(policy_kl(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert_eq!(policy_kl(&[1.0, 2.0], &[6.0, 7.0]), 0.0);
    let p = [0.3f64, 0.7];
    let q = [0.5f64, 0.5];
    let want = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
    let got = policy_kl(&[p[0].ln(), p[1].ln()], &[0.0, 0.0]);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn unused_schedule_is_quiet() {
    let mut e = env(1, 1, 5);
    e.schedule = FlowSchedule::custom(Vec::new()).unwrap();
    let (nets, params) = nets_for(&e, 4);
    let m = evaluate(&nets, &params, &e, 1, CommMode::Learned, MessageTiming::Delayed, 0).unwrap();
    assert!(m.no_completions);
    assert_eq!(m.mean_wait_time, 0.0);
    assert_eq!(m.mean_queue_length, 0.0);
    assert_eq!(m.mean_speed, e.sim.free_flow_speed);
}
