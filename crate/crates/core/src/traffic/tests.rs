use alloc::vec;
use alloc::vec::Vec;

use super::network::lane_exits;
use super::*;

fn empty_schedule() -> FlowSchedule {
    FlowSchedule::custom(Vec::new()).unwrap()
}

fn sim_on(rows: usize, cols: usize) -> Simulation {
    let net = build_grid(rows, cols, 200.0).unwrap();
    Simulation::new(net, &empty_schedule(), SimConfig { record_events: true, ..SimConfig::default() }, 0).unwrap()
}

#[test]
fn grid_topology() {
    let g = build_grid(4, 4, 200.0).unwrap();
    assert_eq!(g.num_intersections(), 16);
    assert_eq!(g.neighborhood(0).len(), 2);
    assert_eq!(g.neighborhood(5).len(), 4);
    let one = build_grid(1, 1, 200.0).unwrap();
    assert!(one.neighborhood(0).is_empty());
    assert_eq!(one.adjacency(), &[vec![0u8]]);
}

#[test]
fn small_grid_row_sums_match_edge_enumeration() {
    let g = build_grid(2, 2, 200.0).unwrap();
    // Brute force: two cells are linked iff their Manhattan distance is 1.
    let cells: Vec<(i64, i64)> = (0..2).flat_map(|r| (0..2).map(move |c| (r, c))).collect();
    for (i, a) in cells.iter().enumerate() {
        let expected = cells.iter().filter(|b| (a.0 - b.0).abs() + (a.1 - b.1).abs() == 1).count();
        let row: usize = g.adjacency()[i].iter().map(|&x| x as usize).sum();
        assert_eq!(row, expected);
        assert_eq!(row, 2);
    }
}

#[test]
fn adjacency_is_symmetric_with_zero_diagonal() {
    for (r, c) in [(1, 3), (3, 2), (4, 4)] {
        let g = build_grid(r, c, 200.0).unwrap();
        let a = g.adjacency();
        for i in 0..a.len() {
            assert_eq!(a[i][i], 0);
            for j in 0..a.len() {
                assert_eq!(a[i][j], a[j][i]);
            }
        }
    }
    assert!(build_grid(0, 3, 200.0).is_err());
}

#[test]
fn every_lane_is_served_by_some_phase() {
    let g = build_grid(2, 2, 200.0).unwrap();
    for x in &g.intersections {
        for l in 0..8 {
            assert!(x.phases.iter().any(|p| p.permits(l)));
        }
    }
}

#[test]
fn routes_are_shortest_and_end_on_the_exit() {
    let g = build_grid(3, 3, 200.0).unwrap();
    let o = g.parse_fringe("r0c0:W").unwrap();
    let d = g.parse_fringe("r0c2:E").unwrap();
    let r = g.route(o, d).unwrap();
    assert_eq!(r, vec![(0, Side::East), (1, Side::East), (2, Side::East)]);
    let d2 = g.parse_fringe("r2c2:S").unwrap();
    let r2 = g.route(o, d2).unwrap();
    assert_eq!(r2.len(), 5);
    assert_eq!(*r2.last().unwrap(), d2);
    assert!(g.parse_fringe("r1c1:N").is_err());
}

#[test]
fn flow_peak_and_opposite_rates() {
    let g = build_grid(2, 2, 200.0).unwrap();
    let f = generate_flows(&g, ScenarioKind::OuterHeavy, &FlowProfile::default(), 3).unwrap();
    assert_eq!(f.peak_rate(), 900.0);
    let rates: Vec<f64> = f.intervals.iter().map(|x| x.rate).collect();
    assert!(rates.iter().any(|&r| (r - 540.0).abs() < 1e-12));
    // Families: EW from minute 0, NS from minute 15, 35 minutes each.
    let ew = f.intervals.iter().filter(|x| x.origin.ends_with(":W") || x.origin.ends_with(":E"));
    let ns = f.intervals.iter().filter(|x| x.origin.ends_with(":N") || x.origin.ends_with(":S"));
    assert_eq!(ew.clone().map(|x| x.start_s).fold(f64::MAX, f64::min), 0.0);
    assert_eq!(ew.map(|x| x.end_s).fold(0.0, f64::max), 2100.0);
    assert_eq!(ns.clone().map(|x| x.start_s).fold(f64::MAX, f64::min), 900.0);
    assert_eq!(ns.map(|x| x.end_s).fold(0.0, f64::max), 3000.0);
}

#[test]
fn uniform_insertion_count_over_a_full_interval() {
    let g = build_grid(1, 2, 200.0).unwrap();
    let f = FlowSchedule::custom(vec![FlowInterval {
        start_s: 0.0,
        end_s: 300.0,
        origin: "r0c0:W".into(),
        destination: "r0c1:E".into(),
        rate: 900.0,
    }])
    .unwrap();
    let ins = f.insertions(&g, 0.0, 1e9).unwrap();
    assert_eq!(ins.len(), (900.0 * 300.0 / 3600.0) as usize);
    assert_eq!(ins.len(), 75);
}

#[test]
fn overlapping_custom_intervals_are_rejected() {
    let mk = |s: f64, e: f64| FlowInterval {
        start_s: s,
        end_s: e,
        origin: "r0c0:W".into(),
        destination: "r0c0:E".into(),
        rate: 100.0,
    };
    assert!(FlowSchedule::custom(vec![mk(0.0, 300.0), mk(200.0, 500.0)]).is_err());
    assert!(FlowSchedule::custom(vec![mk(0.0, 300.0), mk(300.0, 600.0)]).is_ok());
    assert!(ScenarioKind::parse("rush-hour").is_err());
}

#[test]
fn empty_network_is_quiet() {
    let mut sim = sim_on(2, 2);
    let out = sim.advance(&[1, 2, 3, 0]).unwrap();
    assert_eq!(out.reward, 0.0);
    for o in &out.observations {
        assert_eq!(o.len(), 28);
        for l in 0..8 {
            assert_eq!(o[3 * l], 0.0);
            assert_eq!(o[3 * l + 1], 1.0);
            assert_eq!(o[3 * l + 2], 0.0);
        }
    }
}

#[test]
fn invalid_phase_is_an_error() {
    let mut sim = sim_on(1, 1);
    assert!(matches!(sim.advance(&[4]), Err(crate::Error::InvalidPhase { phase: 4, .. })));
    assert!(sim.advance(&[0, 0]).is_err());
}

#[test]
fn keeping_the_phase_inserts_no_yellow() {
    let mut sim = sim_on(1, 1);
    sim.advance(&[0]).unwrap();
    assert!(!sim.in_yellow(0));
    let north_through = lane_id(0, Side::North, 0);
    sim.inject_queue(north_through, 2).unwrap();
    let out = sim.advance(&[0]).unwrap();
    assert!(out.metrics.departures >= 1);
}

#[test]
fn four_halted_vehicles_leave_in_ten_seconds() {
    let mut sim = sim_on(1, 1);
    let lane = lane_id(0, Side::North, 0);
    sim.inject_queue(lane, 4).unwrap();
    let mut departures = 0;
    for _ in 0..2 {
        departures += sim.advance(&[0]).unwrap().metrics.departures;
    }
    assert_eq!(departures, 4);
    assert_eq!(sim.lane_len(lane), 0);

    // With six queued, ten seconds of green still release only five.
    let mut sim = sim_on(1, 1);
    sim.inject_queue(lane, 6).unwrap();
    let d: u64 = (0..2).map(|_| sim.advance(&[0]).unwrap().metrics.departures).sum();
    assert_eq!(d, 5);
}

#[test]
fn yellow_blocks_changing_movements() {
    let mut sim = sim_on(1, 1);
    let west = lane_id(0, Side::West, 0);
    sim.inject_queue(west, 3).unwrap();
    let out = sim.advance(&[1]).unwrap();
    assert_eq!(out.metrics.departures, 0);
    assert!(!sim.in_yellow(0));
    let out = sim.advance(&[1]).unwrap();
    assert_eq!(out.metrics.departures, 3);
}

#[test]
fn observation_of_a_halted_queue() {
    let mut sim = sim_on(1, 1);
    let lane = lane_id(0, Side::East, 0);
    sim.inject_queue(lane, 3).unwrap();
    let o = sim.observe(0);
    let k = 3 * 2;
    assert_eq!(&o[k..k + 3], &[3.0 / 7.0, 0.0, 3.0 / 7.0]);
    let mut sim = sim_on(1, 1);
    sim.inject_queue(lane, 9).unwrap();
    let o = sim.observe(0);
    assert_eq!(o[k], 1.0);
    assert!(o.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn reward_sums_halted_vehicles_everywhere() {
    let mut sim = sim_on(1, 2);
    assert_eq!(sim.global_reward(), 0.0);
    sim.inject_queue(lane_id(0, Side::North, 0), 2).unwrap();
    sim.inject_queue(lane_id(0, Side::South, 1), 1).unwrap();
    sim.inject_queue(lane_id(1, Side::East, 0), 4).unwrap();
    assert_eq!(sim.global_reward(), -7.0);
    let mut one = sim_on(1, 1);
    one.inject_queue(lane_id(0, Side::West, 1), 3).unwrap();
    assert_eq!(one.global_reward(), -3.0);
    // Only the detector zone counts: 9 queued vehicles reach back to 60 m.
    let mut long = sim_on(1, 1);
    long.inject_queue(lane_id(0, Side::West, 0), 9).unwrap();
    assert_eq!(long.global_reward(), -7.0);
    assert_eq!(long.total_halted(), 9);
}

#[test]
fn fixed_time_plan() {
    for c in 0..30 {
        assert_eq!(fixed_time_policy(4, c, 5), 0);
    }
    for c in 30..60 {
        assert_eq!(fixed_time_policy(4, c, 5), 1);
    }
    assert_eq!(fixed_time_cycle(4, 5), 140);
    assert_eq!(fixed_time_policy(4, 140, 5), fixed_time_policy(4, 0, 5));
    assert_eq!(fixed_time_policy(1, 77, 5), 0);
}

#[test]
fn fixed_time_gives_thirty_seconds_of_green() {
    let mut sim = sim_on(1, 1);
    let mut green = [0u64; 4];
    for _ in 0..28 {
        let a = fixed_time_policy(4, sim.clock(), 5);
        sim.advance(&[a]).unwrap();
        green[a] += 5;
    }
    // 140 s: each phase held for 35 s, of which 5 s yellow.
    assert_eq!(green, [35, 35, 35, 35]);
}

#[test]
fn pressure_examples() {
    let mut sim = sim_on(1, 1);
    for p in 0..4 {
        assert_eq!(pressure(&sim, 0, p), 0.0);
    }
    assert_eq!(max_pressure_policy(&sim, 0), 0);
    sim.inject_queue(lane_id(0, Side::North, 0), 5).unwrap();
    sim.inject_queue(lane_id(0, Side::South, 0), 2).unwrap();
    sim.inject_queue(lane_id(0, Side::East, 0), 1).unwrap();
    sim.inject_queue(lane_id(0, Side::West, 0), 1).unwrap();
    let p: Vec<f64> = (0..4).map(|k| pressure(&sim, 0, k)).collect();
    assert_eq!(p, vec![7.0, 2.0, 0.0, 0.0]);
    assert_eq!(max_pressure_policy(&sim, 0), 0);

    // A left-turn movement into a saturated approach.
    let mut sim = sim_on(1, 2);
    let left = lane_id(0, Side::North, 1);
    assert_eq!(lane_exits(Side::North, 1), vec![Side::East]);
    sim.inject_queue(left, 3).unwrap();
    sim.inject_queue(lane_id(1, Side::West, 0), 7).unwrap();
    sim.inject_queue(lane_id(1, Side::West, 1), 7).unwrap();
    assert_eq!(pressure(&sim, 0, 2), -4.0);
}

#[test]
fn argmax_ties_pick_lowest() {
    assert_eq!(argmax_lowest(&[7.0, 2.0, 0.0, 0.0]), 0);
    assert_eq!(argmax_lowest(&[1.0, 1.0, 1.0, 1.0]), 0);
    assert_eq!(argmax_lowest(&[0.0, 0.0, 3.0, 3.0]), 2);
}

#[test]
fn sotl_switches_after_threshold() {
    let sim = sim_on(1, 1);
    let mut c = SotlController::new(SotlParams { threshold: 50.0, min_green: 0.0 }, 1);
    for _ in 0..100 {
        assert_eq!(c.decide(&sim, 0, 5.0), 0);
    }

    let mut sim = sim_on(1, 1);
    let east = lane_id(0, Side::East, 0);
    sim.inject_queue(east, 5).unwrap();
    let mut c = SotlController::new(SotlParams { threshold: 50.0, min_green: 0.0 }, 1);
    assert_eq!(c.decide(&sim, 0, 5.0), 0);
    assert_eq!(c.integral(east), 25.0);
    assert_eq!(c.decide(&sim, 0, 5.0), 1);
    assert_eq!(c.integral(east), 0.0);

    // Two red approaches: the larger integral wins; ties go to the lower phase.
    let mut sim = sim_on(1, 1);
    sim.inject_queue(lane_id(0, Side::East, 1), 6).unwrap();
    sim.inject_queue(lane_id(0, Side::West, 0), 4).unwrap();
    let mut c = SotlController::new(SotlParams { threshold: 10.0, min_green: 0.0 }, 1);
    assert_eq!(c.decide(&sim, 0, 5.0), 1);
    let mut sim = sim_on(1, 1);
    sim.inject_queue(lane_id(0, Side::East, 1), 4).unwrap();
    let mut c = SotlController::new(SotlParams { threshold: 10.0, min_green: 0.0 }, 1);
    assert_eq!(c.decide(&sim, 0, 5.0), 1);
}

#[test]
fn conservation_and_determinism_under_load() {
    let g = build_grid(2, 2, 200.0).unwrap();
    let f = generate_flows(&g, ScenarioKind::InnerHeavy, &FlowProfile::default(), 11).unwrap();
    let cfg = SimConfig { steps_per_episode: 60, record_events: true, ..SimConfig::default() };
    let run = || {
        let mut sim = Simulation::new(g.clone(), &f, cfg.clone(), 5).unwrap();
        let mut trace = Vec::new();
        for t in 0..60u64 {
            let acts: Vec<usize> = (0..4).map(|i| ((t / 3 + i) % 4) as usize).collect();
            let out = sim.advance(&acts).unwrap();
            let m = sim.metrics();
            assert_eq!(m.inserted, sim.vehicles_in_network() + m.completed);
            assert_eq!(out.reward, -(sim.total_queued() as f64));
            assert!(sim.total_queued() <= sim.total_halted());
            for o in &out.observations {
                assert!(o.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            trace.push((out.reward, sim.global_state()));
        }
        (trace, *sim.metrics(), sim.event_log().clone())
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.1.inserted > 0);
    assert!(a.1.completed > 0);
}
