use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::block_inputs;
use super::*;
use crate::comm::CommMode;
use crate::diff::gradcheck::sample_coordinates;
use crate::diff::{param_gradient_check, ParameterSet, Tape, Tensor};
use crate::nets::{argmax, one_hot, ArchConfig, Networks};
use crate::traffic::{build_grid, generate_flows, EnvSpec, FlowProfile, FlowSchedule, ScenarioKind, SimConfig};

fn small_arch(env: &EnvSpec) -> ArchConfig {
    ArchConfig { hidden: 8, encoder: 8, mixer_embed: 6, hyper_hidden: 8, ..ArchConfig::new(env.obs_dim(), env.n_phases(), env.n_agents()) }
}

fn toy_env(steps: usize) -> EnvSpec {
    let network = build_grid(1, 2, 120.0).unwrap();
    let schedule = generate_flows(&network, ScenarioKind::OuterHeavy, &FlowProfile::default(), 0).unwrap();
    EnvSpec { network, schedule, sim: SimConfig { steps_per_episode: steps, ..SimConfig::default() } }
}

fn empty_env(steps: usize) -> EnvSpec {
    let network = build_grid(1, 2, 120.0).unwrap();
    EnvSpec { network, schedule: FlowSchedule::custom(Vec::new()).unwrap(), sim: SimConfig { steps_per_episode: steps, ..SimConfig::default() } }
}

struct Setup {
    env: EnvSpec,
    nets: Networks,
    params: ParameterSet,
    topo: Topology,
}

fn setup(env: EnvSpec, seed: u64) -> Setup {
    let arch = small_arch(&env);
    let (nets, params) = Networks::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let topo = Topology::from_network(&env.network, arch.max_neighbors, arch.message_len);
    Setup { env, nets, params, topo }
}

fn opts(epsilon: f64, mode: CommMode, timing: MessageTiming) -> RolloutOptions {
    RolloutOptions { epsilon, comm_mode: mode, stochastic: true, timing, lambda: 0.67 }
}

/// Episode on a network whose approaches start with standing queues.
fn queued_episode(s: &Setup, o: &RolloutOptions, seed: u64) -> Episode {
    let mut sim = s.env.make(seed).unwrap();
    for (k, lane) in (0..sim.network().num_lanes()).step_by(3).enumerate() {
        sim.inject_queue(lane, 1 + (k + seed as usize) % 6).unwrap();
    }
    rollout_episode(&mut sim, &s.nets, &s.params, &s.topo, o, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn perturbed(params: &ParameterSet, seed: u64, scale: f64) -> ParameterSet {
    let mut p = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        p.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    }
    p
}

#[test]
fn epsilon_schedule() {
    let s = EpsilonSchedule { start: 1.0, end: 0.05, anneal_steps: 1000 };
    assert_eq!(epsilon(0, &s), 1.0);
    assert_eq!(s.at(1000), 0.05);
    assert_eq!(s.at(1_000_000), 0.05);
    assert!((s.at(500) - 0.525).abs() < 1e-12);
}

#[test]
fn message_timing_parses() {
    assert_eq!(MessageTiming::parse("delayed").unwrap(), MessageTiming::Delayed);
    assert_eq!(MessageTiming::parse("same-step").unwrap(), MessageTiming::SameStep);
    assert!(MessageTiming::parse("later").is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { gamma: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { buffer_capacity: 4, batch_episodes: 8, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { comm_mode: CommMode::Random(1.5), ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn streams_are_independent_and_reproducible() {
    let a: u64 = stream_rng(7, env_stream(0, 0)).random();
    let b: u64 = stream_rng(7, env_stream(1, 0)).random();
    let c: u64 = stream_rng(7, env_stream(0, 1)).random();
    assert_eq!(a, stream_rng(7, env_stream(0, 0)).random::<u64>());
    assert!(a != b && a != c && b != c);
}

#[test]
fn buffer_evicts_exactly_the_oldest_and_replays_bit_identically() {
    let s = setup(toy_env(3), 0);
    let o = opts(0.5, CommMode::Learned, MessageTiming::Delayed);
    let eps: Vec<Episode> = (0..4).map(|k| queued_episode(&s, &o, k)).collect();
    let mut buf = ReplayBuffer::new(3);
    for e in &eps {
        buf.push(e.clone());
    }
    assert_eq!(buf.len(), 3);
    assert_eq!(buf.inserted(), 4);
    let kept: Vec<&Episode> = buf.iter().collect();
    assert!(!kept.contains(&&eps[0]));
    for e in &eps[1..] {
        assert!(kept.contains(&e));
    }
    assert!(matches!(buf.sample_indices(&mut ChaCha8Rng::seed_from_u64(0), 4), Err(crate::Error::InsufficientBuffer { .. })));
}

#[test]
fn uniform_episode_sampling() {
    let s = setup(empty_env(1), 0);
    let o = opts(1.0, CommMode::None, MessageTiming::Delayed);
    let mut buf = ReplayBuffer::new(10);
    for k in 0..10 {
        buf.push(queued_episode(&s, &o, k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 10];
    let draws = 100_000;
    for _ in 0..draws {
        counts[buf.sample_indices(&mut rng, 1).unwrap()[0]] += 1;
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.1).abs() < 0.01, "{f}");
    }
    // Without replacement inside one batch.
    let mut idx = buf.sample_indices(&mut rng, 10).unwrap();
    idx.sort_unstable();
    assert_eq!(idx, (0..10).collect::<Vec<_>>());
}

#[test]
fn episodes_have_ninety_records_and_are_deterministic() {
    let s = setup(toy_env(90), 1);
    let o = opts(0.3, CommMode::Learned, MessageTiming::Delayed);
    let a = queued_episode(&s, &o, 5);
    let b = queued_episode(&s, &o, 5);
    assert_eq!(a.steps, 90);
    assert_eq!(a.rewards.len(), 90);
    assert_eq!(a.actions.len(), 90 * 2);
    assert_eq!(a.obs.len(), 91 * 2 * s.env.obs_dim());
    assert!(a.terminal.iter().all(|t| !t));
    assert_eq!(a, b);
    assert_ne!(a, queued_episode(&s, &o, 6));
}

#[test]
fn random_policy_actions_are_uniform() {
    let s = setup(toy_env(90), 2);
    let o = opts(1.0, CommMode::None, MessageTiming::Delayed);
    let mut counts = [0u64; 4];
    for k in 0..200 {
        let mut sim = s.env.make(k).unwrap();
        let ep = rollout_episode(&mut sim, &s.nets, &s.params, &s.topo, &o, &mut ChaCha8Rng::seed_from_u64(1000 + k)).unwrap();
        for a in ep.actions {
            counts[a as usize] += 1;
        }
    }
    let n: u64 = counts.iter().sum();
    let p = 0.25;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn training_unroll_reproduces_rollout_q_values() {
    for timing in [MessageTiming::Delayed, MessageTiming::SameStep] {
        for mode in [CommMode::Learned, CommMode::Full, CommMode::Random(0.5), CommMode::None] {
            let s = setup(toy_env(6), 3);
            let o = opts(0.5, mode, timing);
            let eps = [queued_episode(&s, &o, 1), queued_episode(&s, &o, 2)];
            let batch: Vec<&Episode> = eps.iter().collect();
            let cfg = TrainConfig { comm_mode: mode, message_timing: timing, ..TrainConfig::default() };
            let inputs = block_inputs(&batch, &s.nets, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let mut tape = Tape::new();
            let mut un = Unroller::new(&mut tape, &s.nets, &s.params, &s.topo, 2, timing, 0.67, mode != CommMode::None, false).unwrap();
            for (t, inp) in inputs.into_iter().enumerate().take(6) {
                let q = un.step(&mut tape, inp).unwrap().q;
                let q = tape.value(q);
                for (e, ep) in eps.iter().enumerate() {
                    for i in 0..2 {
                        let stored = &ep.q_at(t)[i * 4..(i + 1) * 4];
                        for (x, y) in q.row(e * 2 + i).iter().zip(stored) {
                            assert!((x - y).abs() < 1e-12, "{mode:?} {timing:?} t={t}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn same_step_timing_lets_messages_act_immediately() {
    let s = setup(toy_env(2), 4);
    let d = queued_episode(&s, &opts(0.0, CommMode::Full, MessageTiming::Delayed), 1);
    let n = queued_episode(&s, &opts(0.0, CommMode::None, MessageTiming::Delayed), 1);
    let same = queued_episode(&s, &opts(0.0, CommMode::Full, MessageTiming::SameStep), 1);
    // Delayed delivery: the first decision sees an empty inbox.
    assert_eq!(d.q_at(0), n.q_at(0));
    assert_ne!(same.q_at(0), n.q_at(0));
}

fn td_value(s: &Setup, target: &ParameterSet, batch: &[&Episode], cfg: &TrainConfig) -> f64 {
    let mut tape = Tape::new();
    let nodes = build_loss(&mut tape, &s.nets, &s.params, target, &s.topo, batch, cfg, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    tape.value(nodes.td).item()
}

#[test]
fn zero_discount_and_exact_values_give_zero_loss() {
    let mut s = setup(empty_env(4), 5);
    let ids: Vec<_> = s.params.ids().collect();
    for id in ids {
        s.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let o = opts(1.0, CommMode::Learned, MessageTiming::Delayed);
    let mut sim = s.env.make(0).unwrap();
    let ep = rollout_episode(&mut sim, &s.nets, &s.params, &s.topo, &o, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(ep.rewards.iter().all(|r| *r == 0.0));
    let cfg = TrainConfig { gamma: 0.0, ..TrainConfig::default() };
    assert_eq!(td_value(&s, &s.params.clone(), &[&ep], &cfg), 0.0);
}

#[test]
fn zero_discount_and_terminal_targets_are_the_reward() {
    let s = setup(toy_env(5), 6);
    let target = perturbed(&s.params, 1, 0.3);
    let o = opts(0.5, CommMode::Learned, MessageTiming::Delayed);
    let mut ep = queued_episode(&s, &o, 3);
    assert!(ep.rewards.iter().any(|r| *r < 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg0 = TrainConfig { gamma: 0.0, ..TrainConfig::default() };
    let y = td_targets(&s.nets, &target, &s.topo, &[&ep], &cfg0, None, &mut rng).unwrap();
    assert_eq!(y, ep.rewards);

    let cfg = TrainConfig::default();
    let y = td_targets(&s.nets, &target, &s.topo, &[&ep], &cfg, None, &mut rng).unwrap();
    assert!(y.iter().zip(&ep.rewards).all(|(a, b)| a != b));
    ep.terminal[2] = true;
    let y = td_targets(&s.nets, &target, &s.topo, &[&ep], &cfg, None, &mut rng).unwrap();
    assert_eq!(y[2], ep.rewards[2]);
    assert_ne!(y[3], ep.rewards[3]);

    let scaled = TrainConfig { gamma: 0.0, reward_scale: 0.1, ..TrainConfig::default() };
    let y = td_targets(&s.nets, &target, &s.topo, &[&ep], &scaled, None, &mut rng).unwrap();
    assert!(y.iter().zip(&ep.rewards).all(|(a, b)| (a - 0.1 * b).abs() < 1e-12));
}

/// Q-values of one episode recomputed agent by agent with explicit inbox assembly.
fn recompute_q(s: &Setup, params: &ParameterSet, ep: &Episode) -> Vec<Vec<Vec<f64>>> {
    let a = &s.nets.arch;
    let (n, l, g) = (a.n_agents, a.message_len, a.gate_dim());
    let mut tape = Tape::new();
    let agent = s.nets.agent.bind(&mut tape, params).unwrap();
    let comm = s.nets.comm.bind(&mut tape, params).unwrap();
    let mut h: Vec<_> = (0..n).map(|_| tape.constant(Tensor::zeros(&[1, a.hidden])).unwrap()).collect();
    let mut hc = h.clone();
    let mut inbox = vec![vec![0.0; a.inbox_dim()]; n];
    let mut out = Vec::new();
    for t in 0..=ep.steps {
        let mut sent = Vec::new();
        for i in 0..n {
            let mut feat = ep.agent_obs(t, i).to_vec();
            feat.extend(one_hot(ep.prev_action(t, i), a.n_phases));
            let mut cin = feat.clone();
            cin.extend_from_slice(&inbox[i]);
            let x = tape.constant(Tensor::new(vec![1, cin.len()], cin).unwrap()).unwrap();
            let c = comm.forward(&mut tape, x, hc[i]).unwrap();
            hc[i] = c.h;
            let (mu, lv) = (tape.value(c.mu).data().to_vec(), tape.value(c.logvar).data().to_vec());
            let eps = &ep.message_noise_at(t)[i * l..(i + 1) * l];
            sent.push(crate::comm::sample_message_with(&mu, &lv, eps).unwrap());
        }
        let mut next = vec![vec![0.0; a.inbox_dim()]; n];
        for j in 0..n {
            for slot in 0..a.max_neighbors {
                if let Some((i, back)) = s.topo.incoming(j, slot) {
                    let gates = &ep.gate_samples_at(t)[i * g + back * l..i * g + (back + 1) * l];
                    for k in 0..l {
                        next[j][slot * l + k] = sent[i][k] * gates[k];
                    }
                }
            }
        }
        let mut qs = Vec::new();
        for i in 0..n {
            let mut x = ep.agent_obs(t, i).to_vec();
            x.extend(one_hot(ep.prev_action(t, i), a.n_phases));
            x.extend_from_slice(&inbox[i]);
            let x = tape.constant(Tensor::new(vec![1, x.len()], x).unwrap()).unwrap();
            let (q, h1) = agent.forward(&mut tape, x, h[i]).unwrap();
            h[i] = h1;
            qs.push(tape.value(q).data().to_vec());
        }
        inbox = next;
        out.push(qs);
    }
    out
}

fn mix(s: &Setup, params: &ParameterSet, q: &[f64], state: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(vec![1, q.len()], q.to_vec()).unwrap()).unwrap();
    let st = tape.constant(Tensor::new(vec![1, state.len()], state.to_vec()).unwrap()).unwrap();
    let out = s.nets.mixer.forward(&mut tape, params, q, st).unwrap();
    tape.value(out).item()
}

#[test]
fn hand_computed_td_loss_on_two_agents_and_two_steps() {
    let s = setup(toy_env(2), 7);
    let target = perturbed(&s.params, 2, 0.2);
    let o = opts(0.5, CommMode::Full, MessageTiming::Delayed);
    let eps = [queued_episode(&s, &o, 1), queued_episode(&s, &o, 4)];
    let gamma = 0.9;
    let mut total = 0.0;
    for ep in &eps {
        let q = recompute_q(&s, &s.params, ep);
        let qt = recompute_q(&s, &target, ep);
        for t in 0..2 {
            let chosen: Vec<f64> = (0..2).map(|i| q[t][i][ep.action(t, i)]).collect();
            let greedy: Vec<f64> = (0..2).map(|i| qt[t + 1][i][argmax(&qt[t + 1][i])]).collect();
            let y = ep.rewards[t] + gamma * mix(&s, &target, &greedy, ep.state_at(t + 1));
            let d = mix(&s, &s.params, &chosen, ep.state_at(t)) - y;
            total += d * d;
        }
    }
    let expected = total / 4.0;
    let cfg = TrainConfig { gamma, comm_mode: CommMode::Full, ..TrainConfig::default() };
    let got = td_value(&s, &target, &eps.iter().collect::<Vec<_>>(), &cfg);
    assert!((got - expected).abs() < 1e-10 * expected.max(1.0), "{got} vs {expected}");

    // Double Q-learning: online argmax, target evaluation.
    let mut total = 0.0;
    for ep in &eps {
        let q = recompute_q(&s, &s.params, ep);
        let qt = recompute_q(&s, &target, ep);
        for t in 0..2 {
            let chosen: Vec<f64> = (0..2).map(|i| q[t][i][ep.action(t, i)]).collect();
            let pick: Vec<f64> = (0..2).map(|i| qt[t + 1][i][argmax(&q[t + 1][i])]).collect();
            let y = ep.rewards[t] + gamma * mix(&s, &target, &pick, ep.state_at(t + 1));
            let d = mix(&s, &s.params, &chosen, ep.state_at(t)) - y;
            total += d * d;
        }
    }
    let cfg = TrainConfig { double_q: true, ..cfg };
    let got = td_value(&s, &target, &eps.iter().collect::<Vec<_>>(), &cfg);
    assert!((got - total / 4.0).abs() < 1e-10 * got.max(1.0));
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    for (mode, timing) in [
        (CommMode::Learned, MessageTiming::Delayed),
        (CommMode::Learned, MessageTiming::SameStep),
        (CommMode::Random(0.5), MessageTiming::Delayed),
    ] {
        let s = setup(toy_env(3), 8);
        let target = perturbed(&s.params, 3, 0.2);
        let o = opts(0.5, mode, timing);
        let ep = queued_episode(&s, &o, 2);
        let cfg = TrainConfig {
            comm_mode: mode,
            message_timing: timing,
            comm: crate::comm::CommLossConfig { beta_m: 0.3, beta_c: 0.2, stop_gradient_policy: false },
            reward_scale: 0.2,
            ..TrainConfig::default()
        };
        let coords = sample_coordinates(&s.params, 4);
        let report = param_gradient_check(
            &s.params,
            |p, tape| {
                let nodes = build_loss(tape, &s.nets, p, &target, &s.topo, &[&ep], &cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(0))?;
                Ok(nodes.total)
            },
            1e-6,
            Some(&coords),
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{mode:?} {timing:?}: {report:?}");
        assert!(report.max_abs_gradient > 0.0);
    }
}

#[test]
fn chunked_accumulation_equals_one_tape() {
    let s = setup(toy_env(3), 9);
    let o = opts(0.5, CommMode::Learned, MessageTiming::Delayed);
    let eps: Vec<Episode> = (0..4).map(|k| queued_episode(&s, &o, k)).collect();
    let batch: Vec<&Episode> = eps.iter().collect();
    let cfg = TrainConfig::default();
    let grads = |chunk: usize| {
        let mut p = s.params.clone();
        p.zero_grads();
        let mut value = 0.0;
        for c in batch.chunks(chunk) {
            let w = c.len() as f64 / batch.len() as f64;
            let mut tape = Tape::new();
            let nodes = build_loss(&mut tape, &s.nets, &p.clone(), &s.params, &s.topo, c, &cfg, w, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            tape.backward_into(nodes.total, &mut p).unwrap();
            value += tape.value(nodes.total).item();
        }
        (value, p)
    };
    let (v1, p1) = grads(4);
    let (v2, p2) = grads(1);
    assert!((v1 - v2).abs() < 1e-10);
    for id in p1.ids() {
        for (a, b) in p1.grad(id).data().iter().zip(p2.grad(id).data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

fn small_trainer(env: EnvSpec, cfg: TrainConfig) -> Trainer {
    let arch = small_arch(&env);
    Trainer::with_arch(env, cfg, arch).unwrap()
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        total_episodes: 8,
        batch_episodes: 2,
        buffer_capacity: 16,
        target_update_episodes: 4,
        episodes_per_tape: 2,
        eval_every: 0,
        epsilon: EpsilonSchedule { anneal_steps: 100, ..EpsilonSchedule::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn insufficient_buffer_skips_training() {
    let mut t = small_trainer(toy_env(3), desk_config());
    assert_eq!(t.train_iteration().unwrap(), None);
    let eps = t.collect_round().unwrap();
    t.store(eps).unwrap();
    assert!(t.train_iteration().unwrap().is_some());
}

#[test]
fn gradients_reach_all_four_networks() {
    let mut t = small_trainer(toy_env(4), desk_config());
    let eps = t.collect_round().unwrap();
    t.store(eps).unwrap();
    t.train_iteration().unwrap().unwrap();
    for prefix in ["agent.", "comm.", "posterior.", "mixer."] {
        let norm: f64 = t.params.ids().filter(|id| t.params.name(*id).starts_with(prefix)).flat_map(|id| t.params.grad(id).data().to_vec()).map(|g| g * g).sum();
        assert!(norm > 0.0, "{prefix}");
    }
}

#[test]
fn target_is_stale_between_refreshes_and_exact_after() {
    let mut t = small_trainer(toy_env(3), desk_config());
    let initial = t.target.clone();
    // Rounds of two episodes: the refresh happens when the count reaches 4.
    let rec = t.round().unwrap();
    assert!(!rec.target_refreshed && rec.loss.is_some());
    assert_eq!(t.target, initial);
    assert_ne!(t.params, initial);
    let rec = t.round().unwrap();
    assert!(rec.target_refreshed);
    // Refresh precedes this round's update.
    let refreshed = t.target.clone();
    for ((_, a), (_, b)) in refreshed.iter().zip(initial.iter()) {
        assert_eq!(a.shape(), b.shape());
    }
    t.refresh_target().unwrap();
    for ((_, a), (_, b)) in t.target.iter().zip(t.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
    let frozen = t.target.clone();
    t.round().unwrap();
    assert_eq!(t.target, frozen);
}

#[test]
fn overfits_a_frozen_batch() {
    let s = setup(toy_env(6), 10);
    let o = opts(0.5, CommMode::Learned, MessageTiming::Delayed);
    let eps: Vec<Episode> = (0..2).map(|k| queued_episode(&s, &o, k)).collect();
    let batch: Vec<&Episode> = eps.iter().collect();
    let cfg = TrainConfig { reward_scale: 0.1, ..TrainConfig::default() };
    let mut params = s.params.clone();
    let target = s.params.clone();
    let mut opt = crate::diff::RmsProp::new(crate::diff::RmsPropConfig { learning_rate: 3e-3, ..Default::default() }, &params);
    let mut losses = Vec::new();
    for _ in 0..50 {
        params.zero_grads();
        let mut tape = Tape::new();
        let nodes = build_loss(&mut tape, &s.nets, &params, &target, &s.topo, &batch, &cfg, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        tape.backward_into(nodes.total, &mut params).unwrap();
        losses.push(tape.value(nodes.total).item());
        opt.step(&mut params);
    }
    assert!(losses[49] < 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let run = || {
        let mut t = small_trainer(toy_env(3), desk_config());
        let mut log = Vec::new();
        t.run(|r| {
            log.push(r.clone());
            Ok(())
        })
        .unwrap();
        (log, t.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.last().unwrap().episode, 8);
    assert_eq!(a.last().unwrap().env_steps, 24);
}

#[test]
fn no_communication_mode_trains_without_comm_terms() {
    let mut t = small_trainer(toy_env(3), TrainConfig { comm_mode: CommMode::None, ..desk_config() });
    let r = t.round().unwrap().loss.unwrap();
    assert_eq!((r.ce, r.kl_message, r.kl_gate), (0.0, 0.0, 0.0));
    assert!((r.total - r.td).abs() < 1e-12);
    let comm_grad: f64 = t.params.ids().filter(|id| t.params.name(*id).starts_with("comm.")).map(|id| t.params.grad(id).max_abs()).sum();
    assert_eq!(comm_grad, 0.0);
}

#[test]
fn restored_trainer_continues_identically() {
    let cfg = desk_config();
    let mut a = small_trainer(toy_env(3), cfg.clone());
    a.round().unwrap();
    a.round().unwrap();
    let mut b = small_trainer(toy_env(3), cfg);
    b.params = a.params.clone();
    b.target = a.target.clone();
    b.optimizer = a.optimizer.clone();
    for ep in a.buffer.iter() {
        b.buffer.push(ep.clone());
    }
    b.restore_progress(&a.progress());
    let ra = a.round().unwrap();
    let rb = b.round().unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.params, b.params);
}
