//! Registry of finite-difference gradient checks: one per tape primitive
//! (and per differentiable operand) plus the composed networks and losses.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{communication_loss, CommLossConfig, CommMode};
use crate::diff::gradcheck::sample_coordinates;
use crate::diff::{finite_difference_check, param_gradient_check, GruCell, NodeId, ParameterSet, Tape, Tensor};
use crate::error::Result;
use crate::nets::{ArchConfig, Networks};
use crate::traffic::{build_grid, EnvSpec, FlowInterval, FlowSchedule, SimConfig};
use crate::train::{build_loss, rollout_episode, Episode, MessageTiming, RolloutOptions, Topology, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Primitive,
    Composite,
    /// Deliberately wrong gradient; must fail.
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub kind: CheckKind,
    pub points: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Random evaluation points per primitive.
    pub points: usize,
    /// Random parameter draws per composite.
    pub composite_points: usize,
    /// Coordinates perturbed per parameter tensor in composite checks.
    pub coords_per_param: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { points: 100, composite_points: 3, coords_per_param: 3, tolerance: 1e-4, step: 1e-6, seed: 0 }
    }
}

type Unary = Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId>>;

fn konst(tape: &mut Tape, t: &Tensor) -> Result<NodeId> {
    tape.constant(t.clone())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap_or_else(|_| Tensor::zeros(shape))
}

/// Values bounded away from zero with random signs (for kinks at 0).
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.5);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Reduces `y` to a scalar with random weights so every output entry matters.
fn weigh(tape: &mut Tape, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.value(y).shape().to_vec();
    let w = uniform(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

struct Primitive {
    name: &'static str,
    input: fn(&mut ChaCha8Rng) -> Tensor,
    build: fn(&mut ChaCha8Rng) -> Unary,
}

fn std_input(rng: &mut ChaCha8Rng) -> Tensor {
    uniform(rng, &[3, 4], -2.0, 2.0)
}

fn primitives() -> Vec<Primitive> {
    fn p(name: &'static str, input: fn(&mut ChaCha8Rng) -> Tensor, build: fn(&mut ChaCha8Rng) -> Unary) -> Primitive {
        Primitive { name, input, build }
    }
    vec![
        p("affine.x", std_input, |r| {
            let (w, b) = (uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0));
            Box::new(move |t, x| {
                let (w, b) = (konst(t, &w)?, konst(t, &b)?);
                t.affine(x, w, b)
            })
        }),
        p("affine.w", |r| uniform(r, &[4, 5], -1.0, 1.0), |r| {
            let (x, b) = (uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[5], -1.0, 1.0));
            Box::new(move |t, w| {
                let (x, b) = (konst(t, &x)?, konst(t, &b)?);
                t.affine(x, w, b)
            })
        }),
        p("affine.b", |r| uniform(r, &[5], -1.0, 1.0), |r| {
            let (x, w) = (uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4, 5], -1.0, 1.0));
            Box::new(move |t, b| {
                let (x, w) = (konst(t, &x)?, konst(t, &w)?);
                t.affine(x, w, b)
            })
        }),
        p("matmul.a", std_input, |r| {
            let b = uniform(r, &[4, 2], -1.0, 1.0);
            Box::new(move |t, a| {
                let b = konst(t, &b)?;
                t.matmul(a, b)
            })
        }),
        p("matmul.b", |r| uniform(r, &[4, 2], -1.0, 1.0), |r| {
            let a = uniform(r, &[3, 4], -1.0, 1.0);
            Box::new(move |t, b| {
                let a = konst(t, &a)?;
                t.matmul(a, b)
            })
        }),
        p("row_matmul.x", std_input, |r| {
            let w = uniform(r, &[3, 8], -1.0, 1.0);
            Box::new(move |t, x| {
                let w = konst(t, &w)?;
                t.row_matmul(x, w, 2)
            })
        }),
        p("row_matmul.w", |r| uniform(r, &[3, 8], -1.0, 1.0), |r| {
            let x = uniform(r, &[3, 4], -1.0, 1.0);
            Box::new(move |t, w| {
                let x = konst(t, &x)?;
                t.row_matmul(x, w, 2)
            })
        }),
        p("add", std_input, |r| {
            let o = uniform(r, &[3, 4], -1.0, 1.0);
            Box::new(move |t, x| {
                let o = konst(t, &o)?;
                t.add(o, x)
            })
        }),
        p("sub.a", std_input, |r| {
            let o = uniform(r, &[3, 4], -1.0, 1.0);
            Box::new(move |t, x| {
                let o = konst(t, &o)?;
                t.sub(x, o)
            })
        }),
        p("sub.b", std_input, |r| {
            let o = uniform(r, &[3, 4], -1.0, 1.0);
            Box::new(move |t, x| {
                let o = konst(t, &o)?;
                t.sub(o, x)
            })
        }),
        p("mul", std_input, |r| {
            let o = uniform(r, &[3, 4], -1.0, 1.0);
            Box::new(move |t, x| {
                let o = konst(t, &o)?;
                let y = t.mul(x, o)?;
                t.mul(y, x)
            })
        }),
        p("scale_shift", std_input, |r| {
            let (s, c) = (r.random_range(-2.0..2.0), r.random_range(-1.0..1.0));
            Box::new(move |t, x| t.scale_shift(x, s, c))
        }),
        p("concat", std_input, |r| {
            let o = uniform(r, &[3, 2], -1.0, 1.0);
            Box::new(move |t, x| {
                let o = konst(t, &o)?;
                let sq = t.mul(x, x)?;
                t.concat(&[x, o, sq])
            })
        }),
        p("slice", std_input, |_| Box::new(|t, x| t.slice(x, 1, 2))),
        p("gather", std_input, |r| {
            let idx: Vec<u32> =
                (0..10).map(|k| if k == 3 { crate::diff::GATHER_ZERO } else { r.random_range(0..12) }).collect();
            Box::new(move |t, x| t.gather(x, idx.clone(), &[2, 5]))
        }),
        p("sum", std_input, |_| {
            Box::new(|t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            })
        }),
        p("mean", std_input, |_| {
            Box::new(|t, x| {
                let y = t.mul(x, x)?;
                t.mean(y)
            })
        }),
        p("row_sum", std_input, |_| Box::new(|t, x| t.row_sum(x))),
        p("sigmoid", std_input, |_| Box::new(|t, x| t.sigmoid(x))),
        p("tanh", std_input, |_| Box::new(|t, x| t.tanh(x))),
        p("exp", std_input, |_| Box::new(|t, x| t.exp(x))),
        p("ln", |r| uniform(r, &[3, 4], 0.3, 3.0), |_| Box::new(|t, x| t.ln(x))),
        p("abs", |r| signed(r, &[3, 4]), |_| Box::new(|t, x| t.abs(x))),
        p("elu", |r| signed(r, &[3, 4]), |_| Box::new(|t, x| t.elu(x))),
        p("log_sigmoid", |r| uniform(r, &[3, 4], -8.0, 8.0), |_| Box::new(|t, x| t.log_sigmoid(x))),
        p("softmax", std_input, |_| Box::new(|t, x| t.softmax(x))),
        p("log_softmax", std_input, |_| Box::new(|t, x| t.log_softmax(x))),
        p("squared_error.a", std_input, |r| {
            let o = uniform(r, &[3, 4], -1.0, 1.0);
            Box::new(move |t, x| {
                let o = konst(t, &o)?;
                t.squared_error(x, o)
            })
        }),
        p("squared_error.b", std_input, |r| {
            let o = uniform(r, &[3, 4], -1.0, 1.0);
            Box::new(move |t, x| {
                let o = konst(t, &o)?;
                t.squared_error(o, x)
            })
        }),
    ]
}

fn outcome(name: &str, kind: CheckKind, points: usize, err: f64, tol: f64) -> CheckOutcome {
    let passed = match kind {
        CheckKind::Control => err > tol,
        _ => err <= tol,
    };
    CheckOutcome { name: name.to_string(), kind, points, max_relative_error: err, passed }
}

/// Checks every primitive at `config.points` random points.
pub fn primitive_checks(config: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (k, prim) in primitives().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (k as u64) << 32);
        let mut worst: f64 = 0.0;
        for _ in 0..config.points {
            let x = (prim.input)(&mut rng);
            let f = (prim.build)(&mut rng);
            let wseed = rng.random();
            let e = finite_difference_check(
                |t, x| {
                    let y = f(t, x)?;
                    weigh(t, y, wseed)
                },
                &x,
                config.step,
            )?;
            worst = worst.max(e);
        }
        out.push(outcome(prim.name, CheckKind::Primitive, config.points, worst, config.tolerance));
    }
    Ok(out)
}

/// `x · detach(x)`: the tape sees half of the true derivative of `x²`.
pub fn negative_control(config: &SuiteConfig) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x = uniform(&mut rng, &[2, 3], 0.5, 2.0);
    let e = finite_difference_check(
        |t, x| {
            let d = t.detach(x)?;
            let y = t.mul(x, d)?;
            t.sum(y)
        },
        &x,
        config.step,
    )?;
    Ok(outcome("control.detached_square", CheckKind::Control, 1, e, config.tolerance))
}

fn toy_arch(n_agents: usize) -> ArchConfig {
    ArchConfig { hidden: 6, encoder: 6, mixer_embed: 4, hyper_hidden: 5, ..ArchConfig::new(28, 4, n_agents) }
}

/// Two intersections, three decisions, standing queues on every approach.
fn toy_episode(nets: &Networks, params: &ParameterSet, mode: CommMode, seed: u64) -> Result<(EnvSpec, Topology, Episode)> {
    let network = build_grid(1, 2, 120.0)?;
    let schedule = FlowSchedule::custom(vec![FlowInterval {
        start_s: 0.0,
        end_s: 600.0,
        origin: "r0c0:W".into(),
        destination: "r0c1:E".into(),
        rate: 900.0,
    }])?;
    let env = EnvSpec { network, schedule, sim: SimConfig { steps_per_episode: 3, ..SimConfig::default() } };
    let topo = Topology::from_network(&env.network, nets.arch.max_neighbors, nets.arch.message_len);
    let mut sim = env.make(seed)?;
    for lane in (0..env.network.num_lanes()).step_by(2) {
        sim.inject_queue(lane, 1 + lane % 5)?;
    }
    let opts = RolloutOptions { epsilon: 0.5, comm_mode: mode, stochastic: true, timing: MessageTiming::Delayed, lambda: 0.67 };
    let ep = rollout_episode(&mut sim, nets, params, &topo, &opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((env, topo, ep))
}

fn perturb(params: &ParameterSet, rng: &mut ChaCha8Rng, scale: f64) -> ParameterSet {
    let mut p = params.clone();
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        p.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    }
    p
}

/// Checks the recurrent cell, every network and the training losses with
/// respect to their parameters at `config.composite_points` random draws.
pub fn composite_checks(config: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let tol = config.tolerance;
    let mut worst = [0.0f64; 8];
    let names = [
        "composite.gru_unroll",
        "composite.agent_net",
        "composite.comm_net",
        "composite.posterior_net",
        "composite.mixer",
        "composite.communication_loss",
        "composite.td_loss",
        "composite.total_loss",
    ];
    for point in 0..config.composite_points {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1000 + point as u64));
        let a = toy_arch(2);
        let (nets, params) = Networks::new(a.clone(), &mut rng)?;
        let coords = sample_coordinates(&params, config.coords_per_param);
        let rows = 3;
        let input = uniform(&mut rng, &[rows, a.input_dim()], -1.0, 1.0);
        let comm_input = uniform(&mut rng, &[rows, a.input_dim()], -1.0, 1.0);
        let w = rng.random();
        let check = |build: &dyn Fn(&ParameterSet, &mut Tape) -> Result<NodeId>| -> Result<f64> {
            let group: Vec<_> = coords.clone();
            Ok(param_gradient_check(&params, |p, t| build(p, t), config.step, Some(&group))?.max_relative_error)
        };

        // GRU over four steps, on its own registry.
        let mut gp = ParameterSet::new();
        let cell = GruCell::register(&mut gp, "gru", 4, 5, &mut rng)?;
        let xs: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[2, 4], -1.0, 1.0)).collect();
        let gcoords = sample_coordinates(&gp, 6);
        let e = param_gradient_check(
            &gp,
            |p, t| {
                let c = cell.bind(t, p)?;
                let mut h = t.constant(Tensor::zeros(&[2, 5]))?;
                for x in &xs {
                    let x = konst(t, x)?;
                    h = c.step(t, x, h)?;
                }
                weigh(t, h, w)
            },
            config.step,
            Some(&gcoords),
        )?
        .max_relative_error;
        worst[0] = worst[0].max(e);

        let h0 = Tensor::zeros(&[rows, a.hidden]);
        worst[1] = worst[1].max(check(&|p, t| {
            let net = nets.agent.bind(t, p)?;
            let mut h = konst(t, &h0)?;
            let mut acc = Vec::new();
            for _ in 0..2 {
                let x = konst(t, &input)?;
                let (q, h1) = net.forward(t, x, h)?;
                h = h1;
                acc.push(q);
            }
            let q = t.concat(&acc)?;
            weigh(t, q, w)
        })?);
        worst[2] = worst[2].max(check(&|p, t| {
            let net = nets.comm.bind(t, p)?;
            let x = konst(t, &comm_input)?;
            let h = konst(t, &h0)?;
            let c = net.forward(t, x, h)?;
            let all = t.concat(&[c.mu, c.logvar, c.gate_logits, c.h])?;
            weigh(t, all, w)
        })?);
        worst[3] = worst[3].max(check(&|p, t| {
            let net = nets.posterior.bind(t, p)?;
            let x = konst(t, &input)?;
            let h = konst(t, &h0)?;
            let (lq, _) = net.forward(t, x, h)?;
            weigh(t, lq, w)
        })?);
        let qs = uniform(&mut rng, &[4, 2], -2.0, 2.0);
        let state = uniform(&mut rng, &[4, a.state_dim()], 0.0, 1.0);
        worst[4] = worst[4].max(check(&|p, t| {
            let q = konst(t, &qs)?;
            let s = konst(t, &state)?;
            let y = nets.mixer.forward(t, p, q, s)?;
            weigh(t, y, w)
        })?);
        let cfg = CommLossConfig { beta_m: 0.3, beta_c: 0.2, stop_gradient_policy: false };
        worst[5] = worst[5].max(check(&|p, t| {
            let agent = nets.agent.bind(t, p)?;
            let comm = nets.comm.bind(t, p)?;
            let post = nets.posterior.bind(t, p)?;
            let h = konst(t, &h0)?;
            let x = konst(t, &input)?;
            let cx = konst(t, &comm_input)?;
            let (q, _) = agent.forward(t, x, h)?;
            let (lq, _) = post.forward(t, x, h)?;
            let c = comm.forward(t, cx, h)?;
            let n = communication_loss(t, q, lq, Some((c.mu, c.logvar, c.gate_logits)), &cfg)?;
            Ok(n.total)
        })?);

        let (_, topo, ep) = toy_episode(&nets, &params, CommMode::Learned, point as u64)?;
        let target = perturb(&params, &mut rng, 0.2);
        let train = TrainConfig { comm: cfg, reward_scale: 0.2, ..TrainConfig::default() };
        worst[6] = worst[6].max(check(&|p, t| {
            let n = build_loss(t, &nets, p, &target, &topo, &[&ep], &train, 1.0, &mut ChaCha8Rng::seed_from_u64(0))?;
            Ok(n.td)
        })?);
        worst[7] = worst[7].max(check(&|p, t| {
            let n = build_loss(t, &nets, p, &target, &topo, &[&ep], &train, 1.0, &mut ChaCha8Rng::seed_from_u64(0))?;
            Ok(n.total)
        })?);
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, e)| outcome(n, CheckKind::Composite, config.composite_points, e, tol))
        .collect())
}

/// Every registered check followed by the negative control.
pub fn gradient_suite(config: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mut out = primitive_checks(config)?;
    out.extend(composite_checks(config)?);
    out.push(negative_control(config)?);
    Ok(out)
}
