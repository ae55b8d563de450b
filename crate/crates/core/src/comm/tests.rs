use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::finite_difference_check;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn message_sampling_modes() {
    let mut r = rng(0);
    let mu = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(sample_message(&mu, &[0.3; 5], &mut r, SampleMode::Mean).unwrap(), mu.to_vec());
    let tiny = sample_message(&mu, &[-80.0; 5], &mut r, SampleMode::Stochastic).unwrap();
    for (a, b) in tiny.iter().zip(&mu) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(sample_message(&mu, &[0.0; 4], &mut r, SampleMode::Mean).is_err());
}

#[test]
fn standard_message_moments() {
    let mut r = rng(1);
    let n = 100_000;
    let mut sum = [0.0; 5];
    let mut sq = [0.0; 5];
    for _ in 0..n {
        let m = sample_message(&[0.0; 5], &[0.0; 5], &mut r, SampleMode::Stochastic).unwrap();
        for k in 0..5 {
            sum[k] += m[k];
            sq[k] += m[k] * m[k];
        }
    }
    for k in 0..5 {
        let mean = sum[k] / n as f64;
        let var = sq[k] / n as f64 - mean * mean;
        assert!(mean.abs() <= 0.02, "{mean}");
        assert!((var - 1.0).abs() <= 0.03, "{var}");
    }
}

#[test]
fn gumbel_sigmoid_limits_and_law() {
    let mut r = rng(2);
    for logit in [-3.0, 0.0, 4.0] {
        let c = gumbel_sigmoid(logit, 1e12, &mut r).unwrap();
        assert!((c - 0.5).abs() < 1e-9);
    }
    assert!(gumbel_sigmoid(0.0, 0.0, &mut r).is_err());
    assert!(gumbel_sigmoid(0.0, -1.0, &mut r).is_err());
    let n = 100_000;
    for (logit, target, tol) in [(0.0, 0.5, 0.005), (1.0, 0.7311, 0.005)] {
        let hits = (0..n).filter(|_| gumbel_sigmoid(logit, GATE_TEMPERATURE, &mut r).unwrap() > 0.5).count();
        let p = hits as f64 / n as f64;
        assert!((p - target).abs() <= tol, "logit {logit}: {p}");
    }
}

#[test]
fn hard_gates() {
    assert_eq!(hard_gate(0.51), 1);
    assert_eq!(hard_gate(0.5), 0);
    assert_eq!(hard_gate(0.49), 0);
    let bits: Vec<u8> = [0.9, 0.1, 0.6, 0.4, 0.5].iter().map(|c| hard_gate(*c)).collect();
    assert_eq!(bits, vec![1, 0, 1, 0, 0]);
    let mut r = rng(3);
    let n = 100_000;
    let on: usize = (0..n).map(|_| hard_gate(gumbel_sigmoid(0.0, GATE_TEMPERATURE, &mut r).unwrap()) as usize).sum();
    assert!((on as f64 / n as f64 - 0.5).abs() <= 0.01);
}

#[test]
fn gating_is_elementwise() {
    let m = [1.0, -2.0, 3.0, -4.0, 5.0];
    assert_eq!(gate(&m, &[1.0; 5]).unwrap(), m.to_vec());
    assert_eq!(gate(&m, &[0.0; 5]).unwrap(), vec![0.0; 5]);
    assert_eq!(gate(&m, &[1.0, 0.0, 1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 3.0, 0.0, 0.0]);
    assert!(gate(&m, &[1.0; 4]).is_err());
}

#[test]
fn inbox_layout() {
    assert_eq!(assemble_inbox(&[], 4, 5).unwrap(), vec![0.0; 20]);
    let ones = [1.0; 5];
    let inbox = assemble_inbox(&[(0, &ones)], 4, 5).unwrap();
    assert_eq!(&inbox[..5], &ones);
    assert!(inbox[5..].iter().all(|v| *v == 0.0));
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [6.0, 7.0, 8.0, 9.0, 10.0];
    let x = assemble_inbox(&[(1, &a), (3, &b)], 4, 5).unwrap();
    let y = assemble_inbox(&[(3, &b), (1, &a)], 4, 5).unwrap();
    assert_eq!(x, y);
    assert!(matches!(assemble_inbox(&[(2, &a), (2, &b)], 4, 5), Err(Error::DuplicateSlot(2))));
}

#[test]
fn gaussian_kl_closed_form() {
    assert_eq!(gaussian_kl(&[0.0; 5], &[0.0; 5]), 0.0);
    assert_eq!(gaussian_kl(&[2.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 5]), 2.0);
}

fn normal_logpdf(x: f64, mu: f64, logvar: f64) -> f64 {
    -0.5 * (core::f64::consts::TAU.ln() + logvar + (x - mu) * (x - mu) / logvar.exp())
}

#[test]
fn gaussian_kl_matches_monte_carlo() {
    let mut r = rng(4);
    for _ in 0..3 {
        let mu: Vec<f64> = (0..5).map(|_| r.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..5).map(|_| r.random_range(-1.5..1.0)).collect();
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let eps = message_noise(&mut r, 5);
            let m = sample_message_with(&mu, &lv, &eps).unwrap();
            for k in 0..5 {
                acc += normal_logpdf(m[k], mu[k], lv[k]) - normal_logpdf(m[k], 0.0, 0.0);
            }
        }
        let mc = acc / n as f64;
        let exact = gaussian_kl(&mu, &lv);
        assert!((mc - exact).abs() <= 0.01 * exact, "{mc} vs {exact}");
    }
}

#[test]
fn bernoulli_kl_values() {
    assert_eq!(bernoulli_kl(0.5, 0.5).unwrap(), 0.0);
    assert!((bernoulli_kl(1.0, 0.5).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
    assert!((bernoulli_kl(0.75, 0.5).unwrap() - 0.1308).abs() <= 1e-4);
    assert!(bernoulli_kl(0.3, 0.0).is_err());
    assert!(bernoulli_kl(0.3, 1.0).is_err());
    for logit in [-40.0, -3.0, 0.0, 0.7, 25.0] {
        let direct = bernoulli_kl(sigmoid(logit), 0.5).unwrap();
        assert!((bernoulli_kl_logit(logit) - direct).abs() < 1e-12);
        assert!(bernoulli_kl_logit(logit) >= 0.0);
    }
    // Monte-Carlo log-ratio.
    let mut r = rng(5);
    let p = 0.75;
    let n = 1_000_000;
    let acc: f64 = (0..n)
        .map(|_| if r.random::<f64>() < p { (p / 0.5f64).ln() } else { ((1.0 - p) / 0.5f64).ln() })
        .sum();
    let mc = acc / n as f64;
    assert!((mc - 0.1308).abs() <= 0.01 * 0.1308);
}

#[test]
fn joint_penalty_is_the_sum_of_factor_penalties() {
    // One Gaussian coordinate and one gate: integrate the joint log-ratio numerically.
    let (mu, lv, p): (f64, f64, f64) = (0.7, -0.4, 0.8);
    let sd = (0.5 * lv).exp();
    let steps = 20_000;
    let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
    let h = (hi - lo) / steps as f64;
    let mut joint = 0.0;
    for bit in [0.0, 1.0] {
        let pc = if bit == 1.0 { p } else { 1.0 - p };
        for k in 0..=steps {
            let x = lo + k as f64 * h;
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            let lp = normal_logpdf(x, mu, lv) + pc.ln();
            let lr = normal_logpdf(x, 0.0, 0.0) + 0.5f64.ln();
            joint += w * h * lp.exp() * (lp - lr);
        }
    }
    let sum = gaussian_kl(&[mu], &[lv]) + bernoulli_kl(p, 0.5).unwrap();
    assert!((joint - sum).abs() < 1e-9, "{joint} vs {sum}");
}

#[test]
fn reparameterised_gradient_is_unbiased() {
    // E[sum m^2] = sum mu^2 + exp(logvar); d/dmu = 2 mu.
    let mut r = rng(6);
    let mu = vec![0.5, -1.0, 2.0];
    let lv = vec![0.2, -0.5, 0.0];
    let n = 20_000;
    let eps: Vec<f64> = (0..n * 3).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut tape = Tape::new();
    let rep = |v: &[f64]| Tensor::new(vec![n, 3], (0..n).flat_map(|_| v.iter().copied()).collect()).unwrap();
    let m_node = tape.variable(rep(&mu)).unwrap();
    let lv_node = tape.variable(rep(&lv)).unwrap();
    let e = tape.constant(Tensor::new(vec![n, 3], eps).unwrap()).unwrap();
    let s = tape_sample_message(&mut tape, m_node, lv_node, e).unwrap();
    let sq = tape.mul(s, s).unwrap();
    let rows = tape.row_sum(sq).unwrap();
    let loss = tape.mean(rows).unwrap();
    let g = tape.backward(loss).unwrap();
    let gm = g.get(m_node).unwrap();
    for k in 0..3 {
        let est: f64 = (0..n).map(|row| gm.data()[row * 3 + k]).sum::<f64>();
        // Per-sample gradient 2(mu + sd eps) has standard deviation 2 sd.
        let sd = (0.5 * lv[k] as f64).exp();
        let tol = 4.0 * 2.0 * sd / (n as f64).sqrt();
        assert!((est - 2.0 * mu[k]).abs() <= tol, "{k}: {est}");
    }
}

#[test]
fn tape_kls_match_closed_forms() {
    let mut r = rng(7);
    let mu: Vec<f64> = (0..10).map(|_| r.random_range(-2.0..2.0)).collect();
    let lv: Vec<f64> = (0..10).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![2, 5], mu.clone()).unwrap()).unwrap();
    let l = tape.constant(Tensor::new(vec![2, 5], lv.clone()).unwrap()).unwrap();
    let k = tape_gaussian_kl(&mut tape, m, l).unwrap();
    for row in 0..2 {
        let exact = gaussian_kl(&mu[row * 5..row * 5 + 5], &lv[row * 5..row * 5 + 5]);
        assert!((tape.value(k).data()[row] - exact).abs() < 1e-12);
    }
    let kb = tape_bernoulli_kl(&mut tape, m).unwrap();
    for row in 0..2 {
        let exact: f64 = mu[row * 5..row * 5 + 5].iter().map(|x| bernoulli_kl_logit(*x)).sum();
        assert!((tape.value(kb).data()[row] - exact).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_with_matching_posterior_is_entropy() {
    let mut r = rng(8);
    let q: Vec<f64> = (0..12).map(|_| r.random_range(-3.0..3.0)).collect();
    let mut tape = Tape::new();
    let qn = tape.constant(Tensor::new(vec![3, 4], q.clone()).unwrap()).unwrap();
    let lq = tape.log_softmax(qn).unwrap();
    let cfg = CommLossConfig { beta_m: 0.0, beta_c: 0.0, ..CommLossConfig::default() };
    let mu = tape.constant(Tensor::new(vec![1, 5], vec![1.0; 5]).unwrap()).unwrap();
    let out = communication_loss(&mut tape, qn, lq, Some((mu, mu, mu)), &cfg).unwrap();
    let mut entropy = 0.0;
    for row in q.chunks(4) {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        entropy -= row.iter().map(|x| x.exp() / z * (x.exp() / z).ln()).sum::<f64>();
    }
    entropy /= 3.0;
    assert!((tape.value(out.ce).item() - entropy).abs() < 1e-12);
    assert_eq!(tape.value(out.total).item(), tape.value(out.ce).item());
    let terms = CommLossTerms::read(&tape, &out, &cfg);
    assert!(terms.kl_message >= 0.0 && terms.kl_gate >= 0.0);
    assert_eq!(terms.total(), terms.ce_term);
}

#[test]
fn communication_loss_gradients() {
    let mut r = rng(9);
    let x: Vec<f64> = (0..3 * 4 + 3 * 4 + 2 * 5 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let point = Tensor::new(vec![1, x.len()], x).unwrap();
    let cfg = CommLossConfig { beta_m: 0.3, beta_c: 0.2, stop_gradient_policy: false };
    let f = |tape: &mut Tape, p: NodeId| {
        let q = tape.slice(p, 0, 12)?;
        let q = tape.gather(q, (0..12).collect(), &[3, 4])?;
        let post = tape.slice(p, 12, 12)?;
        let post = tape.gather(post, (0..12).collect(), &[3, 4])?;
        let lq = tape.log_softmax(post)?;
        let rest = tape.slice(p, 24, 30)?;
        let rest = tape.gather(rest, (0..30).collect(), &[2, 15])?;
        let mu = tape.slice(rest, 0, 5)?;
        let lv = tape.slice(rest, 5, 5)?;
        let lg = tape.slice(rest, 10, 5)?;
        Ok(communication_loss(tape, q, lq, Some((mu, lv, lg)), &cfg)?.total)
    };
    let err = finite_difference_check(&f, &point, 1e-5).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn no_active_pairs_means_no_penalty() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
    let lq = tape.log_softmax(q).unwrap();
    let out = communication_loss(&mut tape, q, lq, None, &CommLossConfig::default()).unwrap();
    assert_eq!(tape.value(out.kl_message).item(), 0.0);
    assert_eq!(tape.value(out.kl_gate).item(), 0.0);
}

#[test]
fn gathered_rows_and_zero_rows() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let g = gather_rows(&mut tape, a, &[Some(1), None, Some(0)]).unwrap();
    assert_eq!(tape.value(g).data(), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
}
