//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smc_core::policy::{
    forward, forward_backward, trainable_mask, AgentLevel, ArchConfig, Group, LossInputs, PolicyNet, State,
};
use smc_core::semantics::CtuLabel;

pub const FD_STEP: f64 = 1e-4;

/// Which optional adapters a gradient-check net carries.
pub const ADAPTER_CONFIGS: [(bool, bool, bool); 5] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, true),
];

pub fn small_arch(level: AgentLevel) -> ArchConfig {
    ArchConfig {
        level,
        input_size: 8,
        in_channels: 2,
        conv_channels: [2, 3, 4],
        hidden: 6,
        n_scalars: 2,
        n_actions: if level == AgentLevel::Ctu { 7 } else { 4 },
        adapter_v1_width: 3,
        adapter_head_width: 2,
    }
}

/// Random net with every parameter (including adapter up-projections and
/// biases) drawn non-zero, so every gradient path is live.
pub fn random_net(level: AgentLevel, adapters: (bool, bool, bool), seed: u64) -> PolicyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = PolicyNet::new(small_arch(level), &mut rng);
    if adapters.0 {
        net.insert_adapter_v1(&mut rng);
    }
    if adapters.1 {
        net.insert_adapter_actor(&mut rng);
    }
    if adapters.2 {
        net.insert_adapter_critic(&mut rng);
    }
    for t in net.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    net
}

pub fn random_state(arch: &ArchConfig, rng: &mut impl Rng) -> State {
    State {
        planes: (0..arch.plane_len()).map(|_| rng.gen::<f64>()).collect(),
        scalars: (0..arch.n_scalars).map(|_| rng.gen::<f64>()).collect(),
    }
}

/// The A2C loss recomputed from the public forward pass alone.
pub fn reference_loss(net: &PolicyNet, state: &State, label: Option<CtuLabel>, inp: &LossInputs) -> f64 {
    let (logits, value) = forward(net, state, label).unwrap();
    let finite: Vec<f64> = logits.iter().copied().filter(|v| v.is_finite()).collect();
    let m = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + finite.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let logp = |v: f64| v - lse;
    let entropy: f64 = -finite.iter().map(|&v| logp(v).exp() * logp(v)).sum::<f64>();
    -logp(logits[inp.action]) * inp.advantage + 0.5 * (value - inp.value_target).powi(2)
        - inp.entropy_coef * entropy
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Analytic gradients against central differences on every parameter.
/// The relative error is `|a - n| / max(|a|, |n|, 1e-6)`; coordinates whose
/// ±h perturbation flips a ReLU are non-differentiable there and skipped.
pub fn grad_check(net: &PolicyNet, state: &State, label: Option<CtuLabel>, inp: LossInputs) -> GradCheck {
    let mask = trainable_mask(net, &Group::ALL);
    let (_, grads) = forward_backward(net, state, label, inp, &mask).unwrap();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
    let pattern = net.activation_pattern(state).unwrap();

    let mut out = GradCheck::default();
    let mut probe = net.clone();
    let mut k = 0;
    let n_tensors = probe.tensors().len();
    for ti in 0..n_tensors {
        let len = probe.tensors()[ti].data.len();
        for j in 0..len {
            let orig = probe.tensors()[ti].data[j];
            let mut eval = |v: f64| {
                probe.tensors_mut()[ti].data[j] = v;
                let same = probe.activation_pattern(state).unwrap() == pattern;
                (reference_loss(&probe, state, label, &inp), same)
            };
            let (lp, sp) = eval(orig + FD_STEP);
            let (lm, sm) = eval(orig - FD_STEP);
            probe.tensors_mut()[ti].data[j] = orig;
            let a = analytic[k];
            k += 1;
            if !(sp && sm) {
                out.skipped_kinks += 1;
                continue;
            }
            let n = (lp - lm) / (2.0 * FD_STEP);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            out.max_rel_err = out.max_rel_err.max(rel);
            out.checked += 1;
        }
    }
    out
}

/// Runs the check on `n_nets` random nets per adapter configuration and
/// returns the worst case.
pub fn grad_check_suite(n_nets: u64) -> GradCheck {
    let mut worst = GradCheck::default();
    for (ci, &adapters) in ADAPTER_CONFIGS.iter().enumerate() {
        for i in 0..n_nets {
            let seed = 1000 * ci as u64 + i;
            let level = if i % 2 == 0 { AgentLevel::Frame } else { AgentLevel::Ctu };
            let net = random_net(level, adapters, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let state = random_state(&net.arch, &mut rng);
            let label = (level == AgentLevel::Ctu).then(|| {
                if rng.gen::<bool>() {
                    CtuLabel::Foreground
                } else {
                    CtuLabel::Background
                }
            });
            let legal: Vec<usize> = forward(&net, &state, label)
                .unwrap()
                .0
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, _)| i)
                .collect();
            let inp = LossInputs {
                action: legal[rng.gen_range(0..legal.len())],
                advantage: rng.gen_range(-2.0..2.0),
                value_target: rng.gen_range(-1.0..1.0),
                entropy_coef: 0.05,
            };
            let r = grad_check(&net, &state, label, inp);
            assert!(net.param_count() <= 500, "{}", net.param_count());
            worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
            worst.checked += r.checked;
            worst.skipped_kinks += r.skipped_kinks;
        }
    }
    worst
}

/// Piecewise-linear interpolation of `y(x)` through points sorted by `x`.
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let i = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
    let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// BD-rate by dense trapezoid integration of piecewise-linear
/// log10(rate)-versus-quality curves over the shared quality range.
/// Each curve is `(rate, quality)` with quality strictly increasing.
pub fn trapezoid_bd_rate(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> f64 {
    let split = |c: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) {
        let mut c = c.to_vec();
        c.sort_by(|a, b| a.1.total_cmp(&b.1));
        (c.iter().map(|p| p.1).collect(), c.iter().map(|p| p.0.log10()).collect())
    };
    let (qa, la) = split(anchor);
    let (qt, lt) = split(test);
    let lo = qa[0].max(qt[0]);
    let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
    assert!(hi > lo, "no quality overlap");
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let gap = |q: f64| interp(&qt, &lt, q) - interp(&qa, &la, q);
    let mut area = 0.5 * (gap(lo) + gap(hi));
    for i in 1..n {
        area += gap(lo + i as f64 * h);
    }
    100.0 * (10f64.powf(area * h / (hi - lo)) - 1.0)
}

/// A smooth monotone RD curve: `log10(rate)` quadratic in quality, sampled
/// at `n` evenly spaced qualities.
pub fn smooth_rd_curve(rng: &mut impl Rng, n: usize) -> Vec<(f64, f64)> {
    let q0 = rng.gen_range(0.3..0.5);
    let q1 = q0 + rng.gen_range(0.3..0.45);
    let a = rng.gen_range(-1.6..-1.2);
    let b = rng.gen_range(2.0..4.0);
    let c = rng.gen_range(0.0..1.5);
    (0..n)
        .map(|i| {
            let q = q0 + (q1 - q0) * i as f64 / (n - 1) as f64;
            let x = q - q0;
            (10f64.powf(a + b * x + c * x * x), q)
        })
        .collect()
}

pub fn rd_curve(points: &[(f64, f64)]) -> smc_core::eval::RdCurve {
    smc_core::eval::RdCurve::new(
        points
            .iter()
            .enumerate()
            .map(|(i, &(rate, quality))| smc_core::eval::RdPoint {
                label: format!("p{i}"),
                rate,
                quality,
            })
            .collect(),
    )
    .unwrap()
}

/// Worst absolute BD-rate gap between `bd_metric` and the trapezoid oracle
/// over `pairs` random curve pairs.
pub fn bd_oracle_suite(pairs: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0xbd);
    for _ in 0..pairs {
        let a = smooth_rd_curve(&mut rng, 12);
        let b = smooth_rd_curve(&mut rng, 12);
        let ours = smc_core::eval::bd_metric(&rd_curve(&a), &rd_curve(&b)).unwrap().bd_rate;
        worst = worst.max((ours - trapezoid_bd_rate(&a, &b)).abs());
    }
    worst
}
