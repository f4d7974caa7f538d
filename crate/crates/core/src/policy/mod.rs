//! Hierarchical bit-allocation agents.
//!
//! Both agents share one architecture: a strided convolutional feature
//! extractor over the image/mask planes, a fully connected trunk, and linear
//! actor (logits) and critic (value) heads. Optional residual adapters can
//! be inserted after the trunk (`ADAPTER_V1`) or in front of either head
//! (`ADAPTER_A`, `ADAPTER_C`). Every parameter tensor carries exactly one
//! group tag so transfer strategies can freeze arbitrary subsets.

mod checkpoint;
mod net;
mod state;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{QP_I_MAX, QP_I_MIN};
use crate::semantics::CtuLabel;

pub use checkpoint::{
    arch_hash, AgentMeta, Checkpoint, CheckpointMeta, TensorMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use net::{Adapter, ArchConfig, Conv, Linear, PolicyNet, TensorMut, TensorRef};
pub use state::{ctu_state, frame_state, lambda_feature, FrameStateBase, State};

use net::Depth;

/// QP_I choices 14..=37.
pub const FRAME_ACTIONS: usize = (QP_I_MAX - QP_I_MIN + 1) as usize;
/// Foreground offsets occupy logits 0..3, background offsets 3..7.
pub const CTU_ACTIONS: usize = 7;
pub const FG_OFFSETS: [i32; 3] = [-2, 0, 2];
pub const BG_OFFSETS: [i32; 4] = [2, 4, 6, 8];

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("state shape (planes {actual:?}) does not match network input {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("ctu-level forward needs a CTU label")]
    MissingLabel,
    #[error("action {action} is not legal here")]
    IllegalAction { action: usize },
    #[error("no legal action has a finite logit")]
    NoLegalAction,
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture hash {found} does not match expected {expected}")]
    ArchMismatch { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "FE")]
    Fe,
    #[serde(rename = "FC")]
    Fc,
    #[serde(rename = "ACTOR")]
    Actor,
    #[serde(rename = "CRITIC")]
    Critic,
    #[serde(rename = "ADAPTER_V1")]
    AdapterV1,
    #[serde(rename = "ADAPTER_A")]
    AdapterA,
    #[serde(rename = "ADAPTER_C")]
    AdapterC,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Fe,
        Group::Fc,
        Group::Actor,
        Group::Critic,
        Group::AdapterV1,
        Group::AdapterA,
        Group::AdapterC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Fe => "FE",
            Group::Fc => "FC",
            Group::Actor => "ACTOR",
            Group::Critic => "CRITIC",
            Group::AdapterV1 => "ADAPTER_V1",
            Group::AdapterA => "ADAPTER_A",
            Group::AdapterC => "ADAPTER_C",
        }
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, Group::AdapterV1 | Group::AdapterA | Group::AdapterC)
    }

    fn depth(self) -> Depth {
        match self {
            Group::Fe => Depth::Extractor,
            Group::Fc => Depth::Trunk,
            Group::AdapterV1 => Depth::AdapterV1,
            Group::Actor | Group::Critic | Group::AdapterA | Group::AdapterC => Depth::Heads,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| PolicyError::UnknownGroup(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentLevel {
    Frame,
    Ctu,
}

/// Legal logit indices for an agent level (and CTU label).
pub fn legal_actions(level: AgentLevel, n_actions: usize, label: Option<CtuLabel>) -> std::ops::Range<usize> {
    match (level, label) {
        (AgentLevel::Frame, _) | (AgentLevel::Ctu, None) => 0..n_actions,
        (AgentLevel::Ctu, Some(CtuLabel::Foreground)) => 0..FG_OFFSETS.len().min(n_actions),
        (AgentLevel::Ctu, Some(CtuLabel::Background)) => {
            FG_OFFSETS.len().min(n_actions)..n_actions
        }
    }
}

pub fn frame_action_to_qp(action: usize) -> i32 {
    QP_I_MIN + action as i32
}

pub fn ctu_action_to_offset(action: usize) -> i32 {
    if action < FG_OFFSETS.len() {
        FG_OFFSETS[action]
    } else {
        BG_OFFSETS[action - FG_OFFSETS.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDecision {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub entropy: f64,
}

impl ActionDecision {
    pub fn with_value(mut self, value: f64) -> Self {
        self.value = value;
        self
    }
}

/// Softmax over the finite entries; masked entries get probability 0.
fn softmax(logits: &[f64]) -> Result<Vec<f64>, PolicyError> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(PolicyError::NoLegalAction);
    }
    let mut p: Vec<f64> = logits
        .iter()
        .map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    Ok(p)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn decision(probs: &[f64], action: usize) -> ActionDecision {
    ActionDecision {
        action,
        log_prob: probs[action].ln(),
        value: 0.0,
        entropy: entropy(probs),
    }
}

/// Draws from the softmax over legal (finite) logits.
pub fn sample_action(logits: &[f64], rng: &mut impl Rng) -> Result<ActionDecision, PolicyError> {
    let p = softmax(logits)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_legal = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        last_legal = i;
        acc += pi;
        if u < acc {
            return Ok(decision(&p, i));
        }
    }
    Ok(decision(&p, last_legal))
}

/// Argmax over legal logits, lowest index on ties.
pub fn greedy_action(logits: &[f64]) -> Result<ActionDecision, PolicyError> {
    let p = softmax(logits)?;
    let mut best: Option<usize> = None;
    for (i, &v) in logits.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v > logits[b]) {
            best = Some(i);
        }
    }
    Ok(decision(&p, best.ok_or(PolicyError::NoLegalAction)?))
}

fn masked_logits(net: &PolicyNet, raw: &[f64], label: Option<CtuLabel>) -> Result<Vec<f64>, PolicyError> {
    if net.arch.level == AgentLevel::Ctu && label.is_none() {
        return Err(PolicyError::MissingLabel);
    }
    let legal = legal_actions(net.arch.level, net.arch.n_actions, label);
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, &v)| if legal.contains(&i) { v } else { f64::NEG_INFINITY })
        .collect())
}

/// Masked logits and value estimate.
pub fn forward(
    net: &PolicyNet,
    state: &State,
    label: Option<CtuLabel>,
) -> Result<(Vec<f64>, f64), PolicyError> {
    net.check_state(state)?;
    let tr = net.forward_trace(state);
    Ok((masked_logits(net, &tr.logits, label)?, tr.value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub count: usize,
    pub tensors: Vec<String>,
}

/// Parameter counts per group; groups without tensors are omitted.
pub fn param_groups(net: &PolicyNet) -> BTreeMap<Group, GroupInfo> {
    let mut out: BTreeMap<Group, GroupInfo> = BTreeMap::new();
    for t in net.tensors() {
        let e = out.entry(t.group).or_insert_with(|| GroupInfo {
            count: 0,
            tensors: Vec::new(),
        });
        e.count += t.data.len();
        e.tensors.push(t.name.to_string());
    }
    out
}

/// Per-tensor trainable flags, aligned with [`PolicyNet::tensors`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub flags: Vec<bool>,
}

impl TrainableMask {
    pub fn any(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }

    pub fn all(&self) -> bool {
        self.flags.iter().all(|&f| f)
    }

    pub fn trainable_count(&self, net: &PolicyNet) -> usize {
        net.tensors()
            .iter()
            .zip(&self.flags)
            .filter(|(_, &f)| f)
            .map(|(t, _)| t.data.len())
            .sum()
    }

    fn depth(&self, net: &PolicyNet) -> Option<Depth> {
        net.tensors()
            .iter()
            .zip(&self.flags)
            .filter(|(_, &f)| f)
            .map(|(t, _)| t.group.depth())
            .max()
    }
}

pub fn trainable_mask(net: &PolicyNet, groups: &[Group]) -> TrainableMask {
    TrainableMask {
        flags: net.tensors().iter().map(|t| groups.contains(&t.group)).collect(),
    }
}

/// String-keyed variant of [`trainable_mask`]; unknown names are an error.
pub fn trainable_mask_by_name(net: &PolicyNet, groups: &[&str]) -> Result<TrainableMask, PolicyError> {
    let parsed = groups
        .iter()
        .map(|g| g.parse::<Group>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(trainable_mask(net, &parsed))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub actor: f64,
    pub critic: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Inputs of one A2C loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub action: usize,
    pub advantage: f64,
    pub value_target: f64,
    pub entropy_coef: f64,
}

/// `L = -log pi(a|s) * adv + 0.5 (V(s) - target)^2 - entropy_coef * H(pi)`,
/// with gradients scaled by `weight` accumulated into `grads`.
///
/// Backpropagation stops at the deepest trainable group, but frozen tensors
/// above it (for example the actor head when only an adapter trains) still
/// receive values in `grads`; [`mask_gradients`] clears them.
pub fn accumulate_gradients(
    net: &PolicyNet,
    state: &State,
    label: Option<CtuLabel>,
    inputs: LossInputs,
    mask: &TrainableMask,
    weight: f64,
    grads: &mut PolicyNet,
) -> Result<LossParts, PolicyError> {
    net.check_state(state)?;
    let tr = net.forward_trace(state);
    let logits = masked_logits(net, &tr.logits, label)?;
    if !logits[inputs.action.min(logits.len() - 1)].is_finite() || inputs.action >= logits.len() {
        return Err(PolicyError::IllegalAction {
            action: inputs.action,
        });
    }
    if tr.logits.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite("logits"));
    }
    if !tr.value.is_finite() {
        return Err(PolicyError::NonFinite("value"));
    }
    let p = softmax(&logits)?;
    let h = entropy(&p);
    let logp = p[inputs.action].ln();
    let parts = LossParts {
        actor: -logp * inputs.advantage,
        critic: 0.5 * (tr.value - inputs.value_target).powi(2),
        entropy: h,
        total: -logp * inputs.advantage + 0.5 * (tr.value - inputs.value_target).powi(2)
            - inputs.entropy_coef * h,
    };
    if !parts.total.is_finite() {
        return Err(PolicyError::NonFinite("loss"));
    }

    let Some(depth) = mask.depth(net) else {
        return Ok(parts);
    };
    let mut dlogits = vec![0.0; p.len()];
    for (j, d) in dlogits.iter_mut().enumerate() {
        if p[j] <= 0.0 {
            continue;
        }
        let onehot = if j == inputs.action { 1.0 } else { 0.0 };
        let dent = p[j] * (p[j].ln() + h);
        *d = weight * (-inputs.advantage * (onehot - p[j]) + inputs.entropy_coef * dent);
    }
    let dvalue = weight * (tr.value - inputs.value_target);

    net.backward(&tr, &dlogits, dvalue, grads, depth);
    Ok(parts)
}

/// Single-sample loss and masked gradients.
pub fn forward_backward(
    net: &PolicyNet,
    state: &State,
    label: Option<CtuLabel>,
    inputs: LossInputs,
    mask: &TrainableMask,
) -> Result<(LossParts, PolicyNet), PolicyError> {
    let mut grads = net.zeros_like();
    let parts = accumulate_gradients(net, state, label, inputs, mask, 1.0, &mut grads)?;
    mask_gradients(&mut grads, mask);
    Ok((parts, grads))
}

/// Zeroes every gradient tensor outside `mask`.
pub fn mask_gradients(grads: &mut PolicyNet, mask: &TrainableMask) {
    for (g, &f) in grads.tensors_mut().into_iter().zip(&mask.flags) {
        if !f {
            g.data.fill(0.0);
        }
    }
}

/// L2 norm over the masked gradient tensors.
pub fn grad_norm(grads: &PolicyNet, mask: &TrainableMask) -> f64 {
    grads
        .tensors()
        .iter()
        .zip(&mask.flags)
        .filter(|(_, &f)| f)
        .flat_map(|(t, _)| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Plain SGD on the masked tensors; frozen tensors are never written.
pub fn sgd_step(net: &mut PolicyNet, grads: &PolicyNet, mask: &TrainableMask, lr: f64, scale: f64) {
    for ((p, g), &f) in net.tensors_mut().into_iter().zip(grads.tensors()).zip(&mask.flags) {
        if f {
            for (w, d) in p.data.iter_mut().zip(g.data) {
                *w -= lr * scale * d;
            }
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates, shaped like the network they update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: PolicyNet,
    v: PolicyNet,
    t: i32,
}

impl AdamState {
    pub fn new(net: &PolicyNet) -> Self {
        Self {
            m: net.zeros_like(),
            v: net.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// Bias-corrected Adam on the masked tensors. `scale` multiplies the raw
/// gradient (clipping) before it enters the moment estimates.
pub fn adam_step(
    net: &mut PolicyNet,
    grads: &PolicyNet,
    state: &mut AdamState,
    mask: &TrainableMask,
    lr: f64,
    scale: f64,
) {
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t);
    let tensors = net
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
        .zip(&mask.flags);
    for ((((p, g), m), v), &f) in tensors {
        if !f {
            continue;
        }
        for (((w, &d), mi), vi) in p.data.iter_mut().zip(g.data.iter()).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            let d = d * scale;
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * d;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * d * d;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
        }
    }
}
