//! Episodes, rewards and advantage actor-critic updates for both agents.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    encode_sequence, frame_qp_schedule, CodecError, CtuOffsets, Sequence, SequenceStats, CTU_SIZE,
};
use crate::policy::{
    accumulate_gradients, ctu_action_to_offset, ctu_state, forward, frame_action_to_qp, frame_state,
    adam_step, grad_norm, greedy_action, sample_action, sgd_step, AdamState, trainable_mask, ActionDecision, ArchConfig,
    Checkpoint, FrameStateBase, Group, LossInputs, LossParts, PolicyError, PolicyNet, State,
    TrainableMask,
};
use crate::semantics::{default_ctu_labels, miou, segment, CtuLabel, CtuLabels, SemanticMask, SemanticsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Per-agent optimizer state carried across iterations.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentOptimizer {
    Sgd,
    Adam(Box<AdamState>),
}

impl AgentOptimizer {
    pub fn new(kind: OptimizerKind, net: &PolicyNet) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam(Box::new(AdamState::new(net))),
        }
    }

    fn step(&mut self, net: &mut PolicyNet, grads: &PolicyNet, mask: &TrainableMask, lr: f64, scale: f64) {
        match self {
            Self::Sgd => sgd_step(net, grads, mask, lr, scale),
            Self::Adam(st) => adam_step(net, grads, st, mask, lr, scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub frame: AgentOptimizer,
    pub ctu: AgentOptimizer,
}

impl Optimizers {
    pub fn new(kind: OptimizerKind, frame: &PolicyNet, ctu: &PolicyNet) -> Self {
        Self {
            frame: AgentOptimizer::new(kind, frame),
            ctu: AgentOptimizer::new(kind, ctu),
        }
    }
}

/// Flat QP whose mean bpp normalizes the rate term.
pub const BPP_NORM_QP: i32 = 22;
pub const MIN_PRETRAIN_SEQUENCES: usize = 20;
/// Log-spaced: the rate term overtakes task distortion well below λ = 1.
pub const DEFAULT_LAMBDAS: [f64; 10] = [0.0, 0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 10.0, 100.0];
/// QP_I values of the zero-offset encodes a `RewardNormalizer` is fitted on.
pub const NORMALIZER_QPS: [i32; 7] = [14, 18, 22, 26, 30, 34, 37];
const MIN_REWARD_STD: f64 = 1e-3;
pub const LAMBDA_MAX: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} sequences, got {got}")]
    CorpusTooSmall { needed: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("writing training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda: f64,
    pub bpp_norm: f64,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=LAMBDA_MAX).contains(&self.lambda) {
            return Err(TrainError::InvalidConfig(format!(
                "lambda {} outside [0, {LAMBDA_MAX}]",
                self.lambda
            )));
        }
        if !(self.bpp_norm > 0.0 && self.bpp_norm.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "bpp_norm must be positive, got {}",
                self.bpp_norm
            )));
        }
        Ok(())
    }
}

/// `-(mean(distortions) + lambda * bpp / bpp_norm)`.
pub fn reward(bpp: f64, distortions: &[f64], cfg: &RewardConfig) -> f64 {
    let mean = if distortions.is_empty() {
        0.0
    } else {
        distortions.iter().sum::<f64>() / distortions.len() as f64
    };
    -(mean + cfg.lambda * bpp / cfg.bpp_norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_frame: f64,
    pub lr_ctu: f64,
    pub optimizer: OptimizerKind,
    pub entropy_coef: f64,
    /// Global gradient-norm cap per agent; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    /// λ values drawn per episode.
    pub lambdas: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 4,
            lr_frame: 1e-3,
            lr_ctu: 1e-4,
            optimizer: OptimizerKind::Adam,
            entropy_coef: 0.05,
            max_grad_norm: Some(5.0),
            seed: 0,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be positive".into());
        }
        for (name, v) in [("lr_frame", self.lr_frame), ("lr_ctu", self.lr_ctu)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad(format!("entropy_coef must be non-negative, got {}", self.entropy_coef));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return bad(format!("max_grad_norm must be positive, got {g}"));
            }
        }
        if self.lambdas.is_empty() {
            return bad("lambdas must not be empty".into());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=LAMBDA_MAX).contains(*l)) {
            return bad(format!("lambda {l} outside [0, {LAMBDA_MAX}]"));
        }
        Ok(())
    }
}

/// A sequence with everything the agents observe precomputed: the
/// segmenter's masks on the originals, CTU labels, and the frame-level
/// downsampled planes.
#[derive(Debug, Clone)]
pub struct PreparedSequence {
    pub seq: Sequence,
    pub masks: Vec<SemanticMask>,
    pub labels: Vec<CtuLabels>,
    frame_base: FrameStateBase,
}

impl PreparedSequence {
    pub fn new(seq: Sequence) -> Self {
        let masks: Vec<SemanticMask> = seq.frames().iter().map(segment).collect();
        let labels = masks.iter().map(default_ctu_labels).collect();
        let side = ArchConfig::frame_default().input_size;
        let frame_base = FrameStateBase::new(&seq.frames()[0], &masks[0], side);
        Self {
            seq,
            masks,
            labels,
            frame_base,
        }
    }

    pub fn id(&self) -> &str {
        self.seq.id()
    }

    pub fn frame_state(&self, lambda: f64) -> State {
        frame_state(&self.frame_base, lambda)
    }

    pub fn ctu_count(&self) -> usize {
        self.labels[0].len()
    }

    /// Observation of CTU `ctu` (raster index) in frame `t`.
    pub fn ctu_state(&self, t: usize, ctu: usize, frame_qp: i32) -> (State, CtuLabel) {
        let l = &self.labels[t];
        let (cx, cy) = (ctu % l.grid_w, ctu / l.grid_w);
        let label = l.labels[ctu];
        let s = ctu_state(
            &self.seq.frames()[t],
            &self.masks[t],
            cx,
            cy,
            CTU_SIZE,
            frame_qp,
            label,
            l.ratios[ctu],
        );
        (s, label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub sequence_id: String,
    pub lambda: f64,
    pub frame_decision: ActionDecision,
    pub qp_i: i32,
    pub frame_qps: Vec<i32>,
    /// Per frame, per CTU in raster order.
    pub ctu_decisions: Vec<Vec<ActionDecision>>,
    pub ctu_offsets: Vec<CtuOffsets>,
    pub stats: SequenceStats,
    pub distortions: Vec<f64>,
    pub reward: f64,
}

impl Episode {
    pub fn mean_distortion(&self) -> f64 {
        self.distortions.iter().sum::<f64>() / self.distortions.len() as f64
    }

    /// Mean mIOU of the reconstructions against the originals' masks.
    pub fn quality(&self) -> f64 {
        1.0 - self.mean_distortion()
    }
}

fn decide(
    net: &PolicyNet,
    state: &State,
    label: Option<CtuLabel>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<ActionDecision, PolicyError> {
    let (logits, value) = forward(net, state, label)?;
    let d = match mode {
        Mode::Sample => sample_action(&logits, rng)?,
        Mode::Greedy => greedy_action(&logits)?,
    };
    Ok(d.with_value(value))
}

/// One sequence, one scalar reward. The frame agent picks QP_I once, the
/// schedule expands it, and the CTU agent picks an offset for every CTU of
/// every frame before the sequence is encoded.
pub fn run_episode(
    prep: &PreparedSequence,
    frame_net: &PolicyNet,
    ctu_net: &PolicyNet,
    reward_cfg: &RewardConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Episode, TrainError> {
    reward_cfg.validate()?;
    let frame_decision = decide(frame_net, &prep.frame_state(reward_cfg.lambda), None, mode, rng)?;
    let qp_i = frame_action_to_qp(frame_decision.action);
    let frame_qps = frame_qp_schedule(qp_i, prep.seq.len())?;

    let mut ctu_decisions = Vec::with_capacity(prep.seq.len());
    let mut ctu_offsets = Vec::with_capacity(prep.seq.len());
    for (t, &fqp) in frame_qps.iter().enumerate() {
        let l = &prep.labels[t];
        let mut decisions = Vec::with_capacity(l.len());
        for c in 0..l.len() {
            let (s, label) = prep.ctu_state(t, c, fqp);
            decisions.push(decide(ctu_net, &s, Some(label), mode, rng)?);
        }
        ctu_offsets.push(CtuOffsets {
            grid_w: l.grid_w,
            grid_h: l.grid_h,
            offsets: decisions.iter().map(|d| ctu_action_to_offset(d.action)).collect(),
        });
        ctu_decisions.push(decisions);
    }

    let (_, recons, stats) = encode_sequence(&prep.seq, &frame_qps, &ctu_offsets)?;
    let distortions = recons
        .iter()
        .zip(&prep.masks)
        .map(|(r, m)| Ok(1.0 - miou(&segment(r), m)?))
        .collect::<Result<Vec<f64>, SemanticsError>>()?;
    let reward = reward(stats.bpp, &distortions, reward_cfg);
    Ok(Episode {
        sequence_id: prep.id().to_string(),
        lambda: reward_cfg.lambda,
        frame_decision,
        qp_i,
        frame_qps,
        ctu_decisions,
        ctu_offsets,
        stats,
        distortions,
        reward,
    })
}

/// One decision to learn from.
pub struct Transition {
    pub state: State,
    pub label: Option<CtuLabel>,
    pub action: usize,
    /// Critic estimate recorded when the action was taken.
    pub value: f64,
}

/// Averaged loss components of one agent update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentUpdate {
    pub loss: LossParts,
    pub grad_norm: f64,
}

/// A2C update of one agent over a batch of episodes. Episode `e` has
/// `counts[e]` transitions, all sharing the return `targets[e]`; their loss
/// terms are averaged within the episode, then across the batch, and one
/// optimizer step is taken on the masked tensors.
#[allow(clippy::too_many_arguments)]
pub fn update_agent(
    net: &mut PolicyNet,
    opt: &mut AgentOptimizer,
    mask: &TrainableMask,
    lr: f64,
    entropy_coef: f64,
    max_grad_norm: Option<f64>,
    targets: &[f64],
    counts: &[usize],
    mut transition: impl FnMut(usize, usize) -> Transition,
) -> Result<AgentUpdate, TrainError> {
    let batch: Vec<usize> = (0..targets.len()).filter(|&e| counts[e] > 0).collect();
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut grads = net.zeros_like();
    let mut total = LossParts::default();
    for &e in &batch {
        let w = 1.0 / (counts[e] * batch.len()) as f64;
        for i in 0..counts[e] {
            let tr = transition(e, i);
            let inputs = LossInputs {
                action: tr.action,
                advantage: targets[e] - tr.value,
                value_target: targets[e],
                entropy_coef,
            };
            let parts = accumulate_gradients(net, &tr.state, tr.label, inputs, mask, w, &mut grads)
                .map_err(|err| match err {
                    PolicyError::NonFinite(what) => TrainError::NonFinite(format!(
                        "{what} in episode {e}, transition {i}: target {}, value {}, action {}",
                        targets[e], tr.value, tr.action
                    )),
                    other => other.into(),
                })?;
            total.actor += w * parts.actor;
            total.critic += w * parts.critic;
            total.entropy += w * parts.entropy;
            total.total += w * parts.total;
        }
    }
    let norm = grad_norm(&grads, mask);
    if !norm.is_finite() {
        return Err(TrainError::NonFinite(format!("gradient norm {norm}, loss {total:?}")));
    }
    let scale = match max_grad_norm {
        Some(cap) if norm > cap => cap / norm,
        _ => 1.0,
    };
    opt.step(net, &grads, mask, lr, scale);
    Ok(AgentUpdate {
        loss: total,
        grad_norm: norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentMasks {
    pub frame: TrainableMask,
    pub ctu: TrainableMask,
}

impl AgentMasks {
    pub fn from_groups(frame: &PolicyNet, ctu: &PolicyNet, groups: &[Group]) -> Self {
        Self {
            frame: trainable_mask(frame, groups),
            ctu: trainable_mask(ctu, groups),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub frame: AgentUpdate,
    pub ctu: AgentUpdate,
}

/// Updates both agents from a batch of sampled episodes, each episode's
/// return being its normalized reward. An agent whose mask
/// is empty is left untouched but its loss is still reported.
pub fn a2c_step(
    frame_net: &mut PolicyNet,
    ctu_net: &mut PolicyNet,
    batch: &[(&PreparedSequence, &Episode)],
    masks: &AgentMasks,
    cfg: &TrainConfig,
    norm: &RewardNormalizer,
    opt: &mut Optimizers,
) -> Result<StepReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let targets: Vec<f64> = batch
        .iter()
        .map(|(_, ep)| norm.target(ep.reward, ep.lambda))
        .collect::<Result<_, _>>()?;

    let frame = update_agent(
        frame_net,
        &mut opt.frame,
        &masks.frame,
        cfg.lr_frame,
        cfg.entropy_coef,
        cfg.max_grad_norm,
        &targets,
        &vec![1; batch.len()],
        |e, _| {
            let (prep, ep) = batch[e];
            Transition {
                state: prep.frame_state(ep.lambda),
                label: None,
                action: ep.frame_decision.action,
                value: ep.frame_decision.value,
            }
        },
    )?;

    let counts: Vec<usize> = batch
        .iter()
        .map(|(_, ep)| ep.ctu_decisions.iter().map(Vec::len).sum())
        .collect();
    let ctu = update_agent(
        ctu_net,
        &mut opt.ctu,
        &masks.ctu,
        cfg.lr_ctu,
        cfg.entropy_coef,
        cfg.max_grad_norm,
        &targets,
        &counts,
        |e, i| {
            let (prep, ep) = batch[e];
            let per_frame = prep.ctu_count();
            let (t, c) = (i / per_frame, i % per_frame);
            let (state, label) = prep.ctu_state(t, c, ep.frame_qps[t]);
            let d = ep.ctu_decisions[t][c];
            Transition {
                state,
                label: Some(label),
                action: d.action,
                value: d.value,
            }
        },
    )?;
    Ok(StepReport { frame, ctu })
}

/// Mean bpp over `seqs` at a flat QP with zero CTU offsets.
pub fn reference_bpp(seqs: &[PreparedSequence], qp: i32) -> Result<f64, TrainError> {
    if seqs.is_empty() {
        return Err(TrainError::CorpusTooSmall { needed: 1, got: 0 });
    }
    let mut sum = 0.0;
    for p in seqs {
        let n = p.seq.len();
        let (gw, gh) = p.seq.frames()[0].grid_dims();
        let offsets = vec![CtuOffsets::zeros(gw, gh); n];
        let (_, _, stats) = encode_sequence(&p.seq, &vec![qp; n], &offsets)?;
        sum += stats.bpp;
    }
    Ok(sum / seqs.len() as f64)
}

/// Per-λ standardization of rewards. Raw rewards at λ = 100 are three
/// orders of magnitude larger than at λ = 0; the learning target
/// `(reward - mean[λ]) / std[λ]` puts every λ on a unit scale without
/// changing which actions are better for that λ. Statistics come from
/// zero-offset encodes of the fitting set at each `NORMALIZER_QPS` QP_I.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub lambdas: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RewardNormalizer {
    pub fn fit(seqs: &[PreparedSequence], lambdas: &[f64], bpp_norm: f64) -> Result<Self, TrainError> {
        if seqs.is_empty() {
            return Err(TrainError::CorpusTooSmall { needed: 1, got: 0 });
        }
        let mut samples = Vec::with_capacity(seqs.len() * NORMALIZER_QPS.len());
        for p in seqs {
            let n = p.seq.len();
            let (gw, gh) = p.seq.frames()[0].grid_dims();
            let offsets = vec![CtuOffsets::zeros(gw, gh); n];
            for qp_i in NORMALIZER_QPS {
                let (_, recons, stats) = encode_sequence(&p.seq, &frame_qp_schedule(qp_i, n)?, &offsets)?;
                let distortions = recons
                    .iter()
                    .zip(&p.masks)
                    .map(|(r, m)| Ok(1.0 - miou(&segment(r), m)?))
                    .collect::<Result<Vec<f64>, SemanticsError>>()?;
                samples.push((stats.bpp, distortions));
            }
        }
        let mut out = Self {
            lambdas: Vec::with_capacity(lambdas.len()),
            mean: Vec::with_capacity(lambdas.len()),
            std: Vec::with_capacity(lambdas.len()),
        };
        for &lambda in lambdas {
            let rc = RewardConfig { lambda, bpp_norm };
            rc.validate()?;
            let r: Vec<f64> = samples.iter().map(|(b, d)| reward(*b, d, &rc)).collect();
            let m = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r.len() as f64;
            out.lambdas.push(lambda);
            out.mean.push(m);
            out.std.push(var.sqrt().max(MIN_REWARD_STD));
        }
        Ok(out)
    }

    pub fn target(&self, reward: f64, lambda: f64) -> Result<f64, TrainError> {
        let i = self
            .lambdas
            .iter()
            .position(|&l| l == lambda)
            .ok_or_else(|| TrainError::InvalidConfig(format!("no reward statistics for lambda {lambda}")))?;
        Ok((reward - self.mean[i]) / self.std[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub mean_bpp: f64,
    pub mean_distortion: f64,
}

pub const LOG_HEADER: &str = "iteration,mean_reward,actor_loss,critic_loss,entropy,mean_bpp,mean_distortion";

impl LogRow {
    /// Loss columns are summed over the frame and CTU agents.
    fn new(iteration: usize, episodes: &[Episode], step: &StepReport) -> Self {
        let n = episodes.len() as f64;
        Self {
            iteration,
            mean_reward: episodes.iter().map(|e| e.reward).sum::<f64>() / n,
            actor_loss: step.frame.loss.actor + step.ctu.loss.actor,
            critic_loss: step.frame.loss.critic + step.ctu.loss.critic,
            entropy: step.frame.loss.entropy + step.ctu.loss.entropy,
            mean_bpp: episodes.iter().map(|e| e.stats.bpp).sum::<f64>() / n,
            mean_distortion: episodes.iter().map(Episode::mean_distortion).sum::<f64>() / n,
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_reward,
            self.actor_loss,
            self.critic_loss,
            self.entropy,
            self.mean_bpp,
            self.mean_distortion
        )
    }
}

/// Runs `cfg.iterations` sampled-batch updates. `on_iteration` sees the
/// nets after each update and may stop training early by returning `false`.
pub fn train_loop(
    frame_net: &mut PolicyNet,
    ctu_net: &mut PolicyNet,
    train: &[PreparedSequence],
    masks: &AgentMasks,
    cfg: &TrainConfig,
    bpp_norm: f64,
    rng: &mut ChaCha8Rng,
    mut on_iteration: impl FnMut(&LogRow, &PolicyNet, &PolicyNet) -> Result<bool, TrainError>,
) -> Result<(), TrainError> {
    cfg.validate()?;
    let norm = RewardNormalizer::fit(train, &cfg.lambdas, bpp_norm)?;
    let mut opt = Optimizers::new(cfg.optimizer, frame_net, ctu_net);
    for it in 0..cfg.iterations {
        let mut episodes = Vec::with_capacity(cfg.batch_size);
        let mut picks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let prep = train.choose(rng).expect("non-empty");
            let lambda = *cfg.lambdas.choose(rng).expect("non-empty");
            let rc = RewardConfig { lambda, bpp_norm };
            episodes.push(run_episode(prep, frame_net, ctu_net, &rc, Mode::Sample, rng)?);
            picks.push(prep);
        }
        let batch: Vec<(&PreparedSequence, &Episode)> = picks.iter().copied().zip(&episodes).collect();
        let step = a2c_step(frame_net, ctu_net, &batch, masks, cfg, &norm, &mut opt)?;
        let row = LogRow::new(it, &episodes, &step);
        if !on_iteration(&row, frame_net, ctu_net)? {
            break;
        }
    }
    Ok(())
}

/// Trains both agents from scratch on a pretraining corpus, writing the CSV
/// log to `log` when given.
pub fn pretrain(
    corpus: &[PreparedSequence],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, Vec<LogRow>), TrainError> {
    cfg.validate()?;
    if corpus.len() < MIN_PRETRAIN_SEQUENCES {
        return Err(TrainError::CorpusTooSmall {
            needed: MIN_PRETRAIN_SEQUENCES,
            got: corpus.len(),
        });
    }
    let bpp_norm = reference_bpp(corpus, BPP_NORM_QP)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frame = PolicyNet::new(ArchConfig::frame_default(), &mut rng);
    let mut ctu = PolicyNet::new(ArchConfig::ctu_default(), &mut rng);
    let masks = AgentMasks::from_groups(&frame, &ctu, &Group::ALL);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut rows = Vec::with_capacity(cfg.iterations);
    train_loop(&mut frame, &mut ctu, corpus, &masks, cfg, bpp_norm, &mut rng, |row, _, _| {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", row.csv())?;
        }
        rows.push(row.clone());
        Ok(true)
    })?;
    Ok((
        Checkpoint {
            frame,
            ctu,
            seed: cfg.seed,
            bpp_norm,
        },
        rows,
    ))
}

/// Mean normalized greedy reward over every (sequence, λ) pair of
/// `norm`'s λ set, so each λ weighs equally.
pub fn greedy_reward(
    frame_net: &PolicyNet,
    ctu_net: &PolicyNet,
    seqs: &[PreparedSequence],
    norm: &RewardNormalizer,
    bpp_norm: f64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = 0.0;
    let mut n = 0usize;
    for prep in seqs {
        for &lambda in &norm.lambdas {
            let rc = RewardConfig { lambda, bpp_norm };
            let ep = run_episode(prep, frame_net, ctu_net, &rc, Mode::Greedy, &mut rng)?;
            sum += norm.target(ep.reward, lambda)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(sum / n as f64)
}
