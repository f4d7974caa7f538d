//! Few-shot transfer: which parameter groups to tune, which adapters to
//! insert, K:10:10 splits, and the strategy comparison table.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{anchor_sweep, bd_metric, policy_sweep, EvalError, DEFAULT_ANCHOR_QPS};
use crate::policy::{ArchConfig, Checkpoint, Group, PolicyError, PolicyNet};
use crate::training::{
    greedy_reward, reference_bpp, train_loop, RewardNormalizer, AgentMasks, PreparedSequence, TrainConfig, TrainError,
    BPP_NORM_QP,
};

pub const VAL_SIZE: usize = 10;
pub const TEST_SIZE: usize = 10;
pub const ALLOWED_K: [usize; 3] = [1, 3, 5];
pub const SWEEP_CSV_HEADER: &str =
    "strategy,trainable_params,trainable_fraction,bd_rate_pct,bd_quality,val_reward,seed";

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("unknown strategy '{0}'; valid: {names}", names = TuningStrategy::names().join(", "))]
    UnknownStrategy(String),
    #[error("k must be one of {ALLOWED_K:?}, got {0}")]
    InvalidK(usize),
    #[error("corpus has {got} sequences, need at least {needed} for k={k}")]
    CorpusTooSmall { needed: usize, got: usize, k: usize },
    #[error("duplicate sequence id '{0}' in corpus")]
    DuplicateId(String),
    #[error("split references sequence '{0}' which is not in the corpus")]
    MissingSequence(String),
    #[error("invalid tuning config: {0}")]
    InvalidConfig(String),
    #[error("duplicate strategy '{0}'")]
    DuplicateStrategy(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("writing sweep table: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningStrategy {
    Pretrained,
    #[serde(rename = "tune-a2c")]
    TuneA2C,
    #[serde(rename = "tune-a2c-fc")]
    TuneA2CFc,
    TuneFull,
    TuneAdapterV1,
    #[serde(rename = "tune-adapter-v1-a2c")]
    TuneAdapterV1A2C,
    TuneAdapter,
    TuneAdapterCritic,
}

impl TuningStrategy {
    pub const ALL: [TuningStrategy; 8] = [
        TuningStrategy::Pretrained,
        TuningStrategy::TuneA2C,
        TuningStrategy::TuneA2CFc,
        TuningStrategy::TuneFull,
        TuningStrategy::TuneAdapterV1,
        TuningStrategy::TuneAdapterV1A2C,
        TuningStrategy::TuneAdapter,
        TuningStrategy::TuneAdapterCritic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TuningStrategy::Pretrained => "pretrained",
            TuningStrategy::TuneA2C => "tune-a2c",
            TuningStrategy::TuneA2CFc => "tune-a2c-fc",
            TuningStrategy::TuneFull => "tune-full",
            TuningStrategy::TuneAdapterV1 => "tune-adapter-v1",
            TuningStrategy::TuneAdapterV1A2C => "tune-adapter-v1-a2c",
            TuningStrategy::TuneAdapter => "tune-adapter",
            TuningStrategy::TuneAdapterCritic => "tune-adapter-critic",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|s| s.name()).collect()
    }

    pub fn trainable_groups(self) -> Vec<Group> {
        use Group::*;
        match self {
            TuningStrategy::Pretrained => vec![],
            TuningStrategy::TuneA2C => vec![Actor, Critic],
            TuningStrategy::TuneA2CFc => vec![Actor, Critic, Fc],
            TuningStrategy::TuneFull => Group::ALL.into_iter().filter(|g| !g.is_adapter()).collect(),
            TuningStrategy::TuneAdapterV1 => vec![AdapterV1],
            TuningStrategy::TuneAdapterV1A2C => vec![AdapterV1, Actor, Critic],
            TuningStrategy::TuneAdapter => vec![AdapterA, AdapterC],
            TuningStrategy::TuneAdapterCritic => vec![AdapterA, Critic],
        }
    }

    /// Adapters to insert as `(v1, actor, critic)`.
    pub fn adapters(self) -> (bool, bool, bool) {
        match self {
            TuningStrategy::TuneAdapterV1 | TuningStrategy::TuneAdapterV1A2C => (true, false, false),
            TuningStrategy::TuneAdapter => (false, true, true),
            TuningStrategy::TuneAdapterCritic => (false, true, false),
            _ => (false, false, false),
        }
    }

    /// Inserts this strategy's adapters (identity at insertion) into a net.
    pub fn prepare(self, net: &mut PolicyNet, rng: &mut ChaCha8Rng) {
        let (v1, a, c) = self.adapters();
        if v1 {
            net.insert_adapter_v1(rng);
        }
        if a {
            net.insert_adapter_actor(rng);
        }
        if c {
            net.insert_adapter_critic(rng);
        }
    }
}

impl fmt::Display for TuningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TuningStrategy {
    type Err = TuneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TuneError::UnknownStrategy(s.to_string()))
    }
}

/// Sequence ids of a K:10:10 split. Serialized as the split manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSplit {
    pub k: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle of `ids`, then the first `k` train, next 10 validation,
/// next 10 test.
pub fn make_split(ids: &[String], k: usize, seed: u64) -> Result<FewShotSplit, TuneError> {
    if !ALLOWED_K.contains(&k) {
        return Err(TuneError::InvalidK(k));
    }
    let needed = k + VAL_SIZE + TEST_SIZE;
    if ids.len() < needed {
        return Err(TuneError::CorpusTooSmall {
            needed,
            got: ids.len(),
            k,
        });
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(TuneError::DuplicateId(w[0].clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let val_end = k + VAL_SIZE;
    Ok(FewShotSplit {
        k,
        seed,
        train: sorted[..k].to_vec(),
        val: sorted[k..val_end].to_vec(),
        test: sorted[val_end..needed].to_vec(),
    })
}

/// The three sets of a split resolved against a loaded corpus.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<PreparedSequence>,
    pub val: Vec<PreparedSequence>,
    pub test: Vec<PreparedSequence>,
}

impl FewShotSplit {
    pub fn resolve(&self, corpus: &[PreparedSequence]) -> Result<SplitData, TuneError> {
        let pick = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    corpus
                        .iter()
                        .find(|p| p.id() == id)
                        .cloned()
                        .ok_or_else(|| TuneError::MissingSequence(id.clone()))
                })
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(SplitData {
            train: pick(&self.train)?,
            val: pick(&self.val)?,
            test: pick(&self.test)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    /// `batch_size` is ignored: tuning uses a batch of K.
    pub train: TrainConfig,
    /// Validate every this many iterations (and at iteration 0).
    pub eval_every: usize,
    pub val_lambdas: Vec<f64>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eval_every: 50,
            val_lambdas: vec![0.0, 0.003, 0.03, 0.3, 10.0],
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<(), TuneError> {
        self.train.validate()?;
        if self.eval_every == 0 {
            return Err(TuneError::InvalidConfig("eval_every must be positive".into()));
        }
        if self.val_lambdas.is_empty() {
            return Err(TuneError::InvalidConfig("val_lambdas must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub strategy: TuningStrategy,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
    pub bpp_norm: f64,
    /// `(iterations completed, validation reward)`, starting at 0.
    pub val_history: Vec<(usize, f64)>,
    pub best_iteration: usize,
    pub best_val_reward: f64,
    pub seed: u64,
}

/// Tunes both agents with one strategy on `data.train`, batch size K, and
/// returns the nets from the validation-best evaluation point. Pretrained
/// returns the input checkpoint unchanged.
pub fn tune(
    ck: &Checkpoint,
    strategy: TuningStrategy,
    data: &SplitData,
    cfg: &TuneConfig,
) -> Result<(Checkpoint, TuneReport), TuneError> {
    cfg.validate()?;
    ck.ensure_arch(&ArchConfig::frame_default(), &ArchConfig::ctu_default())?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::EmptyBatch.into());
    }
    let seed = cfg.train.seed;
    let bpp_norm = reference_bpp(&data.train, BPP_NORM_QP)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frame = ck.frame.clone();
    let mut ctu = ck.ctu.clone();
    strategy.prepare(&mut frame, &mut rng);
    strategy.prepare(&mut ctu, &mut rng);
    let masks = AgentMasks::from_groups(&frame, &ctu, &strategy.trainable_groups());
    let trainable_params = masks.frame.trainable_count(&frame) + masks.ctu.trainable_count(&ctu);
    let total_params = frame.param_count() + ctu.param_count();

    let val_norm = RewardNormalizer::fit(&data.val, &cfg.val_lambdas, bpp_norm)?;
    let validate = |f: &PolicyNet, c: &PolicyNet| greedy_reward(f, c, &data.val, &val_norm, bpp_norm);
    let initial = validate(&frame, &ctu)?;
    let mut report = TuneReport {
        strategy,
        trainable_params,
        total_params,
        trainable_fraction: trainable_params as f64 / total_params as f64,
        bpp_norm,
        val_history: vec![(0, initial)],
        best_iteration: 0,
        best_val_reward: initial,
        seed,
    };
    if strategy == TuningStrategy::Pretrained {
        return Ok((ck.clone(), report));
    }

    let mut best = (frame.clone(), ctu.clone());
    let train_cfg = TrainConfig {
        batch_size: data.train.len(),
        ..cfg.train.clone()
    };
    let mut iteration = 0;
    train_loop(&mut frame, &mut ctu, &data.train, &masks, &train_cfg, bpp_norm, &mut rng, |_, f, c| {
        iteration += 1;
        if iteration % cfg.eval_every == 0 || iteration == train_cfg.iterations {
            let r = validate(f, c)?;
            report.val_history.push((iteration, r));
            if r > report.best_val_reward {
                report.best_val_reward = r;
                report.best_iteration = iteration;
                best = (f.clone(), c.clone());
            }
        }
        Ok(true)
    })?;
    let (frame, ctu) = best;
    Ok((
        Checkpoint {
            frame,
            ctu,
            seed,
            bpp_norm,
        },
        report,
    ))
}

/// Test-set evaluation settings for the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub tune: TuneConfig,
    pub lambdas: Vec<f64>,
    pub anchor_qps: Vec<i32>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            tune: TuneConfig::default(),
            lambdas: crate::training::DEFAULT_LAMBDAS.to_vec(),
            anchor_qps: DEFAULT_ANCHOR_QPS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: TuningStrategy,
    pub trainable_params: usize,
    pub trainable_fraction: f64,
    /// `None` when the test-set curve has too few distinct points or does
    /// not overlap the anchor.
    pub bd_rate_pct: Option<f64>,
    pub bd_quality: Option<f64>,
    pub val_reward: f64,
    pub seed: u64,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.strategy,
            self.trainable_params,
            self.trainable_fraction,
            opt(self.bd_rate_pct),
            opt(self.bd_quality),
            self.val_reward,
            self.seed
        )
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

/// Tunes each strategy, sweeps λ on the test set and compares against the
/// flat-QP anchor. Rows are sorted by BD-rate, best first; rows without a
/// BD value go last in input order.
pub fn strategy_sweep(
    ck: &Checkpoint,
    strategies: &[TuningStrategy],
    data: &SplitData,
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>, TuneError> {
    for (i, s) in strategies.iter().enumerate() {
        if strategies[..i].contains(s) {
            return Err(TuneError::DuplicateStrategy(s.to_string()));
        }
    }
    let anchor = anchor_sweep(&data.test, &cfg.anchor_qps)?;
    let mut rows = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let (tuned, report) = tune(ck, s, data, &cfg.tune)?;
        let curve = policy_sweep(&tuned, &data.test, &cfg.lambdas)?;
        let bd = match bd_metric(&anchor, &curve) {
            Ok(b) => Some(b),
            Err(EvalError::InsufficientPoints { .. } | EvalError::EmptyOverlap(_)) => None,
            Err(e) => return Err(e.into()),
        };
        rows.push(SweepRow {
            strategy: s,
            trainable_params: report.trainable_params,
            trainable_fraction: report.trainable_fraction,
            bd_rate_pct: bd.map(|b| b.bd_rate),
            bd_quality: bd.map(|b| b.bd_quality),
            val_reward: report.best_val_reward,
            seed: report.seed,
        });
    }
    rows.sort_by(|a, b| match (a.bd_rate_pct, b.bd_rate_pct) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests;
