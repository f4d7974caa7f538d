//! Run configuration: JSON file merged over defaults, then `key.path=value`
//! overrides. Keys must already exist in the default tree.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use smc_core::dataset::{Domain, PhantomConfig};
use smc_core::eval::{DEFAULT_ANCHOR_QPS, DEFAULT_QP_SPAN};
use smc_core::training::{TrainConfig, DEFAULT_LAMBDAS};
use smc_core::tuning::TuneConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Sizes that train in minutes on one core.
    Desk,
    /// 512x512, 33-frame phantoms.
    Full,
}

/// Per-field phantom overrides on top of the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomOverrides {
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub n_frames: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub n_vessels: Option<usize>,
    pub vessel_width_range: Option<(f64, f64)>,
    pub drift_px_per_frame: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub lambdas: Vec<f64>,
    pub anchor_qps: Vec<i32>,
    pub qp_span: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub phantom_a: PhantomOverrides,
    pub phantom_b: PhantomOverrides,
    pub train: TrainConfig,
    pub tune: TuneConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            phantom_a: PhantomOverrides::default(),
            phantom_b: PhantomOverrides::default(),
            train: TrainConfig::default(),
            tune: TuneConfig::default(),
            eval: EvalSettings {
                lambdas: DEFAULT_LAMBDAS.to_vec(),
                anchor_qps: DEFAULT_ANCHOR_QPS.to_vec(),
                qp_span: DEFAULT_QP_SPAN,
            },
        }
    }
}

impl RunConfig {
    pub fn phantom(&self, domain: Domain) -> PhantomConfig {
        let base = match self.preset {
            Preset::Desk => PhantomConfig::desk(domain),
            Preset::Full => PhantomConfig::defaults(domain),
        };
        let o = match domain {
            Domain::A => &self.phantom_a,
            Domain::B => &self.phantom_b,
        };
        PhantomConfig {
            width: o.width.unwrap_or(base.width),
            height: o.height.unwrap_or(base.height),
            n_frames: o.n_frames.unwrap_or(base.n_frames),
            noise_sigma: o.noise_sigma.unwrap_or(base.noise_sigma),
            n_vessels: o.n_vessels.unwrap_or(base.n_vessels),
            vessel_width_range: o.vessel_width_range.unwrap_or(base.vessel_width_range),
            drift_px_per_frame: o.drift_px_per_frame.unwrap_or(base.drift_px_per_frame),
            ..base
        }
    }

    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("serializable");
        if let Some(path) = file {
            let raw = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let user: Value = serde_json::from_str(&raw)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, user, "")?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override '{o}' is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::Config(e.to_string()))
    }
}

fn unknown(path: &str) -> CliError {
    CliError::Config(format!("unknown config key '{path}'"))
}

/// Objects merge key by key; anything else replaces. Null defaults (unset
/// optional fields) accept any value.
fn merge(dst: &mut Value, src: Value, prefix: &str) -> Result<(), CliError> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = d.get_mut(&k).ok_or_else(|| unknown(&path))?;
                if slot.is_null() {
                    *slot = v;
                } else {
                    merge(slot, v, &path)?;
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = node.as_object_mut().ok_or_else(|| unknown(key))?;
        let slot = obj.get_mut(*part).ok_or_else(|| unknown(key))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(unknown(key))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = RunConfig::load(
            None,
            &[
                "train.iterations=7".into(),
                "phantom_b.width=128".into(),
                "preset=full".into(),
                "tune.val_lambdas=[1,2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.phantom(Domain::B).width, 128);
        assert_eq!(c.phantom(Domain::B).height, 512);
        assert_eq!(c.tune.val_lambdas, vec![1.0, 2.0]);
        for bad in ["train.iters=3", "nope=1", "train.iterations.x=1"] {
            assert!(matches!(RunConfig::load(None, &[bad.into()]), Err(CliError::Config(_))), "{bad}");
        }
        assert!(matches!(RunConfig::load(None, &["noequals".into()]), Err(CliError::Usage(_))));
        assert!(RunConfig::load(None, &["train.iterations=\"x\"".into()]).is_err());
    }

    #[test]
    fn file_merge_rejects_unknown_nested_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"iterations": 3}, "eval": {"qp_span": 4}}"#).unwrap();
        let c = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!((c.train.iterations, c.eval.qp_span), (3, 4.0));
        assert_eq!(c.train.batch_size, 4);
        std::fs::write(&p, r#"{"train": {"iteration": 3}}"#).unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
    }
}
