//! Binary checkpoint container.
//!
//! Layout: `b"SMCK"`, `u32` version, `u64` metadata length, UTF-8 JSON
//! metadata, then every tensor of the frame agent followed by every tensor
//! of the CTU agent as little-endian `f64`, in the order the metadata lists.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, Group, PolicyError, PolicyNet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentMeta {
    pub arch: ArchConfig,
    pub arch_hash: String,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Rate normalizer the agents were trained against.
    pub bpp_norm: f64,
    pub frame: AgentMeta,
    pub ctu: AgentMeta,
}

/// Frame-level and CTU-level agents plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub frame: PolicyNet,
    pub ctu: PolicyNet,
    pub seed: u64,
    pub bpp_norm: f64,
}

fn tensor_meta(net: &PolicyNet) -> Vec<TensorMeta> {
    net.tensors()
        .into_iter()
        .map(|t| TensorMeta {
            name: t.name.to_string(),
            group: t.group,
            shape: t.shape,
        })
        .collect()
}

fn structure_hash(arch: &ArchConfig, tensors: &[TensorMeta]) -> String {
    let canon = serde_json::to_vec(&(arch, tensors)).expect("structure serializes");
    hex::encode(Sha256::digest(&canon))
}

/// Hash of the network structure (architecture, adapters, tensor layout).
pub fn arch_hash(net: &PolicyNet) -> String {
    structure_hash(&net.arch, &tensor_meta(net))
}

fn agent_meta(net: &PolicyNet) -> AgentMeta {
    let tensors = tensor_meta(net);
    AgentMeta {
        arch_hash: structure_hash(&net.arch, &tensors),
        arch: net.arch.clone(),
        tensors,
    }
}

fn bad(msg: impl Into<String>) -> PolicyError {
    PolicyError::Checkpoint(msg.into())
}

fn rebuild(meta: &AgentMeta) -> Result<PolicyNet, PolicyError> {
    let found = structure_hash(&meta.arch, &meta.tensors);
    if found != meta.arch_hash {
        return Err(PolicyError::ArchMismatch {
            expected: meta.arch_hash.clone(),
            found,
        });
    }
    let has = |g: Group| meta.tensors.iter().any(|t| t.group == g);
    let net = PolicyNet::empty(
        meta.arch.clone(),
        has(Group::AdapterV1),
        has(Group::AdapterA),
        has(Group::AdapterC),
    );
    if tensor_meta(&net) != meta.tensors {
        return Err(bad("tensor list does not match the declared architecture"));
    }
    Ok(net)
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.seed,
            bpp_norm: self.bpp_norm,
            frame: agent_meta(&self.frame),
            ctu: agent_meta(&self.ctu),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.meta()).expect("metadata serializes");
        let n_params = self.frame.param_count() + self.ctu.param_count();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n_params);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for net in [&self.frame, &self.ctu] {
            for t in net.tensors() {
                for v in t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, PolicyError> {
        if data.len() < 16 || &data[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing SMCK magic"));
        }
        let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let json_len = u64::from_le_bytes(data[8..16].try_into().unwrap());
        let json_end = usize::try_from(json_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&e| e <= data.len())
            .ok_or_else(|| bad("metadata length exceeds file size"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&data[16..json_end])
            .map_err(|e| bad(format!("metadata: {e}")))?;
        let mut frame = rebuild(&meta.frame)?;
        let mut ctu = rebuild(&meta.ctu)?;
        let expected = 8 * (frame.param_count() + ctu.param_count());
        let body = &data[json_end..];
        if body.len() != expected {
            return Err(bad(format!(
                "tensor payload is {} bytes, expected {expected}",
                body.len()
            )));
        }
        let mut chunks = body.chunks_exact(8);
        for net in [&mut frame, &mut ctu] {
            for t in net.tensors_mut() {
                for v in t.data.iter_mut() {
                    *v = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
                }
            }
        }
        Ok(Self {
            frame,
            ctu,
            seed: meta.seed,
            bpp_norm: meta.bpp_norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let data = std::fs::read(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&data)
    }

    /// Fails unless both agents were built from the given base architectures
    /// (adapters may differ).
    pub fn ensure_arch(&self, frame: &ArchConfig, ctu: &ArchConfig) -> Result<(), PolicyError> {
        for (net, want) in [(&self.frame, frame), (&self.ctu, ctu)] {
            if &net.arch != want {
                let base = PolicyNet::empty(want.clone(), false, false, false);
                return Err(PolicyError::ArchMismatch {
                    expected: arch_hash(&base),
                    found: arch_hash(&PolicyNet::empty(net.arch.clone(), false, false, false)),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
