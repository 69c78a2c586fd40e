//! The `RPF1` single-file container for exported patchers and training
//! checkpoints.
//!
//! Layout: `RPF1`, a little-endian `u32` header length, a UTF-8 JSON header
//! (configs plus a tensor manifest of name, shape, dtype and byte offset),
//! the contiguous little-endian tensor payload, then a little-endian CRC-32
//! of every preceding byte.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::baselines::FixedPatcher;
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::nn::{AdamW, AdamWConfig};
use crate::partition::CompressionConfig;
use crate::policy::{PatchPolicy, PolicyConfig};
use crate::tensor::Matrix;
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"RPF1";
pub const VERSION_MAJOR: u32 = 1;
pub const VERSION_MINOR: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Patcher,
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// `u128` as a decimal string; JSON numbers cannot hold it.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerState {
    config: AdamWConfig,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainingState {
    backbone: BackboneConfig,
    train: TrainConfig,
    compression: CompressionConfig,
    patcher: Option<FixedPatcher>,
    policy_opt: OptimizerState,
    backbone_opt: OptimizerState,
    rng: RngState,
    step: u64,
    epoch: usize,
    backbone_frozen: bool,
    policy_frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    major: u32,
    minor: u32,
    kind: ContainerKind,
    policy: PolicyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingState>,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
}

/// Parsed container: header plus named tensors.
struct Container {
    header: Header,
    tensors: Vec<(String, Matrix)>,
}

fn encode(mut header: Header, tensors: &[(String, &Matrix)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    header.tensors = tensors
        .iter()
        .map(|(name, m)| {
            let offset = payload.len();
            for v in m.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            TensorEntry {
                name: name.clone(),
                shape: vec![m.rows(), m.cols()],
                dtype: Dtype::F64,
                offset,
            }
        })
        .collect();
    header.payload_len = payload.len();
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum);
    }
    let len = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    let json = body
        .get(8..8 + len)
        .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
    let version: serde_json::Value = serde_json::from_slice(json)?;
    let field = |k: &str| version.get(k).and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    let (major, minor) = (field("major"), field("minor"));
    if major != VERSION_MAJOR {
        return Err(Error::Version { major, minor });
    }
    let header: Header = serde_json::from_value(version)?;
    let payload = &body[8 + len..];
    if payload.len() != header.payload_len {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_len
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let (rows, cols) = match e.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(Error::Format(format!("tensor `{}` must be 1-d or 2-d", e.name))),
        };
        let w = e.dtype.width();
        let raw = payload
            .get(e.offset..e.offset + rows * cols * w)
            .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the payload", e.name)))?;
        let data = raw
            .chunks_exact(w)
            .map(|c| match e.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        tensors.push((e.name.clone(), Matrix::from_vec(rows, cols, data)));
    }
    Ok(Container { header, tensors })
}

/// Move tensors named `prefix + param` into `store`, checking names and shapes.
fn restore(store: &mut ParamStore, prefix: &str, tensors: &mut Vec<(String, Matrix)>) -> Result<()> {
    let names: Vec<String> = store.names().to_vec();
    for (name, slot) in names.iter().zip(store.values_mut()) {
        let key = format!("{prefix}{name}");
        let i = tensors
            .iter()
            .position(|(n, _)| *n == key)
            .ok_or_else(|| Error::Shape {
                name: key.clone(),
                expected: vec![slot.rows(), slot.cols()],
                found: vec![],
            })?;
        let (_, m) = tensors.swap_remove(i);
        if m.shape() != slot.shape() {
            return Err(Error::Shape {
                name: key,
                expected: vec![slot.rows(), slot.cols()],
                found: vec![m.rows(), m.cols()],
            });
        }
        *slot = m;
    }
    Ok(())
}

fn moments(prefix: &str, store: &ParamStore, opt: &AdamW) -> Vec<(String, Matrix)> {
    let (m, v) = opt.moments();
    store
        .names()
        .iter()
        .zip(m)
        .map(|(n, t)| (format!("{prefix}.m/{n}"), t.clone()))
        .chain(store.names().iter().zip(v).map(|(n, t)| (format!("{prefix}.v/{n}"), t.clone())))
        .collect()
}

fn restore_moments(
    prefix: &str,
    store: &ParamStore,
    state: &OptimizerState,
    tensors: &mut Vec<(String, Matrix)>,
) -> Result<AdamW> {
    let mut m = store.clone();
    restore(&mut m, &format!("{prefix}.m/"), tensors)?;
    let mut v = store.clone();
    restore(&mut v, &format!("{prefix}.v/"), tensors)?;
    Ok(AdamW::from_parts(state.config, m.values().to_vec(), v.values().to_vec(), state.steps))
}

/// A throwaway stream for building models whose weights are about to be
/// overwritten.
fn scratch_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn patcher_bytes(policy: &PatchPolicy) -> Result<Vec<u8>> {
    let header = Header {
        major: VERSION_MAJOR,
        minor: VERSION_MINOR,
        kind: ContainerKind::Patcher,
        policy: policy.config().clone(),
        training: None,
        tensors: Vec::new(),
        payload_len: 0,
    };
    let tensors: Vec<(String, &Matrix)> = policy.params().iter().map(|(n, m)| (n.to_string(), m)).collect();
    encode(header, &tensors)
}

/// Rebuild a policy from container bytes. Checkpoints are accepted too; only
/// their policy is read.
pub fn patcher_from_bytes(bytes: &[u8], frozen: bool) -> Result<PatchPolicy> {
    let Container { header, mut tensors } = decode(bytes)?;
    let mut policy = PatchPolicy::new(header.policy, &mut scratch_rng())?;
    let prefix = match header.kind {
        ContainerKind::Patcher => "",
        ContainerKind::Checkpoint => "policy/",
    };
    restore(policy.params_mut(), prefix, &mut tensors)?;
    policy.set_frozen(frozen);
    Ok(policy)
}

pub fn save_patcher(policy: &PatchPolicy, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, patcher_bytes(policy)?)?;
    Ok(())
}

/// With `frozen`, every later optimizer step on the policy fails with
/// [`Error::Frozen`].
pub fn load_patcher(path: impl AsRef<Path>, frozen: bool) -> Result<PatchPolicy> {
    patcher_from_bytes(&std::fs::read(path)?, frozen)
}

pub fn checkpoint_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let rng = &trainer.rng;
    let state = TrainingState {
        backbone: trainer.backbone.config().clone(),
        train: trainer.config.clone(),
        compression: trainer.compression.clone(),
        patcher: trainer.patcher.clone(),
        policy_opt: OptimizerState {
            config: trainer.policy_opt.config,
            steps: trainer.policy_opt.steps_taken(),
        },
        backbone_opt: OptimizerState {
            config: trainer.backbone_opt.config,
            steps: trainer.backbone_opt.steps_taken(),
        },
        rng: RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        },
        step: trainer.step,
        epoch: trainer.epoch,
        backbone_frozen: trainer.backbone.params().is_frozen(),
        policy_frozen: trainer.policy.is_frozen(),
    };
    let header = Header {
        major: VERSION_MAJOR,
        minor: VERSION_MINOR,
        kind: ContainerKind::Checkpoint,
        policy: trainer.policy.config().clone(),
        training: Some(state),
        tensors: Vec::new(),
        payload_len: 0,
    };
    let mut owned: Vec<(String, Matrix)> = Vec::new();
    owned.extend(trainer.policy.params().iter().map(|(n, m)| (format!("policy/{n}"), m.clone())));
    owned.extend(trainer.backbone.params().iter().map(|(n, m)| (format!("backbone/{n}"), m.clone())));
    owned.extend(moments("opt.policy", trainer.policy.params(), &trainer.policy_opt));
    owned.extend(moments("opt.backbone", trainer.backbone.params(), &trainer.backbone_opt));
    let refs: Vec<(String, &Matrix)> = owned.iter().map(|(n, m)| (n.clone(), m)).collect();
    encode(header, &refs)
}

/// Restore a trainer. Model configs come from the file; a caller expecting
/// a particular backbone can compare [`Trainer::backbone`]'s config.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let Container { header, mut tensors } = decode(bytes)?;
    let state = header
        .training
        .ok_or_else(|| Error::Format("container holds a patcher, not a checkpoint".into()))?;
    let mut policy = PatchPolicy::new(header.policy, &mut scratch_rng())?;
    restore(policy.params_mut(), "policy/", &mut tensors)?;
    let mut backbone = Backbone::new(state.backbone, &mut scratch_rng())?;
    restore(backbone.params_mut(), "backbone/", &mut tensors)?;
    let policy_opt = restore_moments("opt.policy", policy.params(), &state.policy_opt, &mut tensors)?;
    let backbone_opt = restore_moments("opt.backbone", backbone.params(), &state.backbone_opt, &mut tensors)?;
    policy.set_frozen(state.policy_frozen);
    backbone.params_mut().set_frozen(state.backbone_frozen);

    let mut trainer = Trainer::new(policy, backbone, state.train, state.compression)?;
    if let Some(p) = state.patcher {
        trainer = trainer.with_patcher(p);
    }
    let mut rng = ChaCha8Rng::from_seed(state.rng.seed);
    rng.set_stream(state.rng.stream);
    let word_pos: u128 = state
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Format("bad rng position".into()))?;
    rng.set_word_pos(word_pos);
    trainer.rng = rng;
    trainer.policy_opt = policy_opt;
    trainer.backbone_opt = backbone_opt;
    trainer.step = state.step;
    trainer.epoch = state.epoch;
    Ok(trainer)
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(trainer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Like [`load_checkpoint`], but fails with [`Error::Shape`] unless the stored
/// models match `policy` and `backbone` configs.
pub fn load_checkpoint_into(
    path: impl AsRef<Path>,
    policy: &PolicyConfig,
    backbone: &BackboneConfig,
) -> Result<Trainer> {
    let bytes = std::fs::read(path)?;
    let Container { mut tensors, .. } = decode(&bytes)?;
    let mut p = PatchPolicy::new(policy.clone(), &mut scratch_rng())?;
    restore(p.params_mut(), "policy/", &mut tensors)?;
    let mut b = Backbone::new(backbone.clone(), &mut scratch_rng())?;
    restore(b.params_mut(), "backbone/", &mut tensors)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyMode;

    fn tiny_policy(seed: u64) -> PatchPolicy {
        let cfg = PolicyConfig {
            d_patch: 8,
            depth: 1,
            heads: 2,
            num_levels: 1,
            mode: PolicyMode::Contextual,
            context_limit: 16,
            init_boundary_rate: None,
        };
        PatchPolicy::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn patcher_roundtrip_is_exact() {
        let p = tiny_policy(3);
        let bytes = patcher_bytes(&p).unwrap();
        assert_eq!(&bytes[..4], b"RPF1");
        let q = patcher_from_bytes(&bytes, true).unwrap();
        assert!(q.is_frozen());
        assert_eq!(q.params().values(), p.params().values());
        assert_eq!(patcher_bytes(&q).unwrap(), bytes);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        assert_eq!(p.forward(&x).unwrap().logits(), q.forward(&x).unwrap().logits());
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let bytes = patcher_bytes(&tiny_policy(1)).unwrap();
        assert!(matches!(patcher_from_bytes(&bytes[..bytes.len() - 9], false), Err(Error::Checksum)));
        assert!(matches!(patcher_from_bytes(&bytes[..2], false), Err(Error::BadMagic)));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(patcher_from_bytes(&flipped, false), Err(Error::Checksum)));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(patcher_from_bytes(&magic, false), Err(Error::BadMagic)));
    }

    #[test]
    fn unknown_major_is_rejected() {
        let p = tiny_policy(2);
        let header = Header {
            major: 2,
            minor: 0,
            kind: ContainerKind::Patcher,
            policy: p.config().clone(),
            training: None,
            tensors: Vec::new(),
            payload_len: 0,
        };
        let tensors: Vec<(String, &Matrix)> = p.params().iter().map(|(n, m)| (n.to_string(), m)).collect();
        let bytes = encode(header, &tensors).unwrap();
        assert!(matches!(patcher_from_bytes(&bytes, false), Err(Error::Version { major: 2, minor: 0 })));
    }

    #[test]
    fn f32_payloads_are_readable() {
        let p = tiny_policy(4);
        let bytes = patcher_bytes(&p).unwrap();
        let Container { mut header, tensors } = decode(&bytes).unwrap();
        let mut payload = Vec::new();
        for (e, (_, m)) in header.tensors.iter_mut().zip(&tensors) {
            e.dtype = Dtype::F32;
            e.offset = payload.len();
            for v in m.data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        header.payload_len = payload.len();
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        let q = patcher_from_bytes(&out, false).unwrap();
        for (a, b) in q.params().values().iter().zip(p.params().values()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}
