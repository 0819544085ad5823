//! Binary model checkpoint: `BLCK`, u32 version, u64 header length, JSON header, f64 LE blob.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::autoencoder::{Autoencoder, AutoencoderSpec, PatchAutoencoder};
use super::params::{DenoiserConfig, DenoiserParams, ParamTensor, Partition};
use super::schedule::ScheduleSpec;
use super::vocab::{SlotValues, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MAGIC: &[u8; 4] = b"BLCK";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 16 << 20;
const MAX_VALUES: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Rectified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    #[serde(default)]
    pub variant: Option<String>,
    pub steps: usize,
    /// Hash of the parameters this checkpoint was fine-tuned from.
    #[serde(default)]
    pub base_hash: Option<String>,
    pub config_hash: String,
    #[serde(default)]
    pub rng: Option<RngState>,
    #[serde(default)]
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: DenoiserParams,
    pub vocab: Vocabulary,
    pub schedule: ScheduleSpec,
    pub autoencoder: Autoencoder,
    /// Learned slot vectors shipped with the model (the shared artifact-free vector).
    pub slots: SlotValues,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Denoiser,
    Autoencoder,
    Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    #[serde(default)]
    pub tag: Option<Partition>,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub autoencoder: AutoencoderSpec,
    pub vocab: Vocabulary,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut blob: Vec<f64> = Vec::with_capacity(self.params.count());
        let mut push = |name: &str, group: TensorGroup, tag: Option<Partition>, shape: Vec<usize>, vals: &mut dyn Iterator<Item = f64>| {
            let offset = blob.len();
            blob.extend(vals);
            entries.push(TensorEntry { name: name.to_string(), group, tag, shape, offset, len: blob.len() - offset });
        };
        for t in &self.params.tensors {
            push(&t.name, TensorGroup::Denoiser, Some(t.tag), t.value.shape().to_vec(), &mut t.value.iter().copied());
        }
        if let Autoencoder::Patch(p) = &self.autoencoder {
            let pl = p.patch_len();
            push("mean", TensorGroup::Autoencoder, None, vec![pl], &mut p.mean.iter().copied());
            push("basis", TensorGroup::Autoencoder, None, vec![pl, p.channels], &mut p.basis.iter().copied());
            push("scale", TensorGroup::Autoencoder, None, vec![p.channels], &mut p.scale.iter().copied());
        }
        for (name, v) in &self.slots {
            push(name, TensorGroup::Slot, None, vec![v.len()], &mut v.iter().copied());
        }
        let header = CheckpointHeader {
            config: self.params.config,
            schedule: self.schedule,
            autoencoder: self.autoencoder.spec(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + blob.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and fully validates a checkpoint.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if hlen > MAX_HEADER || hlen as usize > bytes.len() - 16 {
            return Err(bad("header length out of range"));
        }
        let hend = 16 + hlen as usize;
        let mut header: CheckpointHeader = serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(format!("header: {e}")))?;
        header.vocab.rebuild()?;
        let body = &bytes[hend..];
        if body.len() % 8 != 0 || body.len() / 8 > MAX_VALUES {
            return Err(bad("blob size is not a whole number of values"));
        }
        let blob: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if let Some(i) = blob.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite value at {i}")));
        }
        let mut next = 0usize;
        let mut take = |e: &TensorEntry| -> Result<Vec<f64>> {
            let n = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
            if e.offset != next || e.len != n || e.offset.checked_add(n).is_none_or(|end| end > blob.len()) {
                return Err(bad(format!("tensor {:?} has inconsistent extent", e.name)));
            }
            next += n;
            Ok(blob[e.offset..e.offset + n].to_vec())
        };
        header.config.validate()?;
        let mut tensors = Vec::new();
        let mut ae_parts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut slots = SlotValues::new();
        for e in &header.tensors {
            let vals = take(e)?;
            match e.group {
                TensorGroup::Denoiser => {
                    let tag = e.tag.ok_or_else(|| bad(format!("tensor {:?} lacks a partition tag", e.name)))?;
                    if e.shape.len() != 2 {
                        return Err(bad(format!("tensor {:?} is not a matrix", e.name)));
                    }
                    let value = Array2::from_shape_vec((e.shape[0], e.shape[1]), vals).map_err(|err| bad(err.to_string()))?;
                    tensors.push(ParamTensor { name: e.name.clone(), tag, value });
                }
                TensorGroup::Autoencoder => {
                    if ae_parts.insert(e.name.clone(), vals).is_some() {
                        return Err(bad(format!("duplicate autoencoder tensor {:?}", e.name)));
                    }
                }
                TensorGroup::Slot => {
                    if !header.vocab.has_slot(&e.name) {
                        return Err(Error::UnregisteredSlot(e.name.clone()));
                    }
                    if vals.len() != header.config.text_dim {
                        return Err(bad(format!("slot {:?} has wrong dimension", e.name)));
                    }
                    slots.insert(e.name.clone(), Array1::from(vals));
                }
            }
        }
        if next != blob.len() {
            return Err(bad("trailing values after the last tensor"));
        }
        let params = DenoiserParams::from_tensors(header.config, header.vocab.len(), tensors)?;
        let autoencoder = match header.autoencoder {
            AutoencoderSpec::Identity if ae_parts.is_empty() => Autoencoder::Identity,
            AutoencoderSpec::Patch { factor, channels } => {
                let pl = factor * factor * 3;
                let mut get = |k: &str, n: usize| match ae_parts.remove(k) {
                    Some(v) if v.len() == n => Ok(v),
                    _ => Err(bad(format!("autoencoder tensor {k:?} missing or mis-sized"))),
                };
                let ae = PatchAutoencoder {
                    factor,
                    channels,
                    mean: get("mean", pl)?,
                    basis: get("basis", pl * channels)?,
                    scale: get("scale", channels)?,
                };
                if factor == 0 || channels == 0 || channels > pl || !ae_parts.is_empty() {
                    return Err(bad("invalid autoencoder section"));
                }
                Autoencoder::Patch(ae)
            }
            AutoencoderSpec::Identity => return Err(bad("identity autoencoder carries tensors")),
        };
        if autoencoder.latent_channels() != header.config.latent_channels {
            return Err(bad("autoencoder and denoiser disagree on latent channels"));
        }
        header.schedule.build()?;
        Ok(Self { params, vocab: header.vocab, schedule: header.schedule, autoencoder, slots, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path).map_err(Error::at(path))?)
    }

    /// SHA-256 of the serialized bytes.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_checkpoint() -> ModelCheckpoint {
        let vocab = Vocabulary::toy();
        let cfg = DenoiserConfig { width: 4, inner_width: 4, attn_dim: 2, heads: 1, text_dim: 4, ..Default::default() };
        let params = DenoiserParams::init(cfg, vocab.len(), 3).unwrap();
        let mut slots = SlotValues::new();
        slots.insert("<phi>".into(), Array1::from(vec![0.1, -0.2, 0.3, 1e-300]));
        let ae = PatchAutoencoder {
            factor: 2,
            channels: 4,
            mean: vec![0.5; 12],
            basis: (0..48).map(|i| i as f64 / 48.0).collect(),
            scale: vec![1.0, 2.0, 3.0, 4.0],
        };
        ModelCheckpoint {
            params,
            vocab,
            schedule: ScheduleSpec::default(),
            autoencoder: Autoencoder::Patch(ae),
            slots,
            meta: CheckpointMeta {
                kind: CheckpointKind::Rectified,
                variant: Some("full".into()),
                steps: 7,
                base_hash: Some("abc".into()),
                config_hash: "def".into(),
                rng: None,
                losses: vec![0.5, 0.25],
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = tiny_checkpoint();
        let back = ModelCheckpoint::parse(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = tiny_checkpoint().to_bytes();
        assert!(ModelCheckpoint::parse(&bytes[..bytes.len() - 8]).is_err());
        assert!(ModelCheckpoint::parse(&bytes[..20]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(ModelCheckpoint::parse(&wrong).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(ModelCheckpoint::parse(&nan).is_err());
    }

    #[test]
    fn retagged_key_weights_are_rejected() {
        let ck = tiny_checkpoint();
        let bytes = ck.to_bytes();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        let tampered = header.replacen("\"name\":\"xattn1.k\",\"group\":\"denoiser\",\"tag\":\"key\"", "\"name\":\"xattn1.k\",\"group\":\"denoiser\",\"tag\":\"other\"", 1);
        assert_ne!(tampered, header);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + hlen..]);
        assert!(matches!(ModelCheckpoint::parse(&out), Err(Error::Partition(_))));
    }
}
