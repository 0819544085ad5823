//! Textual inversion: optimize one slot vector so the frozen model reconstructs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{PairedDataset, SubjectSet};
use crate::diffusion::loss::{batch_loss, ConditionalModel, Example};
use crate::diffusion::optim::{clip_grads, Optimizer, OptimizerKind, Trainable};
use crate::diffusion::text::padded;
use crate::diffusion::{GradRequest, LatentTensor, ModelCheckpoint, NoiseSchedule, SlotValues, Token, Vocabulary, SUBJECT_SLOT};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::{rng, seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Prompt containing the subject slot.
    pub prompt: String,
    /// Base word whose embedding row initializes the slot.
    pub init_word: String,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 5e-3,
            batch_size: 4,
            optimizer: OptimizerKind::sgd(),
            prompt: format!("a photo of {SUBJECT_SLOT}"),
            init_word: crate::corpus::COARSE_CLASS_WORD.into(),
            clip_norm: None,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("inversion steps must be positive".into()));
        }
        if self.batch_size == 0 || !(self.lr >= 0.0) {
            return Err(Error::Config("inversion needs batch_size > 0 and lr ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject_id: String,
    /// `None` for embeddings learned from clean images.
    pub artifact_id: Option<String>,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedEmbedding {
    pub vector: Array1<f64>,
    pub slot: String,
    pub provenance: Provenance,
}

/// Optimized vector plus the per-step training losses.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionOutcome {
    pub vector: Array1<f64>,
    pub losses: Vec<f64>,
}

/// Optimizes the vector of `slot` against a frozen model.
///
/// `tokens` must be padded and contain `slot`. The model is borrowed
/// immutably, so no parameter can change.
#[allow(clippy::too_many_arguments)]
pub fn textual_inversion<M: ConditionalModel>(
    model: &M,
    sched: &NoiseSchedule,
    tokens: &[Token],
    slot: &str,
    latents: &[LatentTensor],
    init: Array1<f64>,
    cfg: &InversionConfig,
    seed: u64,
) -> Result<InversionOutcome> {
    cfg.validate()?;
    if latents.is_empty() {
        return Err(Error::Empty("inversion subset"));
    }
    if !tokens.iter().any(|t| matches!(t, Token::Slot(s) if s == slot)) {
        return Err(Error::UnregisteredSlot(slot.to_string()));
    }
    let mut slots = SlotValues::new();
    slots.insert(slot.to_string(), init);
    let trainable = Trainable { tensors: vec![], slots: vec![(slot.to_string(), cfg.lr)] };
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut pick = rng::stream(seed!(seed, "pick"));
    let mut noise = rng::stream(seed!(seed, "noise"));
    let mut losses = Vec::with_capacity(cfg.steps);
    let req = GradRequest::slots_only();
    for step in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch_size)
            .map(|_| Example { z0: &latents[pick.gen_range(0..latents.len())], tokens, slots: &slots })
            .collect();
        let (loss, grads) = batch_loss(model, sched, &batch, Some(&req), &mut noise)?;
        drop(batch);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: format!("inversion of {slot}") });
        }
        let mut grads = grads.expect("gradients requested");
        if let Some(c) = cfg.clip_norm {
            clip_grads(&mut grads, &trainable, c);
        }
        opt.step_slots(&mut slots, &grads, &trainable)?;
        losses.push(loss);
    }
    Ok(InversionOutcome { vector: slots.remove(slot).expect("slot present"), losses })
}

/// Initial slot vector: the base embedding row of `word`.
pub fn init_vector(ckpt: &ModelCheckpoint, word: &str) -> Result<Array1<f64>> {
    let id = ckpt.vocab.word_id(word).ok_or_else(|| Error::UnknownToken(word.to_string()))?;
    Ok(ckpt.params.get("text.token").row(id).to_owned())
}

/// Padded token sequence for an inversion prompt.
pub fn prompt_tokens(vocab: &Vocabulary, prompt: &str, seq_len: usize) -> Result<Vec<Token>> {
    let toks = vocab.tokenize(prompt)?;
    vocab.check(&toks)?;
    padded(&toks, seq_len, vocab.pad_id())
}

/// Inverts one image subset against `ckpt` (which is never modified).
pub fn invert_subset(ckpt: &ModelCheckpoint, subset: &SubjectSet, artifact_id: Option<&str>, cfg: &InversionConfig, seed: u64) -> Result<(LearnedEmbedding, Vec<f64>)> {
    subset.validate()?;
    let tokens = prompt_tokens(&ckpt.vocab, &cfg.prompt, ckpt.params.config.seq_len)?;
    if !ckpt.vocab.has_slot(SUBJECT_SLOT) {
        return Err(Error::UnregisteredSlot(SUBJECT_SLOT.into()));
    }
    let latents = subset.images.iter().map(|im| ckpt.autoencoder.encode(im)).collect::<Result<Vec<_>>>()?;
    let sched = ckpt.schedule.build()?;
    let init = init_vector(ckpt, &cfg.init_word)?;
    let out = textual_inversion(&ckpt.params, &sched, &tokens, SUBJECT_SLOT, &latents, init, cfg, seed)?;
    let emb = LearnedEmbedding {
        vector: out.vector,
        slot: SUBJECT_SLOT.into(),
        provenance: Provenance {
            subject_id: subset.subject_id.clone(),
            artifact_id: artifact_id.map(str::to_string),
            steps: cfg.steps,
            lr: cfg.lr,
            seed,
            prompt: cfg.prompt.clone(),
        },
    };
    Ok((emb, out.losses))
}

/// Blemished embeddings keyed by `(subject_id, artifact_id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingBank {
    pub entries: BTreeMap<(String, String), LearnedEmbedding>,
}

/// Inverts every blemished subset of `dataset` with per-subset derived seeds.
pub fn build_embedding_bank(dataset: &PairedDataset, ckpt: &ModelCheckpoint, cfg: &InversionConfig, seed: u64, progress: &mut dyn FnMut(&str, &str, f64)) -> Result<EmbeddingBank> {
    let mut bank = EmbeddingBank::default();
    for subject in &dataset.subjects {
        for artifact in &dataset.artifacts {
            let subset = dataset.subset(&subject.subject_id, &artifact.artifact_id)?;
            let s = seed!(seed, "invert", &subject.subject_id, &artifact.artifact_id);
            let (emb, losses) = invert_subset(ckpt, subset, Some(&artifact.artifact_id), cfg, s)?;
            progress(&subject.subject_id, &artifact.artifact_id, losses.last().copied().unwrap_or(f64::NAN));
            bank.entries.insert((subject.subject_id.clone(), artifact.artifact_id.clone()), emb);
        }
    }
    Ok(bank)
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"BEMB";
const EMBEDDING_VERSION: u32 = 1;
const MAX_DIM: usize = 1 << 20;

impl LearnedEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// `BEMB`, u32 version, u32 dimension, f64 LE values.
    pub fn vector_bytes(&self) -> Vec<u8> {
        encode_vector(&self.vector)
    }

    pub fn sidecar(&self) -> EmbeddingSidecar {
        EmbeddingSidecar {
            slot: self.slot.clone(),
            dim: self.dim(),
            sha256: sha256_hex(&self.vector_bytes()),
            provenance: self.provenance.clone(),
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(Error::at(dir))?;
        let bin = dir.join(format!("{stem}.bin"));
        std::fs::write(&bin, self.vector_bytes()).map_err(Error::at(&bin))?;
        let side = dir.join(format!("{stem}.json"));
        std::fs::write(&side, serde_json::to_vec_pretty(&self.sidecar())?).map_err(Error::at(&side))?;
        Ok(bin)
    }

    /// Loads a vector file and its sidecar, checking the recorded hash.
    pub fn load(bin: &Path) -> Result<Self> {
        let bytes = std::fs::read(bin).map_err(Error::at(bin))?;
        let side_path = bin.with_extension("json");
        let side: EmbeddingSidecar = serde_json::from_slice(&std::fs::read(&side_path).map_err(Error::at(&side_path))?)?;
        if side.sha256 != sha256_hex(&bytes) {
            return Err(Error::format("embedding", format!("{} does not match its sidecar hash", bin.display())));
        }
        let vector = parse_vector(&bytes)?;
        if vector.len() != side.dim {
            return Err(Error::format("embedding", "dimension disagrees with sidecar"));
        }
        Ok(Self { vector, slot: side.slot, provenance: side.provenance })
    }
}

pub fn encode_vector(v: &Array1<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * v.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses an embedding vector file.
pub fn parse_vector(bytes: &[u8]) -> Result<Array1<f64>> {
    let bad = |r: &str| Error::format("embedding", r.to_string());
    if bytes.len() < 12 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(bad("missing magic"));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) != EMBEDDING_VERSION {
        return Err(bad("unsupported version"));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if dim == 0 || dim > MAX_DIM || bytes.len() != 12 + 8 * dim {
        return Err(bad("length disagrees with dimension"));
    }
    let v: Vec<f64> = bytes[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(bad("non-finite entry"));
    }
    Ok(Array1::from(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub slot: String,
    pub dim: usize,
    pub sha256: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankIndex {
    pub format_version: u32,
    pub dim: usize,
    pub entries: Vec<BankIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankIndexEntry {
    pub subject_id: String,
    pub artifact_id: String,
    pub file: String,
}

pub const BANK_INDEX: &str = "bank.json";

fn file_stem(subject: &str, artifact: &str) -> String {
    let clean = |s: &str| s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect::<String>();
    format!("{}__{}", clean(subject), clean(artifact))
}

impl EmbeddingBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, subject: &str, artifact: &str) -> Result<&LearnedEmbedding> {
        self.entries
            .get(&(subject.to_string(), artifact.to_string()))
            .ok_or_else(|| Error::IncompleteBank(format!("no embedding for ({subject}, {artifact})")))
    }

    /// Common dimension; errors on an empty or mixed bank.
    pub fn dim(&self) -> Result<usize> {
        let mut dims = self.entries.values().map(LearnedEmbedding::dim);
        let d = dims.next().ok_or(Error::Empty("embedding bank"))?;
        if dims.any(|x| x != d) {
            return Err(Error::IncompleteBank("embeddings differ in dimension".into()));
        }
        Ok(d)
    }

    /// Checks that every `(subject, artifact)` pair of `dataset` is present.
    pub fn check_complete(&self, dataset: &PairedDataset) -> Result<()> {
        for s in &dataset.subjects {
            for a in &dataset.artifacts {
                let e = self.get(&s.subject_id, &a.artifact_id)?;
                if e.provenance.subject_id != s.subject_id {
                    return Err(Error::IncompleteBank(format!("embedding for {} carries wrong subject", s.subject_id)));
                }
            }
        }
        self.dim().map(|_| ())
    }

    pub fn index(&self) -> Result<BankIndex> {
        Ok(BankIndex {
            format_version: 1,
            dim: self.dim()?,
            entries: self
                .entries
                .keys()
                .map(|(s, a)| BankIndexEntry { subject_id: s.clone(), artifact_id: a.clone(), file: format!("{}.bin", file_stem(s, a)) })
                .collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let index = self.index()?;
        for ((s, a), e) in &self.entries {
            e.save(dir, &file_stem(s, a))?;
        }
        let p = dir.join(BANK_INDEX);
        std::fs::write(&p, serde_json::to_vec_pretty(&index)?).map_err(Error::at(&p))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(BANK_INDEX);
        let index: BankIndex = serde_json::from_slice(&std::fs::read(&p).map_err(Error::at(&p))?)?;
        let mut bank = EmbeddingBank::default();
        for e in index.entries {
            if e.file.contains('/') || e.file.contains('\\') || e.file.starts_with('.') {
                return Err(Error::format("bank index", format!("illegal file name {:?}", e.file)));
            }
            let emb = LearnedEmbedding::load(&dir.join(&e.file))?;
            if emb.dim() != index.dim {
                return Err(Error::IncompleteBank("embedding dimension disagrees with index".into()));
            }
            bank.entries.insert((e.subject_id, e.artifact_id), emb);
        }
        Ok(bank)
    }
}
