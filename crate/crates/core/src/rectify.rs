//! Rectification training: fine-tune cross-attention weights and a shared
//! artifact-free vector so blemished embeddings reproduce clean images.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::diffusion::loss::{batch_loss, Example};
use crate::diffusion::optim::{clip_grads, grad_norm, Optimizer, OptimizerKind, Trainable};
use crate::diffusion::sample::{sample, SampleConfig};
use crate::diffusion::text::{self, padded};
use crate::diffusion::{
    CheckpointKind, CheckpointMeta, GradRequest, ModelCheckpoint, NoiseSchedule, Partition, SlotValues, Token, Vocabulary, PHI_SLOT,
    SUBJECT_SLOT,
};
use crate::digest::json_hash;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::inversion::{invert_subset, EmbeddingBank, InversionConfig, LearnedEmbedding, Provenance};
use crate::rng::{self, Rng, RngState};
use crate::{dataset::SubjectSet, seed};

/// Something a variant may train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTag {
    Key,
    Value,
    Query,
    Phi,
}

/// The four constructible training configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Keys, values and the artifact-free vector.
    Full,
    /// Only the artifact-free vector.
    PhiOnly,
    /// Queries and the artifact-free vector.
    QueryPhi,
    /// Keys and values, no artifact-free vector in the prompt.
    KvOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::PhiOnly, Variant::QueryPhi, Variant::KvOnly];

    pub fn tags(self) -> BTreeSet<TrainTag> {
        use TrainTag::*;
        match self {
            Variant::Full => [Key, Value, Phi].into(),
            Variant::PhiOnly => [Phi].into(),
            Variant::QueryPhi => [Query, Phi].into(),
            Variant::KvOnly => [Key, Value].into(),
        }
    }

    pub fn uses_phi(self) -> bool {
        self.tags().contains(&TrainTag::Phi)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PhiOnly => "phi_only",
            Variant::QueryPhi => "query_phi",
            Variant::KvOnly => "kv_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Tag set of a variant, resolved against a parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainablePartition {
    pub variant: Variant,
    pub tags: BTreeSet<TrainTag>,
}

impl TrainablePartition {
    /// Accepts exactly the tag sets of the four variants.
    pub fn from_tags(tags: &BTreeSet<TrainTag>) -> Result<Self> {
        let variant = Variant::ALL
            .into_iter()
            .find(|v| v.tags() == *tags)
            .ok_or_else(|| Error::Partition(format!("tag set {tags:?} matches no variant")))?;
        Ok(Self { variant, tags: tags.clone() })
    }

    pub fn of(variant: Variant) -> Self {
        Self { variant, tags: variant.tags() }
    }

    pub fn partitions(&self) -> Vec<Partition> {
        self.tags
            .iter()
            .filter_map(|t| match t {
                TrainTag::Key => Some(Partition::Key),
                TrainTag::Value => Some(Partition::Value),
                TrainTag::Query => Some(Partition::Query),
                TrainTag::Phi => None,
            })
            .collect()
    }

    pub fn grad_request(&self) -> GradRequest {
        let mut req = GradRequest { partitions: [false; 4], slots: self.tags.contains(&TrainTag::Phi) };
        for p in self.partitions() {
            req.partitions[p.index()] = true;
        }
        req
    }

    pub fn trainable(&self, ckpt: &ModelCheckpoint, lr_weights: f64, lr_phi: f64) -> Trainable {
        let mut tensors: Vec<(usize, f64)> = self.partitions().into_iter().flat_map(|p| ckpt.params.ids_with(p)).map(|i| (i, lr_weights)).collect();
        tensors.sort_by_key(|(i, _)| *i);
        let slots = if self.tags.contains(&TrainTag::Phi) { vec![(PHI_SLOT.to_string(), lr_phi)] } else { vec![] };
        Trainable { tensors, slots }
    }
}

/// Padded tokens of a prompt template; drops the artifact-free slot when `use_phi` is false.
pub fn prompt_tokens(vocab: &Vocabulary, template: &str, use_phi: bool, seq_len: usize) -> Result<Vec<Token>> {
    let words: Vec<&str> = template.split_whitespace().filter(|w| use_phi || *w != PHI_SLOT).collect();
    let toks = words.iter().map(|w| vocab.token(w)).collect::<Result<Vec<_>>>()?;
    vocab.check(&toks)?;
    padded(&toks, seq_len, vocab.pad_id())
}

/// `[a, <phi>, photo, of, <v>]`, or `[a, photo, of, <v>]` without the artifact-free vector.
pub fn compose_prompt(vocab: &Vocabulary, v: &LearnedEmbedding, phi: Option<&LearnedEmbedding>) -> Result<Vec<Token>> {
    let mut words = vec!["a"];
    if let Some(phi) = phi {
        words.push(&phi.slot);
    }
    words.extend(["photo", "of", &v.slot]);
    for s in std::iter::once(&v.slot).chain(phi.map(|p| &p.slot)) {
        if !vocab.has_slot(s) {
            return Err(Error::UnregisteredSlot(s.clone()));
        }
    }
    words.into_iter().map(|w| vocab.token(w)).collect()
}

/// One draw of (clean image, blemished embedding).
#[derive(Debug, Clone, Copy)]
pub struct TrainingInstance<'a> {
    pub subject_index: usize,
    pub image_index: usize,
    pub artifact_index: usize,
    pub image: &'a ImageTensor,
    pub embedding: &'a LearnedEmbedding,
}

/// Uniform over all clean images `(i, j)`, then uniform over artifacts `k`.
pub fn sample_training_instance<'a>(dataset: &'a PairedDataset, bank: &'a EmbeddingBank, rng: &mut Rng) -> Result<TrainingInstance<'a>> {
    let total: usize = dataset.subjects.iter().map(SubjectSet::len).sum();
    if total == 0 || dataset.artifacts.is_empty() {
        return Err(Error::Empty("rectification dataset"));
    }
    let mut flat = rng.gen_range(0..total);
    let k = rng.gen_range(0..dataset.artifacts.len());
    let mut i = 0;
    while flat >= dataset.subjects[i].len() {
        flat -= dataset.subjects[i].len();
        i += 1;
    }
    let subject = &dataset.subjects[i];
    let embedding = bank.get(&subject.subject_id, &dataset.artifacts[k].artifact_id)?;
    Ok(TrainingInstance { subject_index: i, image_index: flat, artifact_index: k, image: &subject.images[flat], embedding })
}

fn slots_for(v: &LearnedEmbedding, phi: Option<&Array1<f64>>) -> SlotValues {
    let mut s = SlotValues::new();
    s.insert(v.slot.clone(), v.vector.clone());
    if let Some(p) = phi {
        s.insert(PHI_SLOT.into(), p.clone());
    }
    s
}

/// Noise-prediction loss of the clean image under the composed prompt.
pub fn artifade_loss(
    ckpt: &ModelCheckpoint,
    clean_image: &ImageTensor,
    v: &LearnedEmbedding,
    phi: Option<&LearnedEmbedding>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let z0 = ckpt.autoencoder.encode(clean_image)?;
    let tokens = padded(&compose_prompt(&ckpt.vocab, v, phi)?, ckpt.params.config.seq_len, ckpt.vocab.pad_id())?;
    let slots = slots_for(v, phi.map(|p| &p.vector));
    let (loss, _) = batch_loss(&ckpt.params, sched, &[Example { z0: &z0, tokens: &tokens, slots: &slots }], None, rng)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RectifyConfig {
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_phi: f64,
    pub lr_weights: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Base word whose row, plus seeded noise, initializes the artifact-free vector.
    pub phi_init_word: String,
    pub phi_init_noise: f64,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            steps: 2000,
            batch_size: 8,
            lr_phi: 5e-3,
            lr_weights: 3e-5,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            clip_norm: None,
            phi_init_word: "photo".into(),
            phi_init_noise: 0.01,
        }
    }
}

impl RectifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("rectification needs steps > 0 and batch_size > 0".into()));
        }
        let tags = self.variant.tags();
        let weights = tags.iter().any(|t| *t != TrainTag::Phi);
        if weights && !(self.lr_weights > 0.0) {
            return Err(Error::Config("lr_weights must be positive for this variant".into()));
        }
        if tags.contains(&TrainTag::Phi) && !(self.lr_phi > 0.0) {
            return Err(Error::Config("lr_phi must be positive for this variant".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyOutcome {
    pub checkpoint: ModelCheckpoint,
    pub phi: Option<LearnedEmbedding>,
    pub losses: Vec<f64>,
}

/// Initial artifact-free vector.
pub fn init_phi(base: &ModelCheckpoint, cfg: &RectifyConfig) -> Result<Array1<f64>> {
    let row = crate::inversion::init_vector(base, &cfg.phi_init_word)?;
    let mut r = rng::stream(seed!(cfg.seed, "phi-init"));
    Ok(row + &Array1::from(rng::normals(&mut r, base.params.config.text_dim)).mapv(|v| v * cfg.phi_init_noise))
}

/// Fine-tunes the variant's partition on `(dataset, bank)` starting from `base`.
///
/// `progress` receives `(step, loss)` after every step.
pub fn rectify_train(
    cfg: &RectifyConfig,
    base: &ModelCheckpoint,
    dataset: &PairedDataset,
    bank: &EmbeddingBank,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<RectifyOutcome> {
    cfg.validate()?;
    bank.check_complete(dataset)?;
    if !base.vocab.has_slot(PHI_SLOT) || !base.vocab.has_slot(SUBJECT_SLOT) {
        return Err(Error::UnregisteredSlot(PHI_SLOT.into()));
    }
    let part = TrainablePartition::of(cfg.variant);
    let use_phi = cfg.variant.uses_phi();
    let mut ckpt = base.clone();
    let trainable = part.trainable(&ckpt, cfg.lr_weights, cfg.lr_phi);
    let req = part.grad_request();
    let sched = ckpt.schedule.build()?;
    let mut phi = use_phi.then(|| init_phi(base, cfg)).transpose()?;
    let seq_len = ckpt.params.config.seq_len;
    let tokens = prompt_tokens(&ckpt.vocab, &format!("a {PHI_SLOT} photo of {SUBJECT_SLOT}"), use_phi, seq_len)?;
    let mut pick = rng::stream(seed!(cfg.seed, "pick"));
    let mut noise = rng::stream(seed!(cfg.seed, "noise"));
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = (0..cfg.batch_size).map(|_| sample_training_instance(dataset, bank, &mut pick)).collect::<Result<Vec<_>>>()?;
        let latents = draws.iter().map(|d| ckpt.autoencoder.encode(d.image)).collect::<Result<Vec<_>>>()?;
        let slot_sets: Vec<SlotValues> = draws.iter().map(|d| slots_for(d.embedding, phi.as_ref())).collect();
        let batch: Vec<Example> = latents.iter().zip(&slot_sets).map(|(z0, slots)| Example { z0, tokens: &tokens, slots }).collect();
        let (loss, grads) = batch_loss(&ckpt.params, &sched, &batch, Some(&req), &mut noise)?;
        let mut grads = grads.expect("gradients requested");
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("variant {}, gradient norm {:.3e}, previous loss {:?}", cfg.variant, grad_norm(&grads, &trainable), losses.last()),
            });
        }
        if let Some(c) = cfg.clip_norm {
            clip_grads(&mut grads, &trainable, c);
        }
        let mut slots = SlotValues::new();
        if let Some(p) = phi.take() {
            slots.insert(PHI_SLOT.into(), p);
        }
        opt.step(&mut ckpt.params, &mut slots, &grads, &trainable)?;
        phi = slots.remove(PHI_SLOT);
        losses.push(loss);
        progress(step, loss);
    }
    let phi_emb = phi.map(|vector| LearnedEmbedding {
        vector,
        slot: PHI_SLOT.into(),
        provenance: Provenance {
            subject_id: "*".into(),
            artifact_id: None,
            steps: cfg.steps,
            lr: cfg.lr_phi,
            seed: cfg.seed,
            prompt: format!("a {PHI_SLOT} photo of {SUBJECT_SLOT}"),
        },
    });
    ckpt.slots = SlotValues::new();
    if let Some(p) = &phi_emb {
        ckpt.slots.insert(PHI_SLOT.into(), p.vector.clone());
    }
    ckpt.meta = CheckpointMeta {
        kind: CheckpointKind::Rectified,
        variant: Some(cfg.variant.name().into()),
        steps: cfg.steps,
        base_hash: Some(base.params.hash()),
        config_hash: json_hash(cfg),
        rng: Some(RngState::capture(&noise)),
        losses: losses.clone(),
    };
    Ok(RectifyOutcome { checkpoint: ckpt, phi: phi_emb, losses })
}

/// Generation settings shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub sampler: SampleConfig,
    pub samples_per_prompt: usize,
    pub image_size: usize,
    /// Invert test subsets against the rectified model instead of the base.
    #[serde(default)]
    pub invert_on_rectified: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { sampler: SampleConfig::default(), samples_per_prompt: 4, image_size: 64, invert_on_rectified: false }
    }
}

/// Images generated for one prompt template.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptImages {
    pub template: String,
    pub images: Vec<ImageTensor>,
}

/// Samples every template with a given subject embedding.
///
/// `model` is the checkpoint to sample from; its stored artifact-free vector is
/// inserted when present, otherwise the slot is dropped from the prompt.
pub fn generate_with(model: &ModelCheckpoint, v: &LearnedEmbedding, templates: &[String], cfg: &GenerationConfig, seed: u64) -> Result<Vec<PromptImages>> {
    if cfg.samples_per_prompt == 0 {
        return Err(Error::Config("samples_per_prompt must be positive".into()));
    }
    let phi = model.slots.get(PHI_SLOT);
    let sched = model.schedule.build()?;
    let slots = slots_for(v, phi);
    templates
        .iter()
        .enumerate()
        .map(|(pi, template)| {
            let tokens = prompt_tokens(&model.vocab, template, phi.is_some(), model.params.config.seq_len)?;
            let y = text::encode(&model.params, &tokens, &slots)?;
            let images = (0..cfg.samples_per_prompt)
                .map(|k| sample(&model.params, &model.autoencoder, &y, &sched, &cfg.sampler, (cfg.image_size, cfg.image_size), seed!(seed, "sample", pi, k)))
                .collect::<Result<Vec<_>>>()?;
            Ok(PromptImages { template: template.clone(), images })
        })
        .collect()
}

/// Inverts a blemished test subset, then samples from `model`.
///
/// Inversion runs against `base` unless `cfg.invert_on_rectified` is set.
/// Pass the base checkpoint as `model` for plain blemished inversion.
#[allow(clippy::too_many_arguments)]
pub fn blemished_generation(
    test_subset: &SubjectSet,
    artifact_id: &str,
    base: &ModelCheckpoint,
    model: &ModelCheckpoint,
    templates: &[String],
    inversion: &InversionConfig,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<(LearnedEmbedding, Vec<PromptImages>)> {
    let invert_with = if cfg.invert_on_rectified { model } else { base };
    let (v, _) = invert_subset(invert_with, test_subset, Some(artifact_id), inversion, seed!(seed, "invert"))?;
    let images = generate_with(model, &v, templates, cfg, seed!(seed, "generate"))?;
    Ok((v, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_four_tag_sets_are_accepted() {
        use TrainTag::*;
        let all = [Key, Value, Query, Phi];
        let mut accepted = 0;
        for mask in 0u32..16 {
            let set: BTreeSet<TrainTag> = all.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, t)| *t).collect();
            match TrainablePartition::from_tags(&set) {
                Ok(p) => {
                    accepted += 1;
                    assert_eq!(p.variant.tags(), set);
                }
                Err(e) => assert!(matches!(e, Error::Partition(_))),
            }
        }
        assert_eq!(accepted, 4);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("var_a".parse::<Variant>().is_err());
    }

    #[test]
    fn prompt_composition() {
        let vocab = Vocabulary::toy();
        let e = |slot: &str| LearnedEmbedding {
            vector: Array1::zeros(2),
            slot: slot.into(),
            provenance: Provenance { subject_id: "s".into(), artifact_id: None, steps: 1, lr: 0.0, seed: 0, prompt: String::new() },
        };
        let (v, phi) = (e(SUBJECT_SLOT), e(PHI_SLOT));
        let full = compose_prompt(&vocab, &v, Some(&phi)).unwrap();
        let words = |toks: &[Token]| {
            toks.iter()
                .map(|t| match t {
                    Token::Base(i) => vocab.words()[*i].clone(),
                    Token::Slot(s) => s.clone(),
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        assert_eq!(words(&full), "a <phi> photo of <v>");
        assert_eq!(words(&compose_prompt(&vocab, &v, None).unwrap()), "a photo of <v>");
        assert!(matches!(compose_prompt(&vocab, &e("<zz>"), None), Err(Error::UnregisteredSlot(_))));
        let t = prompt_tokens(&vocab, "a <phi> photo of <v> on a table", false, 10).unwrap();
        assert_eq!(words(&t[..7]), "a photo of <v> on a table");
    }
}
