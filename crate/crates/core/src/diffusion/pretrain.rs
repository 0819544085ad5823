//! Base-model pretraining on the captioned toy corpus.

use serde::{Deserialize, Serialize};

use super::autoencoder::{Autoencoder, AutoencoderSpec, PatchAutoencoder};
use super::checkpoint::{CheckpointKind, CheckpointMeta, ModelCheckpoint};
use super::loss::{batch_loss, Example};
use super::optim::{clip_grads, Optimizer, OptimizerKind, Trainable};
use super::params::{DenoiserConfig, DenoiserParams, GradRequest};
use super::schedule::ScheduleSpec;
use super::text::padded;
use super::vocab::{SlotValues, Vocabulary};
use crate::corpus::{sample_captioned, CorpusConfig};
use crate::digest::json_hash;
use crate::error::{Error, Result};
use crate::rng::{self, RngState};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay from `lr` down to `lr * final_lr_fraction`; 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub autoencoder: AutoencoderSpec,
    /// Corpus images used to fit the patch autoencoder.
    pub autoencoder_fit_images: usize,
    pub corpus: CorpusConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 3000,
            batch_size: 8,
            lr: 2e-3,
            final_lr_fraction: 1.0,
            optimizer: OptimizerKind::adam(),
            clip_norm: 1.0,
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleSpec::default(),
            autoencoder: AutoencoderSpec::default(),
            autoencoder_fit_images: 256,
            corpus: CorpusConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretraining needs steps > 0 and batch_size > 0".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("pretraining lr and clip_norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        self.denoiser.validate()?;
        self.schedule.build()?;
        let expected = match self.autoencoder {
            AutoencoderSpec::Identity => 3,
            AutoencoderSpec::Patch { channels, .. } => channels,
        };
        if expected != self.denoiser.latent_channels {
            return Err(Error::Config("denoiser latent_channels must match the autoencoder".into()));
        }
        Ok(())
    }
}

/// Fits the autoencoder described by `spec` on fresh corpus draws.
pub fn fit_autoencoder(spec: AutoencoderSpec, corpus: &CorpusConfig, n: usize, seed: u64) -> Result<Autoencoder> {
    match spec {
        AutoencoderSpec::Identity => Ok(Autoencoder::Identity),
        AutoencoderSpec::Patch { factor, channels } => {
            let mut r = rng::stream(seed!(seed, "autoencoder"));
            let images = (0..n).map(|_| sample_captioned(corpus, &mut r).map(|c| c.image)).collect::<Result<Vec<_>>>()?;
            Ok(Autoencoder::Patch(PatchAutoencoder::fit(&images, factor, channels)?))
        }
    }
}

fn cosine_lr(lr: f64, final_fraction: f64, step: usize, steps: usize) -> f64 {
    if final_fraction == 1.0 || steps < 2 {
        return lr;
    }
    let progress = step as f64 / (steps - 1) as f64;
    lr * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Trains every denoiser parameter with captioned corpus batches.
///
/// `progress` receives `(step, loss)` after every optimizer step.
pub fn pretrain(cfg: &PretrainConfig, progress: &mut dyn FnMut(usize, f64)) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let vocab = Vocabulary::toy();
    let autoencoder = fit_autoencoder(cfg.autoencoder, &cfg.corpus, cfg.autoencoder_fit_images, cfg.seed)?;
    let mut params = DenoiserParams::init(cfg.denoiser, vocab.len(), seed!(cfg.seed, "init"))?;
    let sched = cfg.schedule.build()?;
    let mut data_rng = rng::stream(seed!(cfg.seed, "data"));
    let mut noise_rng = rng::stream(seed!(cfg.seed, "noise"));
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut trainable = Trainable { tensors: (0..params.tensors.len()).map(|i| (i, cfg.lr)).collect(), slots: vec![] };
    let req = GradRequest { partitions: [true; 4], slots: false };
    let no_slots = SlotValues::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut latents = Vec::with_capacity(cfg.batch_size);
        let mut prompts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let item = sample_captioned(&cfg.corpus, &mut data_rng)?;
            latents.push(autoencoder.encode(&item.image)?);
            prompts.push(padded(&vocab.tokenize(&item.caption)?, cfg.denoiser.seq_len, vocab.pad_id())?);
        }
        let batch: Vec<Example> = latents.iter().zip(&prompts).map(|(z0, tokens)| Example { z0, tokens, slots: &no_slots }).collect();
        let (loss, grads) = batch_loss(&params, &sched, &batch, Some(&req), &mut noise_rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: "pretraining".into() });
        }
        let mut grads = grads.expect("gradients requested");
        let lr = cosine_lr(cfg.lr, cfg.final_lr_fraction, step, cfg.steps);
        trainable.tensors.iter_mut().for_each(|t| t.1 = lr);
        clip_grads(&mut grads, &trainable, cfg.clip_norm);
        opt.step(&mut params, &mut SlotValues::new(), &grads, &trainable)?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(ModelCheckpoint {
        params,
        vocab,
        schedule: cfg.schedule,
        autoencoder,
        slots: SlotValues::new(),
        meta: CheckpointMeta {
            kind: CheckpointKind::Base,
            variant: None,
            steps: cfg.steps,
            base_hash: None,
            config_hash: json_hash(cfg),
            rng: Some(RngState::capture(&noise_rng)),
            losses,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_lr_runs_from_start_to_floor() {
        assert_eq!(cosine_lr(2e-3, 1.0, 7, 10), 2e-3);
        assert_eq!(cosine_lr(2e-3, 0.1, 0, 10), 2e-3);
        assert!((cosine_lr(2e-3, 0.1, 9, 10) - 2e-4).abs() < 1e-18);
        let mid = cosine_lr(1.0, 0.0, 50, 101);
        assert!((mid - 0.5).abs() < 1e-12);
    }
}
