//! Toy text-conditioned latent diffusion model.

pub mod autoencoder;
pub mod checkpoint;
pub mod denoiser;
pub mod latent;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod sample;
pub mod schedule;
pub mod text;
pub mod vocab;

pub use autoencoder::{Autoencoder, AutoencoderSpec, PatchAutoencoder};
pub use checkpoint::{CheckpointKind, CheckpointMeta, ModelCheckpoint};
pub use latent::LatentTensor;
pub use loss::{batch_loss, draw_noise, example_loss, ldm_loss, q_sample, q_sample_with, ConditionalModel, Example, NoiseDraw};
pub use optim::{Optimizer, OptimizerKind, Trainable};
pub use params::{DenoiserConfig, DenoiserParams, GradRequest, Grads, Partition};
pub use pretrain::{pretrain, PretrainConfig};
pub use sample::{sample, SampleConfig, Sampler};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleSpec};
pub use text::{encode as text_encode, TextCondition};
pub use vocab::{SlotValues, Token, Vocabulary, PHI_SLOT, SUBJECT_SLOT};
