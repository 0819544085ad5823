//! Ancestral DDPM and deterministic DDIM samplers over strided timesteps.

use serde::{Deserialize, Serialize};

use super::autoencoder::Autoencoder;
use super::latent::LatentTensor;
use super::params::DenoiserParams;
use super::schedule::NoiseSchedule;
use super::text::TextCondition;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    #[serde(default)]
    pub sampler: Sampler,
    /// Bound applied to the predicted clean latent at every step.
    pub clip_x0: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 25, sampler: Sampler::Ddpm, clip_x0: 4.0 }
    }
}

/// Descending timesteps `⌊(i+1)·T/S⌋ − 1`, ending at `T − 1`.
pub fn timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("sampling steps must be in 1..={total}, got {steps}")));
    }
    Ok((0..steps).rev().map(|i| (i + 1) * total / steps - 1).collect())
}

/// Draws a latent and decodes it. Deterministic in `seed`.
pub fn sample(
    params: &DenoiserParams,
    ae: &Autoencoder,
    y: &TextCondition,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
    image_size: (usize, usize),
    seed: u64,
) -> Result<ImageTensor> {
    let (lh, lw) = ae.latent_dims(image_size.0, image_size.1)?;
    let ts = timesteps(sched.len(), cfg.steps)?;
    let mut r = rng::stream(seed);
    let c = ae.latent_channels();
    let mut z = LatentTensor::from_vec(lh, lw, c, rng::normals(&mut r, lh * lw * c))?;
    for (i, &t) in ts.iter().enumerate() {
        let eps = params.denoise(&z, t, y)?;
        let ab = sched.alpha_bars[t];
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| sched.alpha_bars[p]);
        let mut x0 = (&z.data - &(&eps.data * (1.0 - ab).sqrt())) / ab.sqrt();
        x0.mapv_inplace(|v| v.clamp(-cfg.clip_x0, cfg.clip_x0));
        let data = match cfg.sampler {
            Sampler::Ddim => {
                let eps_hat = (&z.data - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
                &x0 * ab_prev.sqrt() + &eps_hat * (1.0 - ab_prev).sqrt()
            }
            Sampler::Ddpm => {
                let beta = 1.0 - ab / ab_prev;
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let mut mean = &x0 * c0 + &z.data * ct;
                if i + 1 < ts.len() {
                    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                    let noise = rng::normals(&mut r, mean.len());
                    mean.iter_mut().zip(noise).for_each(|(m, n)| *m += sigma * n);
                }
                mean
            }
        };
        z = LatentTensor::new(lh, lw, data)?;
    }
    ae.decode(&z)
}
