//! Forward noising and the noise-prediction loss.

use ndarray::Array2;
use rand::Rng as _;

use super::latent::LatentTensor;
use super::params::{DenoiserParams, GradRequest, Grads};
use super::schedule::NoiseSchedule;
use super::text::{self, TextCondition, TextTrace};
use super::denoiser::UnetTrace;
use super::vocab::{SlotValues, Token};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// `√ᾱ·z0 + √(1−ᾱ)·ε` for an explicit `alpha_bar`.
pub fn q_sample_with(z0: &LatentTensor, alpha_bar: f64, eps: &LatentTensor) -> Result<LatentTensor> {
    z0.same_shape(eps)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut data = &z0.data * a;
    data.scaled_add(b, &eps.data);
    LatentTensor::new(z0.height, z0.width, data)
}

pub fn q_sample(z0: &LatentTensor, t: usize, eps: &LatentTensor, sched: &NoiseSchedule) -> Result<LatentTensor> {
    q_sample_with(z0, sched.alpha_bar(t)?, eps)
}

/// One `(t, ε)` draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: LatentTensor,
}

/// Draws `t` uniformly from `[0, T)`, then ε entries in row-major order.
pub fn draw_noise(rng: &mut Rng, steps: usize, shape: [usize; 3]) -> NoiseDraw {
    let t = rng.gen_range(0..steps);
    let eps = LatentTensor::from_vec(shape[0], shape[1], shape[2], rng::normals(rng, shape.iter().product()))
        .expect("shape product matches");
    NoiseDraw { t, eps }
}

/// A text-conditioned ε-predictor that can be differentiated.
pub trait ConditionalModel {
    type Trace;

    /// Number of parameter tensors, for sizing [`Grads`].
    fn n_params(&self) -> usize;

    /// Prediction for an already padded token sequence.
    fn forward(&self, z_t: &LatentTensor, t: usize, tokens: &[Token], slots: &SlotValues) -> Result<(LatentTensor, Self::Trace)>;

    /// Accumulates the vector-Jacobian product with `d_eps` into `grads`.
    fn backward(&self, trace: Self::Trace, d_eps: &Array2<f64>, req: &GradRequest, grads: &mut Grads);
}

impl ConditionalModel for DenoiserParams {
    type Trace = (TextTrace, UnetTrace);

    fn n_params(&self) -> usize {
        self.tensors.len()
    }

    fn forward(&self, z_t: &LatentTensor, t: usize, tokens: &[Token], slots: &SlotValues) -> Result<(LatentTensor, Self::Trace)> {
        let (y, text_trace) = text::encode_traced(self, tokens, slots)?;
        let (out, unet_trace) = self.denoise_traced(z_t, t, &y)?;
        Ok((out, (text_trace, unet_trace)))
    }

    fn backward(&self, (text_trace, unet_trace): Self::Trace, d_eps: &Array2<f64>, req: &GradRequest, grads: &mut Grads) {
        if let Some(dy) = self.denoise_backward(&unet_trace, d_eps, req, grads) {
            text::encode_back(self, &text_trace, &dy, req, grads);
        }
    }
}

/// One training example: clean latent, padded prompt and slot vectors.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub z0: &'a LatentTensor,
    pub tokens: &'a [Token],
    pub slots: &'a SlotValues,
}

/// Mean squared noise-prediction error of one example under one draw.
///
/// With `req`, also returns gradients of that value.
pub fn example_loss<M: ConditionalModel>(
    model: &M,
    sched: &NoiseSchedule,
    ex: Example<'_>,
    draw: &NoiseDraw,
    req: Option<&GradRequest>,
) -> Result<(f64, Option<Grads>)> {
    let z_t = q_sample(ex.z0, draw.t, &draw.eps, sched)?;
    let (pred, trace) = model.forward(&z_t, draw.t, ex.tokens, ex.slots)?;
    pred.same_shape(&draw.eps)?;
    let resid = &pred.data - &draw.eps.data;
    let n = resid.len() as f64;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let grads = req.map(|req| {
        let mut g = Grads::empty(model.n_params());
        model.backward(trace, &(resid * (2.0 / n)), req, &mut g);
        g
    });
    Ok((loss, grads))
}

/// Batch mean of [`example_loss`] with one fresh draw per example, plus gradients.
pub fn batch_loss<M: ConditionalModel>(
    model: &M,
    sched: &NoiseSchedule,
    batch: &[Example<'_>],
    req: Option<&GradRequest>,
    rng: &mut Rng,
) -> Result<(f64, Option<Grads>)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let mut total = 0.0;
    let mut acc: Option<Grads> = None;
    for ex in batch {
        let draw = draw_noise(rng, sched.len(), ex.z0.shape());
        let (l, g) = example_loss(model, sched, *ex, &draw, req)?;
        total += l;
        if let Some(g) = g {
            match &mut acc {
                Some(a) => a.merge(g),
                None => acc = Some(g),
            }
        }
    }
    let b = batch.len() as f64;
    if let Some(a) = &mut acc {
        a.scale(1.0 / b);
    }
    Ok((total / b, acc))
}

/// Noise-prediction loss of a batch of clean latents under a fixed condition `y`.
///
/// Draw order per latent matches [`batch_loss`].
pub fn ldm_loss(params: &DenoiserParams, latents: &[LatentTensor], y: &TextCondition, sched: &NoiseSchedule, rng: &mut Rng) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let mut total = 0.0;
    for z0 in latents {
        let draw = draw_noise(rng, sched.len(), z0.shape());
        let z_t = q_sample(z0, draw.t, &draw.eps, sched)?;
        let pred = params.denoise(&z_t, draw.t, y)?;
        let n = pred.len() as f64;
        total += pred.data.iter().zip(draw.eps.data.iter()).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / n;
    }
    Ok(total / latents.len() as f64)
}
