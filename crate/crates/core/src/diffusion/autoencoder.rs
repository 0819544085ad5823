//! Pixel ↔ latent maps.
//!
//! `Identity` keeps the model in pixel space. `Patch` is a linear convolutional
//! autoencoder with kernel = stride = `factor`, fitted by principal components
//! of image patches and whitened per latent channel.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::latent::LatentTensor;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Autoencoder {
    Identity,
    Patch(PatchAutoencoder),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchAutoencoder {
    pub factor: usize,
    pub channels: usize,
    /// Mean patch, `factor²·3` values ordered `(dy, dx, rgb)`.
    pub mean: Vec<f64>,
    /// Column-orthonormal basis, `(factor²·3) × channels`, row-major.
    pub basis: Vec<f64>,
    /// Per-channel whitening scale.
    pub scale: Vec<f64>,
}

/// Serializable autoencoder settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AutoencoderSpec {
    Identity,
    Patch { factor: usize, channels: usize },
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        AutoencoderSpec::Patch { factor: 4, channels: 4 }
    }
}

impl Autoencoder {
    pub fn spec(&self) -> AutoencoderSpec {
        match self {
            Autoencoder::Identity => AutoencoderSpec::Identity,
            Autoencoder::Patch(p) => AutoencoderSpec::Patch { factor: p.factor, channels: p.channels },
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            Autoencoder::Identity => 1,
            Autoencoder::Patch(p) => p.factor,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Autoencoder::Identity => 3,
            Autoencoder::Patch(p) => p.channels,
        }
    }

    /// Latent `(height, width)` for an image of the given size.
    pub fn latent_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.factor();
        if height % f != 0 || width % f != 0 {
            return Err(Error::Dimension(format!("{height}x{width} image not divisible by factor {f}")));
        }
        Ok((height / f, width / f))
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        let (lh, lw) = self.latent_dims(image.height(), image.width())?;
        match self {
            Autoencoder::Identity => LatentTensor::from_vec(lh, lw, 3, image.data().to_vec()),
            Autoencoder::Patch(p) => {
                let mut data = Array2::zeros((lh * lw, p.channels));
                let mut patch = vec![0.0; p.patch_len()];
                for py in 0..lh {
                    for px in 0..lw {
                        p.read_patch(image, py, px, &mut patch);
                        let mut row = data.row_mut(py * lw + px);
                        for c in 0..p.channels {
                            let mut acc = 0.0;
                            for (i, v) in patch.iter().enumerate() {
                                acc += p.basis[i * p.channels + c] * (v - p.mean[i]);
                            }
                            row[c] = acc * p.scale[c];
                        }
                    }
                }
                LatentTensor::new(lh, lw, data)
            }
        }
    }

    /// Decodes and clamps into `[0, 1]`.
    pub fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        if latent.channels() != self.latent_channels() {
            return Err(Error::Shape { expected: vec![self.latent_channels()], got: vec![latent.channels()] });
        }
        let f = self.factor();
        let (h, w) = (latent.height * f, latent.width * f);
        match self {
            Autoencoder::Identity => ImageTensor::from_clipped(h, w, latent.data.iter().copied().collect()),
            Autoencoder::Patch(p) => {
                let mut out = vec![0.0; h * w * 3];
                for py in 0..latent.height {
                    for px in 0..latent.width {
                        let z = latent.data.row(py * latent.width + px);
                        for dy in 0..f {
                            for dx in 0..f {
                                for ch in 0..3 {
                                    let i = (dy * f + dx) * 3 + ch;
                                    let mut v = p.mean[i];
                                    for c in 0..p.channels {
                                        v += p.basis[i * p.channels + c] * z[c] / p.scale[c];
                                    }
                                    out[((py * f + dy) * w + px * f + dx) * 3 + ch] = v;
                                }
                            }
                        }
                    }
                }
                ImageTensor::from_clipped(h, w, out)
            }
        }
    }

    pub fn reconstruction_error(&self, images: &[ImageTensor]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for img in images {
            let rec = self.decode(&self.encode(img)?)?;
            total += img.data().iter().zip(rec.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n += img.data().len();
        }
        if n == 0 {
            return Err(Error::Empty("no images"));
        }
        Ok(total / n as f64)
    }
}

impl PatchAutoencoder {
    pub fn patch_len(&self) -> usize {
        self.factor * self.factor * 3
    }

    fn read_patch(&self, image: &ImageTensor, py: usize, px: usize, out: &mut [f64]) {
        let f = self.factor;
        for dy in 0..f {
            for dx in 0..f {
                let rgb = image.pixel(py * f + dy, px * f + dx);
                out[(dy * f + dx) * 3..(dy * f + dx) * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }

    /// Fits the top principal components of all non-overlapping patches.
    pub fn fit(images: &[ImageTensor], factor: usize, channels: usize) -> Result<Self> {
        let p = factor * factor * 3;
        if factor == 0 || channels == 0 || channels > p {
            return Err(Error::Config(format!("need 0 < channels ≤ {p} for factor {factor}")));
        }
        let proto = Self { factor, channels, mean: vec![0.0; p], basis: vec![], scale: vec![] };
        let mut patches: Vec<Vec<f64>> = Vec::new();
        for img in images {
            let (lh, lw) = (img.height(), img.width());
            if lh % factor != 0 || lw % factor != 0 {
                return Err(Error::Dimension(format!("image not divisible by factor {factor}")));
            }
            for py in 0..lh / factor {
                for px in 0..lw / factor {
                    let mut patch = vec![0.0; p];
                    proto.read_patch(img, py, px, &mut patch);
                    patches.push(patch);
                }
            }
        }
        if patches.len() < 2 {
            return Err(Error::Empty("not enough patches to fit the autoencoder"));
        }
        let n = patches.len() as f64;
        let mut mean = vec![0.0; p];
        for patch in &patches {
            for (m, v) in mean.iter_mut().zip(patch) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for patch in &patches {
            let d = nalgebra::DVector::from_iterator(p, patch.iter().zip(&mean).map(|(v, m)| v - m));
            cov.ger(1.0 / n, &d, &d, 1.0);
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = vec![0.0; p * channels];
        let mut scale = vec![0.0; channels];
        for (c, &k) in order.iter().take(channels).enumerate() {
            let col = eig.eigenvectors.column(k);
            // deterministic sign: largest-magnitude entry positive
            let pivot = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for i in 0..p {
                basis[i * channels + c] = sign * col[i];
            }
            scale[c] = 1.0 / eig.eigenvalues[k].max(1e-8).sqrt();
        }
        Ok(Self { factor, channels, mean, basis, scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripes(h: usize, w: usize, phase: usize) -> ImageTensor {
        let data = (0..h * w)
            .flat_map(|i| {
                let (y, x) = (i / w, i % w);
                let v = if (x + y + phase) % 8 < 4 { 0.9 } else { 0.1 };
                [v, 0.5 * v, 1.0 - v]
            })
            .collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn identity_round_trip_is_bitwise() {
        let img = stripes(8, 12, 1);
        let ae = Autoencoder::Identity;
        assert_eq!(ae.decode(&ae.encode(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn patch_shapes_and_divisibility() {
        let imgs: Vec<_> = (0..4).map(|k| stripes(64, 64, k)).collect();
        let ae = Autoencoder::Patch(PatchAutoencoder::fit(&imgs, 4, 4).unwrap());
        let z = ae.encode(&imgs[0]).unwrap();
        assert_eq!(z.shape(), [16, 16, 4]);
        assert!(ae.encode(&stripes(30, 32, 0)).is_err());
    }

    #[test]
    fn full_rank_patch_autoencoder_reconstructs() {
        let imgs: Vec<_> = (0..3).map(|k| stripes(16, 16, k)).collect();
        let ae = Autoencoder::Patch(PatchAutoencoder::fit(&imgs, 2, 12).unwrap());
        assert!(ae.reconstruction_error(&imgs).unwrap() < 1e-20);
    }
}
