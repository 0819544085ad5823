//! Deterministic hand-crafted embedder aligned with the toy corpus.
//!
//! Image layout (120 values): mean-centred 8×8 grayscale, 16-bin histograms
//! of R, G and B, and an 8-bin magnitude-weighted gradient-orientation
//! histogram. Each block is L2-normalized when nonzero, then the whole vector.

use std::f64::consts::PI;

use super::{EmbedderDescriptor, EmbedderKind, FeatureEmbedder, FeatureVector};
use crate::corpus::{canonical_context, canonical_shape, color_rgb, CONTEXTS, SHAPES};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const GRAY_CELLS: usize = 8;
pub const COLOR_BINS: usize = 16;
pub const ORIENTATION_BINS: usize = 8;
pub const ORACLE_DIM: usize = GRAY_CELLS * GRAY_CELLS + 3 * COLOR_BINS + ORIENTATION_BINS;
const SIZE: usize = 64;
const GRAY: std::ops::Range<usize> = 0..64;
const HIST: std::ops::Range<usize> = 64..112;
const GRAD: std::ops::Range<usize> = 112..120;
const HASH_WEIGHT: f64 = 0.25;
/// Blocks with smaller norm are rounding residue and count as empty.
const BLOCK_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct OracleEmbedder {
    desc: EmbedderDescriptor,
}

impl Default for OracleEmbedder {
    fn default() -> Self {
        Self { desc: EmbedderDescriptor { id: "oracle".into(), kind: EmbedderKind::Oracle, d_feat: ORACLE_DIM, supports_text: true } }
    }
}

fn normalize_blocks(v: &mut [f64]) {
    for r in [GRAY, HIST, GRAD] {
        let n = v[r.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > BLOCK_FLOOR {
            v[r].iter_mut().for_each(|x| *x /= n);
        } else {
            v[r].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

fn bin(v: f64) -> usize {
    ((v * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1)
}

/// Unnormalized blocks of an image already at 64×64.
fn raw_features(img: &ImageTensor) -> Vec<f64> {
    let mut f = vec![0.0; ORACLE_DIM];
    let cell = SIZE / GRAY_CELLS;
    let luma: Vec<f64> = (0..SIZE * SIZE).map(|i| img.luma(i / SIZE, i % SIZE)).collect();
    for cy in 0..GRAY_CELLS {
        for cx in 0..GRAY_CELLS {
            let mut s = 0.0;
            for y in cy * cell..(cy + 1) * cell {
                for x in cx * cell..(cx + 1) * cell {
                    s += luma[y * SIZE + x];
                }
            }
            f[cy * GRAY_CELLS + cx] = s / (cell * cell) as f64;
        }
    }
    let mean = f[GRAY].iter().sum::<f64>() / GRAY.len() as f64;
    f[GRAY].iter_mut().for_each(|v| *v -= mean);
    let n = (SIZE * SIZE) as f64;
    for px in img.data().chunks_exact(3) {
        for (c, v) in px.iter().enumerate() {
            f[HIST.start + c * COLOR_BINS + bin(*v)] += 1.0 / n;
        }
    }
    let at = |y: isize, x: isize| luma[(y.clamp(0, SIZE as isize - 1) as usize) * SIZE + x.clamp(0, SIZE as isize - 1) as usize];
    for y in 0..SIZE as isize {
        for x in 0..SIZE as isize {
            let gx = 0.5 * (at(y, x + 1) - at(y, x - 1));
            let gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 0.0 {
                let angle = gy.atan2(gx).rem_euclid(PI);
                let b = ((angle / PI * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
                f[GRAD.start + b] += mag / n;
            }
        }
    }
    f
}

/// FNV-1a.
fn fnv(word: &str) -> u64 {
    word.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl OracleEmbedder {
    fn finish(&self, mut f: Vec<f64>) -> Result<FeatureVector> {
        normalize_blocks(&mut f);
        let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Embedder("image has no measurable features".into()));
        }
        f.iter_mut().for_each(|x| *x /= n);
        FeatureVector::new(f, self.desc.id.clone())
    }

    fn image_vector(&self, image: &ImageTensor) -> Result<FeatureVector> {
        let img = if image.height() == SIZE && image.width() == SIZE { image.clone() } else { image.resize_bilinear(SIZE, SIZE)? };
        self.finish(raw_features(&img))
    }

    /// Normalized blocks of a canonical rendering, used as word prototypes.
    fn prototype(img: &ImageTensor) -> Vec<f64> {
        let mut f = raw_features(img);
        normalize_blocks(&mut f);
        f
    }
}

impl FeatureEmbedder for OracleEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.desc
    }

    fn embed_images(&self, images: &[ImageTensor]) -> Result<Vec<FeatureVector>> {
        images.iter().map(|im| self.image_vector(im)).collect()
    }

    /// Bag of words: colour words fill histogram bins, shape words the grayscale
    /// and gradient blocks of their canonical rendering, context keywords the full
    /// features of the empty scene; other words hash to one axis.
    fn embed_text(&self, prompt: &str) -> Result<FeatureVector> {
        let words: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
        if words.is_empty() {
            return Err(Error::Embedder("empty prompt".into()));
        }
        let mut f = vec![0.0; ORACLE_DIM];
        for w in &words {
            if let Some(rgb) = color_rgb(w) {
                for (c, v) in rgb.iter().enumerate() {
                    f[HIST.start + c * COLOR_BINS + bin(*v)] += 1.0;
                }
            } else if let Some(s) = SHAPES.iter().position(|s| s == w) {
                let p = Self::prototype(&canonical_shape(s, SIZE));
                for r in [GRAY, GRAD] {
                    for i in r {
                        f[i] += p[i];
                    }
                }
            } else if let Some(c) = CONTEXTS.iter().position(|(_, k)| k == w) {
                let p = Self::prototype(&canonical_context(c, SIZE));
                f.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            } else {
                f[(fnv(w) % ORACLE_DIM as u64) as usize] += HASH_WEIGHT;
            }
        }
        self.finish(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cosine;

    fn solid(rgb: [f64; 3]) -> ImageTensor {
        ImageTensor::filled(64, 64, rgb).unwrap()
    }

    #[test]
    fn uniform_images_match_hand_computed_vectors() {
        let o = OracleEmbedder::default();
        let black = o.embed_image(&solid([0.0; 3])).unwrap();
        let white = o.embed_image(&solid([1.0; 3])).unwrap();
        let red = o.embed_image(&solid([1.0, 0.0, 0.0])).unwrap();
        // only the histogram block survives: one bin per channel, weight 1/√3 each
        let third = 1.0 / 3f64.sqrt();
        let mut expect = vec![0.0; ORACLE_DIM];
        for c in 0..3 {
            expect[64 + c * 16] = third;
        }
        assert!(black.values().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(cosine(&black, &white).unwrap(), 0.0);
        assert!((cosine(&black, &red).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unit_norm_and_resize() {
        let o = OracleEmbedder::default();
        let img = crate::corpus::canonical_shape(3, 32);
        let v = o.embed_image(&img).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-9);
        assert_eq!(v.dim(), ORACLE_DIM);
    }

    #[test]
    fn text_keywords_are_discriminative() {
        let o = OracleEmbedder::default();
        let t = |s: &str| o.embed_text(s).unwrap();
        let c = |a: &str, b: &str| cosine(&t(a), &t(b)).unwrap();
        assert!(c("red square", "red square on a table") > c("red square", "blue circle"));
        assert_eq!(t("red square"), t("red square"));
        assert!(o.embed_text("   ").is_err());
    }
}
