//! Image and text feature extractors behind the similarity metrics.

mod external;
mod oracle;

use serde::{Deserialize, Serialize};

pub use external::{EmbedManifest, EmbedRequestKind, ExternalEmbedder, FeatureMatrix, ManifestItem};
pub use oracle::{OracleEmbedder, COLOR_BINS, GRAY_CELLS, ORACLE_DIM, ORIENTATION_BINS};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderDescriptor {
    pub id: String,
    pub kind: EmbedderKind,
    pub d_feat: usize,
    pub supports_text: bool,
}

/// Finite, nonzero feature vector tagged with its embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    embedder_id: String,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, embedder_id: impl Into<String>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embedder("feature vector must be nonempty and finite".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::Embedder("zero feature vector cannot be normalized".into()));
        }
        Ok(Self { values, embedder_id: embedder_id.into() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.embedder_id != b.embedder_id || a.dim() != b.dim() {
        return Err(Error::Embedder(format!(
            "cannot compare {}[{}] with {}[{}]",
            a.embedder_id,
            a.dim(),
            b.embedder_id,
            b.dim()
        )));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

/// A feature extractor for images and, optionally, prompts.
pub trait FeatureEmbedder: Send + Sync {
    fn descriptor(&self) -> &EmbedderDescriptor;

    fn embed_images(&self, images: &[ImageTensor]) -> Result<Vec<FeatureVector>>;

    fn embed_image(&self, image: &ImageTensor) -> Result<FeatureVector> {
        Ok(self.embed_images(std::slice::from_ref(image))?.remove(0))
    }

    fn embed_text(&self, prompt: &str) -> Result<FeatureVector>;
}
