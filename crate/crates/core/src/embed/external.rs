//! Subprocess embedder protocol.
//!
//! One invocation per batch: `<program> <args…> <manifest.json> <output.feat>`.
//! The manifest lists image paths or prompts; the program writes a feature
//! matrix: `FEAT`, u32 version, u64 header length, JSON header
//! `{d_feat, ids, rows}`, then `rows·d_feat` f64 LE values.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::{EmbedderDescriptor, EmbedderKind, FeatureEmbedder, FeatureVector};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
const FEATURE_VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 24;
const MAX_VALUES: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedRequestKind {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Input of one embedder invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedManifest {
    pub format_version: u32,
    pub kind: EmbedRequestKind,
    pub items: Vec<ManifestItem>,
}

impl EmbedManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format_version != 1 {
            return Err(Error::format("embed manifest", format!("unsupported version {}", m.format_version)));
        }
        for it in &m.items {
            let ok = match m.kind {
                EmbedRequestKind::Image => it.path.is_some() && it.text.is_none(),
                EmbedRequestKind::Text => it.text.is_some() && it.path.is_none(),
            };
            if !ok {
                return Err(Error::format("embed manifest", format!("item {:?} does not match kind", it.id)));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatrixHeader {
    d_feat: usize,
    ids: Vec<String>,
    rows: usize,
}

/// Row-major feature matrix with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub d_feat: usize,
    pub ids: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d_feat..(i + 1) * self.d_feat]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&MatrixHeader { d_feat: self.d_feat, ids: self.ids.clone(), rows: self.rows() }).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format("feature matrix", r);
        if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
            return Err(bad("missing magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FEATURE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if hlen > MAX_HEADER || hlen as usize > bytes.len() - 16 {
            return Err(bad("header length out of range".into()));
        }
        let end = 16 + hlen as usize;
        let h: MatrixHeader = serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(e.to_string()))?;
        if h.rows != h.ids.len() || h.d_feat == 0 {
            return Err(bad("row count disagrees with ids".into()));
        }
        let n = h.rows.checked_mul(h.d_feat).filter(|n| *n <= MAX_VALUES).ok_or_else(|| bad("matrix too large".into()))?;
        let body = &bytes[end..];
        if body.len() != n * 8 {
            return Err(bad(format!("expected {} value bytes, found {}", n * 8, body.len())));
        }
        let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        Ok(Self { d_feat: h.d_feat, ids: h.ids, values })
    }
}

/// Embedder implemented by an external program speaking the manifest protocol.
#[derive(Debug, Clone)]
pub struct ExternalEmbedder {
    desc: EmbedderDescriptor,
    program: PathBuf,
    args: Vec<String>,
}

impl ExternalEmbedder {
    pub fn new(id: &str, d_feat: usize, supports_text: bool, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            desc: EmbedderDescriptor { id: id.into(), kind: EmbedderKind::External, d_feat, supports_text },
            program: program.into(),
            args,
        }
    }

    fn invoke(&self, dir: &Path, manifest: &EmbedManifest) -> Result<FeatureMatrix> {
        let mpath = dir.join("manifest.json");
        let opath = dir.join("features.feat");
        std::fs::write(&mpath, serde_json::to_vec_pretty(manifest)?).map_err(Error::at(&mpath))?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&mpath)
            .arg(&opath)
            .status()
            .map_err(|e| Error::Embedder(format!("cannot start {}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Embedder(format!("{} exited with {status}", self.program.display())));
        }
        let m = FeatureMatrix::parse(&std::fs::read(&opath).map_err(Error::at(&opath))?)?;
        let want: Vec<&str> = manifest.items.iter().map(|i| i.id.as_str()).collect();
        if m.ids.iter().map(String::as_str).ne(want.iter().copied()) {
            return Err(Error::Embedder("external embedder returned ids in a different order".into()));
        }
        if m.d_feat != self.desc.d_feat {
            return Err(Error::Embedder(format!("expected {} features, got {}", self.desc.d_feat, m.d_feat)));
        }
        Ok(m)
    }

    fn vectors(&self, m: FeatureMatrix) -> Result<Vec<FeatureVector>> {
        (0..m.rows()).map(|i| FeatureVector::new(m.row(i).to_vec(), self.desc.id.clone())).collect()
    }
}

impl FeatureEmbedder for ExternalEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.desc
    }

    fn embed_images(&self, images: &[ImageTensor]) -> Result<Vec<FeatureVector>> {
        if images.is_empty() {
            return Ok(vec![]);
        }
        let dir = tempfile::tempdir()?;
        let mut items = Vec::with_capacity(images.len());
        for (i, im) in images.iter().enumerate() {
            let p = dir.path().join(format!("{i:05}.png"));
            im.save_png(&p)?;
            items.push(ManifestItem { id: format!("{i:05}"), path: Some(p), text: None });
        }
        let m = self.invoke(dir.path(), &EmbedManifest { format_version: 1, kind: EmbedRequestKind::Image, items })?;
        self.vectors(m)
    }

    fn embed_text(&self, prompt: &str) -> Result<FeatureVector> {
        if !self.desc.supports_text {
            return Err(Error::Embedder(format!("{} does not embed text", self.desc.id)));
        }
        if prompt.trim().is_empty() {
            return Err(Error::Embedder("empty prompt".into()));
        }
        let dir = tempfile::tempdir()?;
        let item = ManifestItem { id: "0".into(), path: None, text: Some(prompt.into()) };
        let m = self.invoke(dir.path(), &EmbedManifest { format_version: 1, kind: EmbedRequestKind::Text, items: vec![item] })?;
        Ok(self.vectors(m)?.remove(0))
    }
}
