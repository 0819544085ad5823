//! Orchestration behind the `blemish` command.

pub mod config;
pub mod error;
pub mod stages;
pub mod store;
pub mod sweep;

use std::path::Path;

use blemish_core::embed::{EmbedManifest, EmbedRequestKind, FeatureEmbedder, FeatureMatrix, OracleEmbedder};
use blemish_core::image::ImageTensor;

use crate::error::{CliError, CliResult};

/// Answers one external-embedder request with the oracle embedder.
pub fn oracle_exchange(manifest: &Path, output: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(manifest).map_err(|e| CliError::Config(format!("{}: {e}", manifest.display())))?;
    let m = EmbedManifest::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let oracle = OracleEmbedder::default();
    let mut values = Vec::new();
    for item in &m.items {
        let v = match m.kind {
            EmbedRequestKind::Image => {
                let p = item.path.as_ref().expect("validated by parse");
                let p = if p.is_relative() { manifest.parent().unwrap_or(Path::new(".")).join(p) } else { p.clone() };
                oracle.embed_image(&ImageTensor::load_png(&p)?)?
            }
            EmbedRequestKind::Text => oracle.embed_text(item.text.as_deref().expect("validated by parse"))?,
        };
        values.extend_from_slice(v.values());
    }
    let matrix = FeatureMatrix { d_feat: oracle.descriptor().d_feat, ids: m.items.iter().map(|i| i.id.clone()).collect(), values };
    std::fs::write(output, matrix.to_bytes())?;
    Ok(())
}
