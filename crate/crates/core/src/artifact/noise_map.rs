//! Additive noise maps supplied from outside (e.g. adversarial perturbations).
//!
//! File layout, little endian:
//!
//! ```text
//! magic  b"BNZ1"
//! height u32
//! width  u32
//! values f32 × height·width·3   (row-major, channel-last)
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BNZ1";
const MAX_PIXELS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl NoiseMap {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::format("noise map", "missing BNZ1 header"));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if height == 0 || width == 0 || height.saturating_mul(width) > MAX_PIXELS {
            return Err(Error::format("noise map", format!("bad dimensions {height}x{width}")));
        }
        let n = height * width * 3;
        let body = &bytes[12..];
        if body.len() != n * 4 {
            return Err(Error::format(
                "noise map",
                format!("expected {} payload bytes, found {}", n * 4, body.len()),
            ));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("noise map", "non-finite value"));
        }
        Ok(Self { height, width, values })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::at(path))?;
        Self::parse(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::at(path))
    }
}
