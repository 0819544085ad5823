//! Parametric artifact synthesis.
//!
//! Each [`ArtifactSpec`] describes one corruption type. [`apply_artifact`]
//! composites it onto a clean image and is a pure function of
//! `(image, spec, seed)`.

pub mod font;
pub mod noise_map;
pub mod sprite;

use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;
pub use font::FontFace;
use noise_map::NoiseMap;

/// One artifact type, identified by a stable id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub artifact_id: String,
    #[serde(flatten)]
    pub params: ArtifactParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArtifactParams {
    Watermark(WatermarkParams),
    RedCircle(RedCircleParams),
    Sticker(StickerParams),
    Glass(GlassParams),
    ExternalNoise(ExternalNoiseParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkParams {
    pub text: String,
    pub font: FontFace,
    /// Glyph height as a fraction of image height.
    pub glyph_height: f64,
    /// Degrees, counter-clockwise.
    pub rotation: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub tile_rows: u32,
    pub tile_cols: u32,
}

fn red() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedCircleParams {
    /// Centre as fractions of (width, height).
    pub center: [f64; 2],
    /// Radius as a fraction of the shorter side.
    pub radius: f64,
    /// Stroke width in pixels.
    pub stroke: f64,
    #[serde(default = "red")]
    pub color: [f64; 3],
    #[serde(default = "one")]
    pub opacity: f64,
    /// Maximum per-image centre offset, as a fraction of the frame.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickerParams {
    pub asset: String,
    /// Sprite edge as a fraction of the shorter side.
    pub scale: f64,
    /// Sprite centre as fractions of (width, height).
    pub position: [f64; 2],
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlassParams {
    /// Flute width in pixels.
    pub flute_width: u32,
    /// Peak horizontal displacement in pixels.
    pub amplitude: f64,
    /// Box-blur radius in pixels, confined to each flute.
    pub blur_radius: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalNoiseParams {
    pub path: PathBuf,
    /// Per-value clamp bound applied to the map before addition.
    pub epsilon: f64,
}

fn unit_open(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

fn unit_closed(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl ArtifactSpec {
    pub fn kind(&self) -> &'static str {
        match self.params {
            ArtifactParams::Watermark(_) => "watermark",
            ArtifactParams::RedCircle(_) => "red_circle",
            ArtifactParams::Sticker(_) => "sticker",
            ArtifactParams::Glass(_) => "glass",
            ArtifactParams::ExternalNoise(_) => "external_noise",
        }
    }

    /// Checks the image-independent constraints of the spec.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidArtifact {
                id: self.artifact_id.clone(),
                reason,
            })
        };
        if self.artifact_id.is_empty()
            || !self
                .artifact_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return fail("artifact_id must be non-empty [A-Za-z0-9_-]".into());
        }
        match &self.params {
            ArtifactParams::Watermark(p) => {
                if p.text.is_empty() {
                    return fail("watermark text is empty".into());
                }
                if let Some(c) = p.text.chars().find(|c| !font::supports(*c)) {
                    return fail(format!("character {c:?} not in the embedded font"));
                }
                if !(p.glyph_height > 0.0 && p.glyph_height <= 0.5) {
                    return fail(format!("glyph_height {} outside (0, 0.5]", p.glyph_height));
                }
                if !(-90.0..=90.0).contains(&p.rotation) {
                    return fail(format!("rotation {} outside [-90, 90]", p.rotation));
                }
                if !p.color.iter().all(|&c| unit_closed(c)) {
                    return fail("color outside [0, 1]".into());
                }
                if !(p.opacity > 0.0 && p.opacity <= 1.0) {
                    return fail(format!("opacity {} outside (0, 1]", p.opacity));
                }
                if p.tile_rows == 0 || p.tile_cols == 0 || p.tile_rows > 64 || p.tile_cols > 64 {
                    return fail("tile counts must be in 1..=64".into());
                }
            }
            ArtifactParams::RedCircle(p) => {
                if !p.center.iter().all(|&c| unit_open(c)) || !unit_open(p.radius) {
                    return fail("centre and radius fractions must lie in (0, 1)".into());
                }
                if !(p.stroke > 0.0 && p.stroke.is_finite()) {
                    return fail("stroke must be positive".into());
                }
                if !p.color.iter().all(|&c| unit_closed(c)) || !(p.opacity > 0.0 && p.opacity <= 1.0) {
                    return fail("color/opacity out of range".into());
                }
                if !(0.0..1.0).contains(&p.jitter) {
                    return fail("jitter must lie in [0, 1)".into());
                }
            }
            ArtifactParams::Sticker(p) => {
                if !sprite::exists(&p.asset) {
                    return fail(format!("unknown sticker asset `{}`", p.asset));
                }
                if !unit_open(p.scale) || !p.position.iter().all(|&c| unit_open(c)) {
                    return fail("scale and position fractions must lie in (0, 1)".into());
                }
                if !(0.0..1.0).contains(&p.jitter) {
                    return fail("jitter must lie in [0, 1)".into());
                }
            }
            ArtifactParams::Glass(p) => {
                if p.flute_width < 2 {
                    return fail("flute_width must be at least 2 px".into());
                }
                if !(p.amplitude >= 0.0 && p.amplitude.is_finite()) {
                    return fail("amplitude must be finite and non-negative".into());
                }
            }
            ArtifactParams::ExternalNoise(p) => {
                if !(p.epsilon > 0.0 && p.epsilon.is_finite()) {
                    return fail("epsilon must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Parses a JSON record and validates it.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Composites `spec` onto a copy of `image`.
pub fn apply_artifact(image: &ImageTensor, spec: &ArtifactSpec, seed: u64) -> Result<ImageTensor> {
    spec.validate()?;
    if let ArtifactParams::Watermark(p) = &spec.params {
        let px = glyph_pixels(p, image.height());
        if px < 4 {
            return Err(Error::InvalidArtifact {
                id: spec.artifact_id.clone(),
                reason: format!("glyphs rasterize to {px} px, need at least 4"),
            });
        }
    }
    composite(image, &spec.params, seed)
}

/// Composites without validating the spec.
#[doc(hidden)]
pub fn composite(image: &ImageTensor, params: &ArtifactParams, seed: u64) -> Result<ImageTensor> {
    let mut out = image.clone();
    match params {
        ArtifactParams::Watermark(p) => watermark(&mut out, p),
        ArtifactParams::RedCircle(p) => red_circle(&mut out, p, seed),
        ArtifactParams::Sticker(p) => sticker(&mut out, p, seed),
        ArtifactParams::Glass(p) => return glass(image, p),
        ArtifactParams::ExternalNoise(p) => {
            let map = NoiseMap::load(&p.path)?;
            return add_noise(image, &map, p.epsilon);
        }
    }
    Ok(out)
}

pub(crate) fn glyph_pixels(p: &WatermarkParams, height: usize) -> usize {
    (p.glyph_height * height as f64).round() as usize
}

/// Layout of one rendered line of watermark text in unrotated pixel space.
#[derive(Debug, Clone, Copy)]
pub struct TextLayout {
    pub glyph_h: usize,
    pub glyph_w: usize,
    pub spacing: usize,
    pub line_w: usize,
}

impl TextLayout {
    pub fn new(p: &WatermarkParams, height: usize) -> Self {
        let glyph_h = glyph_pixels(p, height).max(1);
        let glyph_w = ((glyph_h * p.font.width()) as f64 / font::GLYPH_ROWS as f64).round().max(1.0) as usize;
        let spacing = ((glyph_h as f64) / font::GLYPH_ROWS as f64).round().max(1.0) as usize;
        let n = p.text.chars().count();
        let line_w = n * glyph_w + (n - 1) * spacing;
        Self { glyph_h, glyph_w, spacing, line_w }
    }

    /// Top-left corner of the text line for tile `(row, col)`.
    pub fn origin(&self, p: &WatermarkParams, height: usize, width: usize, row: u32, col: u32) -> (i64, i64) {
        let cx = (col as f64 + 0.5) * width as f64 / p.tile_cols as f64;
        let cy = (row as f64 + 0.5) * height as f64 / p.tile_rows as f64;
        (
            (cx - self.line_w as f64 / 2.0).round() as i64,
            (cy - self.glyph_h as f64 / 2.0).round() as i64,
        )
    }
}

fn text_mask_at(p: &WatermarkParams, chars: &[char], layout: &TextLayout, origins: &[(i64, i64)], x: i64, y: i64) -> bool {
    let pitch = (layout.glyph_w + layout.spacing) as i64;
    origins.iter().any(|&(ox, oy)| {
        let (lx, ly) = (x - ox, y - oy);
        if ly < 0 || ly >= layout.glyph_h as i64 || lx < 0 || lx >= layout.line_w as i64 {
            return false;
        }
        let (idx, within) = ((lx / pitch) as usize, (lx % pitch) as usize);
        if within >= layout.glyph_w {
            return false;
        }
        let row = ly as usize * font::GLYPH_ROWS / layout.glyph_h;
        let col = within * p.font.width() / layout.glyph_w;
        p.font.ink(chars[idx], row, col).unwrap_or(false)
    })
}

fn watermark(img: &mut ImageTensor, p: &WatermarkParams) {
    let (h, w) = (img.height(), img.width());
    let layout = TextLayout::new(p, h);
    let chars: Vec<char> = p.text.chars().collect();
    let origins: Vec<(i64, i64)> = (0..p.tile_rows)
        .flat_map(|r| (0..p.tile_cols).map(move |c| (r, c)))
        .map(|(r, c)| layout.origin(p, h, w, r, c))
        .collect();
    let theta = p.rotation.to_radians();
    let (sin, cos) = if p.rotation == 0.0 { (0.0, 1.0) } else { theta.sin_cos() };
    let (hx, hy) = (w as f64 / 2.0, h as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            // inverse rotation of the pixel centre into text space
            let (dx, dy) = (x as f64 + 0.5 - hx, y as f64 + 0.5 - hy);
            let ux = cos * dx - sin * dy + hx;
            let uy = sin * dx + cos * dy + hy;
            if text_mask_at(p, &chars, &layout, &origins, ux.floor() as i64, uy.floor() as i64) {
                img.blend_pixel(y, x, p.color, p.opacity);
            }
        }
    }
}

fn jittered(rng: &mut rng::Rng, base: [f64; 2], jitter: f64) -> [f64; 2] {
    if jitter == 0.0 {
        return base;
    }
    [
        base[0] + rng.gen_range(-jitter..=jitter),
        base[1] + rng.gen_range(-jitter..=jitter),
    ]
}

fn red_circle(img: &mut ImageTensor, p: &RedCircleParams, seed: u64) {
    let (h, w) = (img.height(), img.width());
    let mut rng = rng::stream(seed);
    let [fx, fy] = jittered(&mut rng, p.center, p.jitter);
    let (cx, cy) = (fx * w as f64, fy * h as f64);
    let radius = p.radius * h.min(w) as f64;
    let half = p.stroke / 2.0;
    for y in 0..h {
        for x in 0..w {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            if (d - radius).abs() <= half {
                img.blend_pixel(y, x, p.color, p.opacity);
            }
        }
    }
}

fn sticker(img: &mut ImageTensor, p: &StickerParams, seed: u64) {
    let (h, w) = (img.height(), img.width());
    let mut rng = rng::stream(seed);
    let [fx, fy] = jittered(&mut rng, p.position, p.jitter);
    let size = (p.scale * h.min(w) as f64).round().max(1.0) as i64;
    let x0 = (fx * w as f64 - size as f64 / 2.0).round() as i64;
    let y0 = (fy * h as f64 - size as f64 / 2.0).round() as i64;
    for sy in 0..size {
        for sx in 0..size {
            let (y, x) = (y0 + sy, x0 + sx);
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                continue;
            }
            let row = (sy as usize * sprite::SPRITE_SIZE) / size as usize;
            let col = (sx as usize * sprite::SPRITE_SIZE) / size as usize;
            if let Some((rgb, alpha)) = sprite::texel(&p.asset, row, col) {
                img.blend_pixel(y as usize, x as usize, rgb, alpha);
            }
        }
    }
}

fn glass(src: &ImageTensor, p: &GlassParams) -> Result<ImageTensor> {
    let (h, w) = (src.height(), src.width());
    let fw = p.flute_width as usize;
    let mut displaced = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let u = ((x % fw) as f64 + 0.5) / fw as f64;
            let sx = (x as f64 + p.amplitude * (2.0 * std::f64::consts::PI * u).sin()).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let t = sx - x0 as f64;
            let (a, b) = (src.pixel(y, x0), src.pixel(y, x1));
            for c in 0..3 {
                displaced[(y * w + x) * 3 + c] = a[c] * (1.0 - t) + b[c] * t;
            }
        }
    }
    let r = p.blur_radius as usize;
    let mut out = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let start = (x / fw) * fw;
            let end = (start + fw).min(w) - 1;
            let lo = x.saturating_sub(r).max(start);
            let hi = (x + r).min(end);
            let n = (hi - lo + 1) as f64;
            for c in 0..3 {
                let sum: f64 = (lo..=hi).map(|xx| displaced[(y * w + xx) * 3 + c]).sum();
                out[(y * w + x) * 3 + c] = sum / n;
            }
        }
    }
    ImageTensor::from_clipped(h, w, out)
}

fn add_noise(src: &ImageTensor, map: &NoiseMap, epsilon: f64) -> Result<ImageTensor> {
    if map.height != src.height() || map.width != src.width() {
        return Err(Error::Dimension(format!(
            "noise map is {}x{} but image is {}x{}",
            map.height,
            map.width,
            src.height(),
            src.width()
        )));
    }
    let data = src
        .data()
        .iter()
        .zip(&map.values)
        .map(|(&v, &n)| v + (n as f64).clamp(-epsilon, epsilon))
        .collect();
    ImageTensor::from_clipped(src.height(), src.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wm(text: &str, rotation: f64, opacity: f64, glyph_height: f64) -> WatermarkParams {
        WatermarkParams {
            text: text.into(),
            font: FontFace::Block,
            glyph_height,
            rotation,
            color: [0.0, 0.0, 1.0],
            opacity,
            tile_rows: 1,
            tile_cols: 1,
        }
    }

    fn spec(params: ArtifactParams) -> ArtifactSpec {
        ArtifactSpec { artifact_id: "a".into(), params }
    }

    fn gradient(h: usize, w: usize) -> ImageTensor {
        let data = (0..h * w * 3).map(|i| ((i * 7) % 255) as f64 / 255.0).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn zero_opacity_watermark_is_identity() {
        let img = gradient(32, 32);
        let params = ArtifactParams::Watermark(wm("WM", 30.0, 0.0, 0.25));
        assert!(spec(params.clone()).validate().is_err());
        let out = composite(&img, &params, 0).unwrap();
        assert_eq!(out.max_abs_diff(&img), 0.0);
    }

    /// Forward rasterizer: walks the glyph box and paints each covered cell.
    fn reference_glyph_pixels(ch: char, face: FontFace, image_h: usize, image_w: usize, glyph_height: f64) -> Vec<(usize, usize)> {
        let gh = (glyph_height * image_h as f64).round() as usize;
        let gw = (gh as f64 * face.width() as f64 / 7.0).round() as usize;
        let left = (image_w as f64 / 2.0 - gw as f64 / 2.0).round() as usize;
        let top = (image_h as f64 / 2.0 - gh as f64 / 2.0).round() as usize;
        let mut out = Vec::new();
        for dy in 0..gh {
            for dx in 0..gw {
                let (fr, fc) = (dy * 7 / gh, dx * face.width() / gw);
                if face.ink(ch, fr, fc).unwrap() {
                    out.push((top + dy, left + dx));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn single_glyph_matches_reference_rasterizer() {
        let img = ImageTensor::filled(32, 32, [1.0; 3]).unwrap();
        let out = apply_artifact(&img, &spec(ArtifactParams::Watermark(wm("W", 0.0, 1.0, 0.25))), 0).unwrap();
        let mut changed = Vec::new();
        for y in 0..32 {
            for x in 0..32 {
                if out.pixel(y, x) != img.pixel(y, x) {
                    assert_eq!(out.pixel(y, x), [0.0, 0.0, 1.0]);
                    changed.push((y, x));
                }
            }
        }
        let expected = reference_glyph_pixels('W', FontFace::Block, 32, 32, 0.25);
        assert!(!expected.is_empty());
        assert_eq!(changed, expected);
    }

    #[test]
    fn red_circle_geometry() {
        let img = ImageTensor::filled(64, 64, [1.0; 3]).unwrap();
        let params = RedCircleParams {
            center: [0.5, 0.5],
            radius: 0.25,
            stroke: 2.0,
            color: red(),
            opacity: 1.0,
            jitter: 0.0,
        };
        let out = apply_artifact(&img, &spec(ArtifactParams::RedCircle(params)), 9).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let d = ((x as f64 + 0.5 - 32.0).powi(2) + (y as f64 + 0.5 - 32.0).powi(2)).sqrt();
                if (d - 16.0).abs() <= 1.0 {
                    assert_eq!(out.pixel(y, x), [1.0, 0.0, 0.0], "({y},{x}) d={d}");
                } else {
                    assert_eq!(out.pixel(y, x), [1.0; 3]);
                }
            }
        }
        assert_eq!(out.pixel(32, 32), [1.0; 3]);
    }

    #[test]
    fn sticker_clips_at_frame_edge() {
        let img = gradient(24, 24);
        let params = StickerParams { asset: "smiley".into(), scale: 0.5, position: [0.02, 0.02], jitter: 0.0 };
        let out = apply_artifact(&img, &spec(ArtifactParams::Sticker(params)), 0).unwrap();
        assert!(out.max_abs_diff(&img) > 0.0);
        // far corner untouched
        assert_eq!(out.pixel(23, 23), img.pixel(23, 23));
    }

    #[test]
    fn glass_is_identity_without_displacement_or_blur() {
        let img = gradient(8, 12);
        let params = GlassParams { flute_width: 4, amplitude: 0.0, blur_radius: 0 };
        let out = apply_artifact(&img, &spec(ArtifactParams::Glass(params)), 0).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-15);
        let params = GlassParams { flute_width: 4, amplitude: 1.5, blur_radius: 1 };
        let out = apply_artifact(&img, &spec(ArtifactParams::Glass(params)), 0).unwrap();
        assert!(out.max_abs_diff(&img) > 0.01);
    }

    #[test]
    fn external_noise_is_clamped_and_dimension_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.bnz");
        NoiseMap { height: 2, width: 2, values: vec![0.5; 12] }.save(&path).unwrap();
        let img = ImageTensor::filled(2, 2, [0.2; 3]).unwrap();
        let s = spec(ArtifactParams::ExternalNoise(ExternalNoiseParams { path: path.clone(), epsilon: 0.1 }));
        let out = apply_artifact(&img, &s, 0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let big = ImageTensor::filled(3, 2, [0.2; 3]).unwrap();
        assert!(matches!(apply_artifact(&big, &s, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn tiny_glyphs_are_rejected() {
        let img = ImageTensor::filled(16, 16, [1.0; 3]).unwrap();
        let s = spec(ArtifactParams::Watermark(wm("A", 0.0, 1.0, 0.2)));
        assert!(apply_artifact(&img, &s, 0).is_err());
    }

    #[test]
    fn json_schema_per_kind() {
        let s = spec(ArtifactParams::RedCircle(RedCircleParams {
            center: [0.5, 0.4],
            radius: 0.2,
            stroke: 3.0,
            color: red(),
            opacity: 1.0,
            jitter: 0.1,
        }));
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"kind\":\"red_circle\""));
        assert_eq!(ArtifactSpec::from_json(&json).unwrap(), s);
        let minimal = r#"{"artifact_id":"rc","kind":"red_circle","center":[0.5,0.5],"radius":0.3,"stroke":2}"#;
        let parsed = ArtifactSpec::from_json(minimal).unwrap();
        assert_eq!(parsed.kind(), "red_circle");
        assert!(ArtifactSpec::from_json(r#"{"artifact_id":"x","kind":"laser"}"#).is_err());
    }
}
