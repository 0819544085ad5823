//! Synthetic corpus of coloured shapes in simple scenes.
//!
//! Shapes and colours are the "classes" the base model learns from captions;
//! subjects are fixed (shape, colour, size) combinations photographed at a few
//! positions on a plain background.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::artifact::{composite, ArtifactParams, ArtifactSpec, FontFace, WatermarkParams};
use crate::dataset::SubjectSet;
use crate::error::Result;
use crate::image::ImageTensor;
use crate::{rng, seed};

pub const SHAPES: [&str; 8] = ["square", "circle", "triangle", "diamond", "cross", "ring", "bar", "star"];

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.12, 0.1]),
    ("green", [0.12, 0.7, 0.2]),
    ("blue", [0.15, 0.3, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("cyan", [0.1, 0.8, 0.85]),
    ("magenta", [0.85, 0.15, 0.75]),
    ("orange", [0.98, 0.55, 0.05]),
    ("purple", [0.45, 0.15, 0.6]),
];

/// Scene contexts: phrase appended to prompts and the keyword naming it.
pub const CONTEXTS: [(&str, &str); 7] = [
    ("on a table", "table"),
    ("in the snow", "snow"),
    ("on the grass", "grass"),
    ("at night", "night"),
    ("on the beach", "beach"),
    ("under the sky", "sky"),
    ("near a wall", "wall"),
];

pub const PLAIN_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

/// Generic word standing for any shape; initial point for learned embeddings.
pub const COARSE_CLASS_WORD: &str = "shape";
pub const WATERMARK_WORD: &str = "watermark";

/// All base words the toy text encoder knows.
pub fn vocabulary_words() -> Vec<String> {
    let mut words: Vec<String> = ["<pad>", "a", "photo", "of", COARSE_CLASS_WORD, "with", WATERMARK_WORD]
        .iter()
        .map(|s| s.to_string())
        .collect();
    words.extend(COLORS.iter().map(|(c, _)| c.to_string()));
    words.extend(SHAPES.iter().map(|s| s.to_string()));
    for (phrase, _) in CONTEXTS {
        for w in phrase.split_whitespace() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    }
    words
}

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(c, _)| *c == name).map(|(_, rgb)| *rgb)
}

/// Background colour of context `ctx` (`None` = plain) at normalized height `v`.
pub fn background(ctx: Option<usize>, x: usize, y: usize, h: usize) -> [f64; 3] {
    let v = (y as f64 + 0.5) / h as f64;
    match ctx {
        None => PLAIN_BACKGROUND,
        Some(0) => if v > 0.62 { [0.55, 0.36, 0.2] } else { [0.78, 0.75, 0.7] },
        Some(1) => [0.94, 0.96, 0.98],
        Some(2) => if v > 0.6 { [0.25, 0.6, 0.2] } else { [0.75, 0.85, 0.95] },
        Some(3) => [0.06, 0.07, 0.2],
        Some(4) => if v > 0.6 { [0.92, 0.82, 0.55] } else { [0.45, 0.7, 0.95] },
        Some(5) => [0.5, 0.75, 0.98],
        Some(_) => {
            // bricks 8 px tall, 16 px wide, staggered
            let row = y / 8;
            let xo = (x + if row % 2 == 0 { 0 } else { 8 }) % 16;
            if y % 8 == 7 || xo == 15 { [0.85, 0.82, 0.78] } else { [0.65, 0.3, 0.22] }
        }
    }
}

/// Whether point `(dx, dy)` relative to the centre lies inside `shape` of radius `r`.
pub fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        1 => d <= r,
        2 => {
            // upward equilateral triangle inscribed in radius r
            let (ax, ay, bx, by, cx, cy) = (0.0, -r, -0.866 * r, 0.5 * r, 0.866 * r, 0.5 * r);
            let s = |px: f64, py: f64, qx: f64, qy: f64| (dx - qx) * (py - qy) - (px - qx) * (dy - qy);
            let (d1, d2, d3) = (s(ax, ay, bx, by), s(bx, by, cx, cy), s(cx, cy, ax, ay));
            !((d1 < 0.0 || d2 < 0.0 || d3 < 0.0) && (d1 > 0.0 || d2 > 0.0 || d3 > 0.0))
        }
        3 => dx.abs() + dy.abs() <= r,
        4 => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        5 => d <= r && d >= 0.55 * r,
        6 => dx.abs() <= r && dy.abs() <= 0.35 * r,
        _ => {
            // five-pointed star via polygon winding
            let pts: Vec<(f64, f64)> = (0..10)
                .map(|i| {
                    let rr = if i % 2 == 0 { r } else { 0.45 * r };
                    let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
                    (rr * a.cos(), rr * a.sin())
                })
                .collect();
            let mut inside = false;
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let ((xi, yi), (xj, yj)) = (pts[i], pts[j]);
                if (yi > dy) != (yj > dy) && dx < (xj - xi) * (dy - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            inside
        }
    }
}

/// Parameters of one rendered scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub shape: usize,
    pub color: [f64; 3],
    pub context: Option<usize>,
    /// Centre as fractions of the frame.
    pub center: [f64; 2],
    /// Radius as a fraction of the frame.
    pub radius: f64,
}

/// Renders a scene with 2×2 supersampling, quantized to 8 bits.
pub fn render(scene: &Scene, size: usize) -> ImageTensor {
    let mut data = vec![0.0; size * size * 3];
    let (cx, cy) = (scene.center[0] * size as f64, scene.center[1] * size as f64);
    let r = scene.radius * size as f64;
    for y in 0..size {
        for x in 0..size {
            let bg = background(scene.context, x, y, size);
            let mut cover = 0.0;
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if inside(scene.shape, x as f64 + sx - cx, y as f64 + sy - cy, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                data[(y * size + x) * 3 + c] = bg[c] * (1.0 - cover) + scene.color[c] * cover;
            }
        }
    }
    ImageTensor::from_clipped(size, size, data).expect("valid dimensions").quantized()
}

/// Canonical white-on-black rendering of a shape, used to build text features.
pub fn canonical_shape(shape: usize, size: usize) -> ImageTensor {
    let mut img = render(
        &Scene { shape, color: [1.0; 3], context: None, center: [0.5, 0.5], radius: 0.3 },
        size,
    );
    // replace the plain grey with black
    let data: Vec<f64> = img
        .data()
        .chunks(3)
        .flat_map(|p| {
            let cover = (p[0] - PLAIN_BACKGROUND[0]) / (1.0 - PLAIN_BACKGROUND[0]);
            [cover; 3]
        })
        .collect();
    img = ImageTensor::from_clipped(size, size, data).expect("valid dimensions");
    img
}

/// Canonical empty scene for a context.
pub fn canonical_context(ctx: usize, size: usize) -> ImageTensor {
    let data = (0..size * size)
        .flat_map(|i| background(Some(ctx), i % size, i / size, size))
        .collect();
    ImageTensor::from_clipped(size, size, data).expect("valid dimensions")
}

/// A fixed subject identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySubject {
    pub shape: usize,
    pub color: usize,
}

impl ToySubject {
    pub fn id(&self) -> String {
        format!("{}-{}", COLORS[self.color].0, SHAPES[self.shape])
    }

    pub fn class_phrase(&self) -> String {
        format!("{} {}", COLORS[self.color].0, SHAPES[self.shape])
    }

    /// `count` photos with jittered position and size on the plain background.
    pub fn photos(&self, count: usize, size: usize, seed: u64) -> Result<SubjectSet> {
        let mut rng = rng::stream(seed!(seed, "subject", &self.id()));
        let images = (0..count)
            .map(|_| {
                render(
                    &Scene {
                        shape: self.shape,
                        color: COLORS[self.color].1,
                        context: None,
                        center: [0.5 + rng.gen_range(-0.08..0.08), 0.5 + rng.gen_range(-0.08..0.08)],
                        radius: 0.24 * rng.gen_range(0.92..1.08),
                    },
                    size,
                )
            })
            .collect();
        Ok(SubjectSet::new(self.id(), images)?
            .with_label("class_phrase", self.class_phrase())
            .with_label("shape", SHAPES[self.shape])
            .with_label("color", COLORS[self.color].0))
    }
}

/// Deterministic disjoint train/test subject split over all shape×colour pairs.
///
/// Test subjects are chosen so that every shape and colour still appears in training.
pub fn split_subjects(n_train: usize, n_test: usize, seed: u64) -> (Vec<ToySubject>, Vec<ToySubject>) {
    let mut all: Vec<ToySubject> = (0..SHAPES.len())
        .flat_map(|shape| (0..COLORS.len()).map(move |color| ToySubject { shape, color }))
        .collect();
    all.shuffle(&mut rng::stream(seed!(seed, "subject-split")));
    let test: Vec<ToySubject> = all.iter().copied().take(n_test).collect();
    let train = all.into_iter().skip(n_test).take(n_train).collect();
    (train, test)
}

const WATERMARK_TEXTS: [&str; 12] = [
    "STOCK", "PHOTO", "SAMPLE", "COPY", "DEMO", "WM", "PROOF", "DRAFT", "@ME", "2024", "PREVIEW", "LOGO",
];

const WATERMARK_COLORS: [[f64; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [0.05, 0.05, 0.05],
    [1.0, 0.95, 0.2],
    [0.2, 0.9, 1.0],
    [1.0, 0.3, 0.6],
    [0.6, 0.6, 0.6],
];

/// Draws a random visible watermark from the same family used for training artifacts.
pub fn random_watermark(id: &str, rng: &mut rng::Rng) -> ArtifactSpec {
    let rotations = [-45.0, -30.0, 0.0, 30.0, 45.0];
    ArtifactSpec {
        artifact_id: id.into(),
        params: ArtifactParams::Watermark(WatermarkParams {
            text: WATERMARK_TEXTS.choose(rng).unwrap().to_string(),
            font: *FontFace::ALL.choose(rng).unwrap(),
            glyph_height: [0.1, 0.125, 0.15][rng.gen_range(0..3)],
            rotation: *rotations.choose(rng).unwrap(),
            color: *WATERMARK_COLORS.choose(rng).unwrap(),
            opacity: [0.6, 0.75, 0.9][rng.gen_range(0..3)],
            tile_rows: rng.gen_range(2..=4),
            tile_cols: rng.gen_range(1..=3),
        }),
    }
}

/// One pretraining example: image plus caption.
#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub image: ImageTensor,
    pub caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub image_size: usize,
    /// Probability that a scene has a context background.
    pub context_prob: f64,
    /// Probability that a scene carries a random watermark.
    pub watermark_prob: f64,
    /// Mention watermarks in captions.
    pub caption_watermarks: bool,
    /// Probability of omitting the colour word.
    pub drop_color_prob: f64,
    /// Probability of replacing the shape word by the coarse class word.
    pub coarse_word_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            context_prob: 0.6,
            watermark_prob: 0.3,
            caption_watermarks: true,
            drop_color_prob: 0.1,
            coarse_word_prob: 0.1,
        }
    }
}

/// Draws one captioned scene.
pub fn sample_captioned(cfg: &CorpusConfig, rng: &mut rng::Rng) -> Result<CaptionedImage> {
    let shape = rng.gen_range(0..SHAPES.len());
    let color = rng.gen_range(0..COLORS.len());
    let context = rng.gen_bool(cfg.context_prob).then(|| rng.gen_range(0..CONTEXTS.len()));
    let scene = Scene {
        shape,
        color: COLORS[color].1,
        context,
        center: [0.5 + rng.gen_range(-0.1..0.1), 0.5 + rng.gen_range(-0.1..0.1)],
        radius: rng.gen_range(0.18..0.28),
    };
    let mut image = render(&scene, cfg.image_size);
    let watermarked = rng.gen_bool(cfg.watermark_prob);
    if watermarked {
        let spec = random_watermark("pretrain", rng);
        let s = rng.gen();
        image = composite(&image, &spec.params, s)?.quantized();
    }
    let mut words = vec!["a", "photo", "of"];
    if !rng.gen_bool(cfg.drop_color_prob) {
        words.push(COLORS[color].0);
    }
    words.push(if rng.gen_bool(cfg.coarse_word_prob) { COARSE_CLASS_WORD } else { SHAPES[shape] });
    if watermarked && cfg.caption_watermarks {
        words.extend(["with", WATERMARK_WORD]);
    }
    if let Some(c) = context {
        words.extend(CONTEXTS[c].0.split_whitespace());
    }
    Ok(CaptionedImage { image, caption: words.join(" ") })
}
