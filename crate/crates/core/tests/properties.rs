use proptest::prelude::*;

use blemish_core::artifact::{apply_artifact, ArtifactParams, ArtifactSpec, FontFace, GlassParams, RedCircleParams, StickerParams, WatermarkParams};
use blemish_core::corpus::split_subjects;
use blemish_core::dataset::{build_dataset, kept_count, SubjectSet};
use blemish_core::diffusion::*;
use blemish_core::embed::{cosine, FeatureEmbedder, OracleEmbedder};
use blemish_core::image::ImageTensor;
use blemish_core::rng;
use rand::Rng as _;

const SIZE: usize = 40;

fn random_image(seed: u64, size: usize) -> ImageTensor {
    let mut r = rng::stream(seed);
    ImageTensor::new(size, size, (0..size * size * 3).map(|_| r.gen::<f64>()).collect()).unwrap()
}

fn color() -> impl Strategy<Value = [f64; 3]> {
    [0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0]
}

fn watermark() -> impl Strategy<Value = ArtifactParams> {
    (
        "[A-Z0-9]{1,6}",
        prop_oneof![Just(FontFace::Block), Just(FontFace::Bold), Just(FontFace::Slant)],
        0.1f64..0.3,
        -90.0f64..90.0,
        color(),
        0.05f64..=1.0,
        1u32..4,
        1u32..4,
    )
        .prop_map(|(text, font, glyph_height, rotation, color, opacity, tile_rows, tile_cols)| {
            ArtifactParams::Watermark(WatermarkParams { text, font, glyph_height, rotation, color, opacity, tile_rows, tile_cols })
        })
}

fn red_circle() -> impl Strategy<Value = ArtifactParams> {
    ([0.1f64..0.9, 0.1f64..0.9], 0.05f64..0.6, 0.5f64..4.0, color(), 0.05f64..=1.0, 0.0f64..0.3)
        .prop_map(|(center, radius, stroke, color, opacity, jitter)| ArtifactParams::RedCircle(RedCircleParams { center, radius, stroke, color, opacity, jitter }))
}

fn sticker() -> impl Strategy<Value = ArtifactParams> {
    let assets: Vec<String> = blemish_core::artifact::sprite::asset_ids().map(str::to_string).collect();
    (proptest::sample::select(assets), 0.1f64..0.8, [0.05f64..0.95, 0.05f64..0.95])
        .prop_map(|(asset, scale, position)| ArtifactParams::Sticker(StickerParams { asset, scale, position, jitter: 0.0 }))
}

fn glass() -> impl Strategy<Value = ArtifactParams> {
    (2u32..12, 0.0f64..6.0, 0u32..3).prop_map(|(flute_width, amplitude, blur_radius)| ArtifactParams::Glass(GlassParams { flute_width, amplitude, blur_radius }))
}

fn any_artifact() -> impl Strategy<Value = ArtifactSpec> {
    prop_oneof![watermark(), red_circle(), sticker(), glass()].prop_map(|params| ArtifactSpec { artifact_id: "a".into(), params })
}

/// Pixels an overlay touches, found on a canvas that differs from `rgb` by at least 0.5 per channel.
fn support(params: &ArtifactParams, rgb: [f64; 3], seed: u64) -> Vec<bool> {
    let canvas = ImageTensor::filled(SIZE, SIZE, rgb.map(|c| if c < 0.5 { 1.0 } else { 0.0 })).unwrap();
    let spec = ArtifactSpec { artifact_id: "a".into(), params: params.clone() };
    let out = apply_artifact(&canvas, &spec, seed).unwrap();
    (0..SIZE * SIZE).map(|p| (0..3).any(|c| out.data()[p * 3 + c] != canvas.data()[p * 3 + c])).collect()
}

fn changed(a: &ImageTensor, b: &ImageTensor) -> Vec<bool> {
    (0..a.height() * a.width()).map(|p| (0..3).any(|c| a.data()[p * 3 + c].to_bits() != b.data()[p * 3 + c].to_bits())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn artifacts_are_deterministic_and_in_range(spec in any_artifact(), img_seed in any::<u64>(), seed in any::<u64>()) {
        let img = random_image(img_seed, SIZE);
        let a = apply_artifact(&img, &spec, seed).unwrap();
        let b = apply_artifact(&img, &spec, seed).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!((a.height(), a.width()), (SIZE, SIZE));
    }

    #[test]
    fn overlays_leave_pixels_outside_their_support_untouched(
        params in prop_oneof![watermark(), red_circle()],
        img_seed in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let rgb = match &params {
            ArtifactParams::Watermark(p) => p.color,
            ArtifactParams::RedCircle(p) => p.color,
            _ => unreachable!(),
        };
        let mask = support(&params, rgb, seed);
        let img = random_image(img_seed, SIZE);
        let out = apply_artifact(&img, &ArtifactSpec { artifact_id: "a".into(), params }, seed).unwrap();
        for (p, moved) in changed(&img, &out).into_iter().enumerate() {
            prop_assert!(!moved || mask[p], "pixel {} changed outside the overlay", p);
        }
    }

    #[test]
    fn stickers_stay_inside_their_square(params in sticker(), img_seed in any::<u64>(), seed in any::<u64>()) {
        let ArtifactParams::Sticker(p) = &params else { unreachable!() };
        let edge = p.scale * SIZE as f64;
        let (cx, cy) = (p.position[0] * SIZE as f64, p.position[1] * SIZE as f64);
        let img = random_image(img_seed, SIZE);
        let out = apply_artifact(&img, &ArtifactSpec { artifact_id: "a".into(), params: params.clone() }, seed).unwrap();
        for (i, moved) in changed(&img, &out).into_iter().enumerate() {
            let (y, x) = ((i / SIZE) as f64 + 0.5, (i % SIZE) as f64 + 0.5);
            let inside = (x - cx).abs() <= edge / 2.0 + 1.0 && (y - cy).abs() <= edge / 2.0 + 1.0;
            prop_assert!(!moved || inside, "pixel ({}, {}) changed outside the sprite", x, y);
        }
    }

    #[test]
    fn paired_dataset_counts_and_ratio(
        n in 1usize..4,
        l in 1usize..4,
        m in 1usize..6,
        ratio in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let (subjects, _) = split_subjects(n, 0, seed);
        let clean: Vec<SubjectSet> = subjects.iter().map(|s| s.photos(m, 16, seed).unwrap()).collect();
        let artifacts: Vec<ArtifactSpec> = (0..l)
            .map(|k| ArtifactSpec {
                artifact_id: format!("c{k}"),
                params: ArtifactParams::RedCircle(RedCircleParams { center: [0.5, 0.5], radius: 0.3, stroke: 2.0, color: [1.0, 0.0, 0.0], opacity: 1.0, jitter: 0.1 }),
            })
            .collect();
        let ds = build_dataset(&clean, &artifacts, ratio, seed).unwrap();
        prop_assert_eq!(ds.blemished.len(), n * l);
        let expected = (ratio * m as f64 + 0.5).floor() as usize;
        prop_assert_eq!(kept_count(ratio, m), expected);
        for s in &clean {
            for a in &artifacts {
                let b = ds.subset(&s.subject_id, &a.artifact_id).unwrap();
                prop_assert_eq!(b.len(), s.len());
                let same = b.images.iter().zip(&s.images).filter(|(x, y)| x.to_bytes() == y.to_bytes()).count();
                prop_assert_eq!(same, expected);
            }
        }
    }

    #[test]
    fn schedules_decrease_inside_the_unit_interval(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let hi = (lo + span).min(0.999);
        let s = make_schedule(steps, lo, hi).unwrap();
        prop_assert_eq!(s.len(), steps);
        prop_assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
        prop_assert!(s.alpha_bar(0).unwrap() >= 1.0 - lo - 1e-15);
        let mut prev = 1.0;
        for t in 0..steps {
            let a = s.alpha_bar(t).unwrap();
            prop_assert!(a > 0.0 && a < prev);
            prev = a;
        }
    }

    #[test]
    fn q_sample_is_linear(a in -5.0f64..5.0, t in 0usize..100, seed in any::<u64>()) {
        let s = ScheduleSpec::default().build().unwrap();
        let mut r = rng::stream(seed);
        let z0 = LatentTensor::from_vec(3, 2, 4, rng::normals(&mut r, 24)).unwrap();
        let eps = LatentTensor::from_vec(3, 2, 4, rng::normals(&mut r, 24)).unwrap();
        let lhs = q_sample(&z0.scaled(a), t, &eps.scaled(a), &s).unwrap();
        let rhs = q_sample(&z0, t, &eps, &s).unwrap().scaled(a);
        for (x, y) in lhs.data.iter().zip(rhs.data.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn zero_value_weights_make_output_ignore_text(seed in any::<u64>(), t in 0usize..100) {
        let vocab = Vocabulary::toy();
        let cfg = DenoiserConfig { latent_channels: 3, width: 4, inner_width: 6, attn_dim: 4, heads: 2, text_dim: 6, seq_len: 10, text_mixing: true };
        let mut params = DenoiserParams::init(cfg, vocab.len(), seed).unwrap();
        for i in params.ids_with(Partition::Value) {
            params.tensors[i].value.fill(0.0);
        }
        let mut r = rng::stream(seed ^ 1);
        let z = LatentTensor::from_vec(8, 8, 3, rng::normals(&mut r, 192)).unwrap();
        let y = |prompt: &str| {
            let tokens = text::padded(&vocab.tokenize(prompt).unwrap(), 10, vocab.pad_id()).unwrap();
            text::encode(&params, &tokens, &SlotValues::new()).unwrap()
        };
        let a = params.denoise(&z, t, &y("a photo of red circle")).unwrap();
        let b = params.denoise(&z, t, &y("a photo of blue square in the snow")).unwrap();
        prop_assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn every_parameter_sits_in_exactly_one_partition(
        half_width in 1usize..4,
        inner in 2usize..8,
        heads in 1usize..3,
        head_dim in 1usize..4,
        half_text in 1usize..5,
        mixing in any::<bool>(),
    ) {
        let (width, text_dim) = (2 * half_width, 2 * half_text);
        let vocab = Vocabulary::toy();
        let cfg = DenoiserConfig { latent_channels: 3, width, inner_width: inner, attn_dim: heads * head_dim, heads, text_dim, seq_len: 10, text_mixing: mixing };
        let params = DenoiserParams::init(cfg, vocab.len(), 1).unwrap();
        let mut seen = vec![0usize; params.tensors.len()];
        for tag in Partition::ALL {
            for i in params.ids_with(tag) {
                seen[i] += 1;
                prop_assert_eq!(params.tensors[i].tag, tag);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(params.registry().len(), params.tensors.len());
        for i in params.ids_with(Partition::Key).into_iter().chain(params.ids_with(Partition::Value)) {
            prop_assert_eq!(params.tensors[i].value.nrows(), text_dim);
        }
    }

    #[test]
    fn oracle_is_stable_under_quantization_noise(img_seed in any::<u64>(), noise_seed in any::<u64>()) {
        let img = random_image(img_seed, 32);
        let mut r = rng::stream(noise_seed);
        let shaken = ImageTensor::from_clipped(32, 32, img.data().iter().map(|v| v + r.gen_range(-1.0..=1.0) / 255.0).collect()).unwrap();
        let v = OracleEmbedder::default().embed_images(&[img, shaken]).unwrap();
        let d: f64 = v[0].values().iter().zip(v[1].values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        prop_assert!(d < 0.05, "moved {}", d);
    }
}

#[test]
fn long_schedule_products_hold_in_extended_precision() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut acc = 1.0f64;
    let mut comp = 0.0f64;
    for t in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 999.0;
        let a = 1.0 - beta;
        let hi = acc * a;
        let lo = acc.mul_add(a, -hi) + comp * a;
        acc = hi + lo;
        comp = lo - (acc - hi);
        let got = s.alpha_bar(t).unwrap();
        assert!((got - acc).abs() <= 1e-12 * acc, "t={t}: {got} vs {acc}");
    }
    assert!((s.alpha_bar(999).unwrap() - 4.0358e-5).abs() < 1e-8);
}

#[test]
fn oracle_separates_subjects() {
    let (subjects, _) = split_subjects(6, 0, 3);
    let oracle = OracleEmbedder::default();
    let per: Vec<Vec<_>> = subjects.iter().map(|s| oracle.embed_images(&s.photos(4, 32, 9).unwrap().images).unwrap()).collect();
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
    for (i, a) in per.iter().enumerate() {
        for (j, b) in per.iter().enumerate() {
            for (p, x) in a.iter().enumerate() {
                for (q, y) in b.iter().enumerate() {
                    if i == j && p == q {
                        continue;
                    }
                    let c = cosine(x, y).unwrap();
                    if i == j {
                        within += c;
                        nw += 1;
                    } else {
                        between += c;
                        nb += 1;
                    }
                }
            }
        }
    }
    assert!(within / nw as f64 > between / nb as f64);
}
