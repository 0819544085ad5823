//! Acceptance run: one pass/fail line per criterion.
//!
//! `cargo test -p blemish-core --test acceptance -- AC-3 AC-4` runs a subset.
//! Failures are reported but only change the exit status with `ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array1;

use blemish_core::corpus::{random_watermark, split_subjects, ToySubject};
use blemish_core::dataset::{build_dataset, PairedDataset, SubjectSet};
use blemish_core::diffusion::*;
use blemish_core::digest::json_hash;
use blemish_core::embed::{FeatureEmbedder, OracleEmbedder};
use blemish_core::eval::{image_similarity, ratio, ratio_metrics, text_similarity, MetricReport};
use blemish_core::experiment::{method_tag, run_experiment, ExperimentConfig, VANILLA_TAG};
use blemish_core::image::ImageTensor;
use blemish_core::inversion::{EmbeddingBank, InversionConfig, LearnedEmbedding, Provenance};
use blemish_core::rectify::{artifade_loss, init_phi, rectify_train, GenerationConfig, RectifyConfig, TrainablePartition, Variant};
use blemish_core::rng::{self, Rng};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(budget: Duration, started: Instant, detail: String) -> Outcome {
    let took = started.elapsed();
    if took > budget {
        Err(format!("{detail}; took {took:.1?}, budget {budget:?}"))
    } else {
        Ok(detail)
    }
}

// ---------------------------------------------------------------- fixtures

fn mini_config() -> DenoiserConfig {
    DenoiserConfig { latent_channels: 3, width: 4, inner_width: 6, attn_dim: 4, heads: 2, text_dim: 6, seq_len: 10, text_mixing: true }
}

fn mini_base(seed: u64) -> ModelCheckpoint {
    let vocab = Vocabulary::toy();
    let params = DenoiserParams::init(mini_config(), vocab.len(), seed).unwrap();
    ModelCheckpoint {
        params,
        vocab,
        schedule: ScheduleSpec { steps: 20, beta_min: 1e-3, beta_max: 0.2 },
        autoencoder: Autoencoder::Identity,
        slots: SlotValues::new(),
        meta: CheckpointMeta {
            kind: CheckpointKind::Base,
            variant: None,
            steps: 0,
            base_hash: None,
            config_hash: String::new(),
            rng: None,
            losses: vec![],
        },
    }
}

fn random_image(r: &mut Rng, size: usize) -> ImageTensor {
    ImageTensor::new(size, size, (0..size * size * 3).map(|_| r.gen::<f64>()).collect()).unwrap()
}

fn random_vector(r: &mut Rng, dim: usize) -> Array1<f64> {
    Array1::from(rng::normals(r, dim))
}

fn embedding(slot: &str, vector: Array1<f64>, subject: &str, artifact: Option<&str>) -> LearnedEmbedding {
    LearnedEmbedding {
        vector,
        slot: slot.into(),
        provenance: Provenance {
            subject_id: subject.into(),
            artifact_id: artifact.map(str::to_string),
            steps: 0,
            lr: 0.0,
            seed: 0,
            prompt: String::new(),
        },
    }
}

fn random_dataset(seed: u64, size: usize) -> (PairedDataset, EmbeddingBank) {
    let mut r = rng::stream(seed);
    let (subjects, _) = split_subjects(3, 0, seed);
    let sets: Vec<SubjectSet> = subjects.iter().map(|s| s.photos(2, size, seed).unwrap()).collect();
    let artifacts: Vec<_> = (0..2).map(|i| random_watermark(&format!("wm-{i}"), &mut r)).collect();
    let dataset = build_dataset(&sets, &artifacts, 0.0, seed).unwrap();
    let mut bank = EmbeddingBank::default();
    for (subject, artifact) in dataset.blemished.keys() {
        let v = random_vector(&mut r, mini_config().text_dim);
        bank.entries.insert((subject.clone(), artifact.clone()), embedding(SUBJECT_SLOT, v, subject, Some(artifact)));
    }
    (dataset, bank)
}

// ---------------------------------------------------------------- AC-1

fn ac1() -> Outcome {
    let started = Instant::now();
    let base = mini_base(11);
    let (dataset, bank) = random_dataset(12, 40);
    let mut notes = Vec::new();
    for variant in Variant::ALL {
        let cfg = RectifyConfig { variant, steps: 10, batch_size: 2, lr_phi: 1e-2, lr_weights: 1e-2, seed: 13, ..RectifyConfig::default() };
        let out = rectify_train(&cfg, &base, &dataset, &bank, &mut |_, _| {}).map_err(|e| format!("{variant}: {e}"))?;
        let inside = TrainablePartition::of(variant).partitions();
        let mut moved = 0;
        for t in &base.params.tensors {
            let after = out.checkpoint.params.get(&t.name);
            if inside.contains(&t.tag) {
                let norm = (after - &t.value).mapv(|d| d * d).sum().sqrt();
                if !(norm > 0.0) {
                    return Err(format!("{variant}: trainable {} did not move", t.name));
                }
                moved += 1;
            } else if !base.params.bit_identical(&out.checkpoint.params, &t.name) {
                return Err(format!("{variant}: frozen {} changed", t.name));
            }
        }
        match (variant.uses_phi(), &out.phi) {
            (true, Some(phi)) => {
                let start = init_phi(&base, &cfg).unwrap();
                if !((&phi.vector - &start).mapv(f64::abs).sum() > 0.0) {
                    return Err(format!("{variant}: artifact-free vector did not move"));
                }
            }
            (false, None) => {}
            _ => return Err(format!("{variant}: artifact-free vector presence does not match the variant")),
        }
        notes.push(format!("{variant}:{moved} moved"));
    }
    within(Duration::from_secs(60), started, format!("frozen tensors bit-identical; {}", notes.join(", ")))
}

// ---------------------------------------------------------------- AC-2

fn ac2() -> Outcome {
    let started = Instant::now();
    let mut r = rng::stream(21);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let base = mini_base(100 + i / 10);
        let sched = base.schedule.build().unwrap();
        let dt = base.params.config.text_dim;
        let image = random_image(&mut r, 8);
        let v = embedding(SUBJECT_SLOT, random_vector(&mut r, dt), "s", Some("a"));
        let phi = embedding(PHI_SLOT, random_vector(&mut r, dt), "*", None);
        let seed: u64 = r.gen();
        let ours = artifade_loss(&base, &image, &v, Some(&phi), &sched, &mut rng::stream(seed)).map_err(|e| e.to_string())?;

        // Reference: explicit prompt text, explicit slot map, plain conditioning path.
        let tokens = text::padded(&base.vocab.tokenize("a <phi> photo of <v>").unwrap(), 10, base.vocab.pad_id()).unwrap();
        let mut slots = SlotValues::new();
        slots.insert("<v>".into(), v.vector.clone());
        slots.insert("<phi>".into(), phi.vector.clone());
        let y = text::encode(&base.params, &tokens, &slots).unwrap();
        let z0 = base.autoencoder.encode(&image).unwrap();
        let reference = ldm_loss(&base.params, &[z0], &y, &sched, &mut rng::stream(seed)).unwrap();
        if ours.to_bits() != reference.to_bits() {
            return Err(format!("instance {i}: {ours:e} vs {reference:e}"));
        }
        worst = worst.max((ours - reference).abs());
    }
    within(Duration::from_secs(60), started, format!("100/100 bit-identical (max diff {worst:e})"))
}

// ---------------------------------------------------------------- AC-3

fn ac3() -> Outcome {
    let started = Instant::now();
    let mut base = mini_base(31);
    let sched = base.schedule.build().unwrap();
    let mut r = rng::stream(32);
    let dt = base.params.config.text_dim;
    let z0 = LatentTensor::from_vec(8, 8, 3, rng::normals(&mut r, 192)).unwrap();
    let tokens = text::padded(&base.vocab.tokenize("a <phi> photo of <v>").unwrap(), 10, base.vocab.pad_id()).unwrap();
    let mut slots = SlotValues::new();
    slots.insert(SUBJECT_SLOT.into(), random_vector(&mut r, dt));
    slots.insert(PHI_SLOT.into(), random_vector(&mut r, dt));
    let noise_seed = 33;
    let loss = |p: &DenoiserParams, s: &SlotValues| -> f64 {
        let ex = Example { z0: &z0, tokens: &tokens, slots: s };
        batch_loss(p, &sched, &[ex], None, &mut rng::stream(noise_seed)).unwrap().0
    };
    let ex = Example { z0: &z0, tokens: &tokens, slots: &slots };
    let grads = batch_loss(&base.params, &sched, &[ex], Some(&GradRequest::all()), &mut rng::stream(noise_seed)).unwrap().1.unwrap();

    let layers = ["xattn1", "xattn2", "xattn3"];
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut counts = BTreeMap::new();
    for probe in 0..50 {
        let target = ["k", "v", "q", PHI_SLOT, SUBJECT_SLOT][probe % 5];
        let (analytic, numeric) = if target.starts_with('<') {
            let j = r.gen_range(0..dt);
            let a = grads.slots[target][j];
            let mut plus = slots.clone();
            plus.get_mut(target).unwrap()[j] += h;
            let mut minus = slots.clone();
            minus.get_mut(target).unwrap()[j] -= h;
            (a, (loss(&base.params, &plus) - loss(&base.params, &minus)) / (2.0 * h))
        } else {
            let name = format!("{}.{target}", layers[r.gen_range(0..3)]);
            let id = base.params.id(&name);
            let (rows, cols) = base.params.get(&name).dim();
            let (i, j) = (r.gen_range(0..rows), r.gen_range(0..cols));
            let a = grads.params[id].as_ref().ok_or(format!("no gradient for {name}"))?[[i, j]];
            let orig = base.params.get(&name)[[i, j]];
            base.params.get_mut(&name)[[i, j]] = orig + h;
            let lp = loss(&base.params, &slots);
            base.params.get_mut(&name)[[i, j]] = orig - h;
            let lm = loss(&base.params, &slots);
            base.params.get_mut(&name)[[i, j]] = orig;
            (a, (lp - lm) / (2.0 * h))
        };
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        if !(rel < 1e-4) {
            return Err(format!("probe {probe} ({target}): analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}"));
        }
        worst = worst.max(rel);
        *counts.entry(target).or_insert(0) += 1;
    }
    within(Duration::from_secs(300), started, format!("50 probes {counts:?}, max rel err {worst:.2e}"))
}

// ---------------------------------------------------------------- AC-4

fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn brute_pair_mean(g: &[Vec<f64>], refs: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for a in g {
        for b in refs {
            s += brute_cosine(a, b);
            n += 1;
        }
    }
    s / n as f64
}

fn ac4() -> Outcome {
    let started = Instant::now();
    let oracle = OracleEmbedder::default();
    let mut r = rng::stream(41);
    let words = ["red", "blue", "square", "circle", "snow", "grass", "photo", "star", "night", "green"];
    let feats = |imgs: &[ImageTensor]| -> Vec<Vec<f64>> { imgs.iter().map(|i| oracle.embed_image(i).unwrap().values().to_vec()).collect() };
    let mut worst = 0.0f64;
    for case in 0..100 {
        let mut draw = |n: usize| -> Vec<ImageTensor> {
            (0..n)
                .map(|_| {
                    let size = [8, 12, 16][r.gen_range(0..3)];
                    random_image(&mut r, size)
                })
                .collect()
        };
        let (ng, nc) = (1 + case % 3, 1 + (case / 3) % 3);
        let generated = draw(ng);
        let clean = draw(nc);
        let blemished = draw(nc);
        let (fg, fc, fb) = (feats(&generated), feats(&clean), feats(&blemished));
        let (i, ib) = (brute_pair_mean(&fg, &fc), brute_pair_mean(&fg, &fb));
        let prompt = format!("a photo of {} {}", words[case % words.len()], words[(case * 7 + 3) % words.len()]);
        let tv = oracle.embed_text(&prompt).unwrap().values().to_vec();
        let t = fg.iter().map(|g| brute_cosine(g, &tv)).sum::<f64>() / fg.len() as f64;

        let sim = image_similarity(&generated, &clean, &oracle).map_err(|e| e.to_string())?;
        let (mi, mib, mr) = ratio_metrics(&generated, &clean, &blemished, &oracle).map_err(|e| e.to_string())?;
        let mt = text_similarity(&generated, &prompt, &oracle).map_err(|e| e.to_string())?;
        for (ours, theirs) in [(sim, i), (mi, i), (mib, ib), (mr, i / ib), (mt, t)] {
            let d = (ours - theirs).abs();
            if !(d <= 1e-12) {
                return Err(format!("case {case}: {ours} vs {theirs}"));
            }
            worst = worst.max(d);
        }
        let (_, _, same) = ratio_metrics(&generated, &clean, &clean, &oracle).unwrap();
        if same != 1.0 {
            return Err(format!("case {case}: R with identical references is {same}"));
        }
    }
    let table = ratio(0.217, 0.2547).unwrap();
    let shown = format!("{table:.3}");
    if shown != "0.852" {
        return Err(format!("0.217 / 0.2547 = {shown}"));
    }
    within(Duration::from_secs(60), started, format!("100 instances, max diff {worst:.1e}; R=1 on identical refs; 0.217/0.2547 -> {shown}"))
}

// ---------------------------------------------------------------- AC-5 / AC-6

const DIRECTIONAL_SEEDS: [u64; 3] = [1, 2, 3];

fn directional_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed, ..ExperimentConfig::default() };
    c.pretrain.steps = 30_000;
    c.pretrain.final_lr_fraction = 0.05;
    c.pretrain.corpus.watermark_prob = 0.4;
    c.pretrain.denoiser = DenoiserConfig { width: 32, inner_width: 64, attn_dim: 32, heads: 2, text_dim: 32, ..DenoiserConfig::default() };
    let inv = InversionConfig { steps: 150, lr: 2e-2, optimizer: OptimizerKind::adam(), ..InversionConfig::default() };
    c.bank_inversion = inv.clone();
    c.test_inversion = inv;
    c.rectify.steps = 600;
    c.rectify.lr_weights = 1e-3;
    c.rectify.lr_phi = 1e-2;
    c.generation = GenerationConfig { samples_per_prompt: 2, ..GenerationConfig::default() };
    c
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Base model for the directional runs, cached by pretraining-config hash.
fn directional_base() -> Result<ModelCheckpoint, String> {
    let cfg = directional_config(0).pretrain;
    let path = cache_dir().join(format!("base-{}.ckpt", &json_hash(&cfg)[..16]));
    if let Ok(ck) = ModelCheckpoint::load(&path) {
        return Ok(ck);
    }
    eprintln!("  pretraining base model ({} steps), cached at {}", cfg.steps, path.display());
    let ck = pretrain(&cfg, &mut |_, _| {}).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(cache_dir()).map_err(|e| e.to_string())?;
    ck.save(&path).map_err(|e| e.to_string())?;
    Ok(ck)
}

/// Seed-averaged oracle aggregates per method tag: `(I, R, T)`.
type Means = BTreeMap<String, (f64, f64, f64)>;

fn directional_means() -> &'static Result<(Means, Vec<Vec<MetricReport>>), String> {
    static CELL: OnceLock<Result<(Means, Vec<Vec<MetricReport>>), String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = directional_base()?;
        let oracle = OracleEmbedder::default();
        let mut all = Vec::new();
        let mut sums: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
        for seed in DIRECTIONAL_SEEDS {
            let t0 = Instant::now();
            let out = run_experiment(&directional_config(seed), Some(&base), &[&oracle as &dyn FeatureEmbedder], &mut |_| {}).map_err(|e| e.to_string())?;
            for rep in &out.reports {
                if !rep.failures.is_empty() {
                    return Err(format!("seed {seed}: {} failed cases for {}", rep.failures.len(), rep.method));
                }
                let m = rep.aggregate.get("oracle").ok_or("missing oracle aggregate")?;
                let e = sums.entry(rep.method.clone()).or_default();
                e.0 += m.i;
                e.1 += m.r;
                e.2 += m.t.ok_or("missing text similarity")?;
            }
            eprintln!("  seed {seed} done in {:.0?}", t0.elapsed());
            std::fs::create_dir_all(cache_dir()).ok();
            std::fs::write(cache_dir().join(format!("reports-seed{seed}.json")), serde_json::to_vec_pretty(&out.reports).unwrap()).ok();
            all.push(out.reports);
        }
        let n = DIRECTIONAL_SEEDS.len() as f64;
        let means = sums.into_iter().map(|(k, (i, r, t))| (k, (i / n, r / n, t / n))).collect();
        Ok((means, all))
    })
}

fn ac5() -> Outcome {
    let (means, _) = directional_means().as_ref().map_err(Clone::clone)?;
    let (_, r_van, t_van) = means[VANILLA_TAG];
    let (_, r_full, t_full) = means[&method_tag(Variant::Full)];
    let detail = format!("R full {r_full:.4} vs vanilla {r_van:.4} (diff {:+.4}); T full {t_full:.4} vs vanilla {t_van:.4}", r_full - r_van);
    check(r_full > r_van && r_full - r_van >= 0.05 && r_full > 1.0 && t_full >= t_van, detail)
}

fn ac6() -> Outcome {
    let (means, _) = directional_means().as_ref().map_err(Clone::clone)?;
    let i_of = |v: Variant| means[&method_tag(v)].0;
    let lowest = Variant::ALL.iter().copied().min_by(|a, b| i_of(*a).total_cmp(&i_of(*b))).unwrap();
    let (t_full, t_kv) = (means[&method_tag(Variant::Full)].2, means[&method_tag(Variant::KvOnly)].2);
    let is: Vec<String> = Variant::ALL.iter().map(|v| format!("{v} {:.4}", i_of(*v))).collect();
    let detail = format!("I: {}; lowest {lowest}; T full {t_full:.4} vs kv_only {t_kv:.4}", is.join(", "));
    check(lowest == Variant::PhiOnly && t_full >= t_kv, detail)
}

// ---------------------------------------------------------------- AC-7

fn small_pipeline() -> ExperimentConfig {
    let mut c = ExperimentConfig { seed: 71, image_size: 40, ..ExperimentConfig::default() };
    c.pretrain.corpus.image_size = 40;
    c.pretrain.steps = 20;
    c.pretrain.batch_size = 2;
    c.pretrain.autoencoder_fit_images = 16;
    c.pretrain.denoiser = DenoiserConfig { width: 4, inner_width: 6, attn_dim: 4, heads: 2, text_dim: 6, ..DenoiserConfig::default() };
    c.subjects = blemish_core::experiment::SubjectConfig { n_train: 2, n_test: 1, images_per_subject: 2 };
    c.artifacts.n_train = 2;
    c.artifacts.n_test_id = 1;
    c.artifacts.n_test_ood = 1;
    let inv = InversionConfig { steps: 3, batch_size: 2, ..InversionConfig::default() };
    c.bank_inversion = inv.clone();
    c.test_inversion = inv;
    c.rectify.steps = 3;
    c.rectify.batch_size = 2;
    c.generation = GenerationConfig { samples_per_prompt: 1, image_size: 40, ..GenerationConfig::default() };
    c.generation.sampler.steps = 4;
    c.templates.truncate(2);
    c
}

fn dir_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn ac7() -> Outcome {
    let cfg = small_pipeline();
    let oracle = OracleEmbedder::default();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = run_experiment(&cfg, None, &[&oracle as &dyn FeatureEmbedder], &mut |_| {}).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().unwrap();
        out.dataset.save(&dir.path().join("dataset")).map_err(|e| e.to_string())?;
        out.bank.save(&dir.path().join("bank")).map_err(|e| e.to_string())?;
        for (v, o) in &out.rectified {
            o.checkpoint.save(&dir.path().join(format!("{v}.ckpt"))).map_err(|e| e.to_string())?;
        }
        std::fs::write(dir.path().join("report.json"), serde_json::to_vec_pretty(&out.reports).unwrap()).unwrap();
        runs.push(dir_bytes(dir.path()));
    }
    let (a, b) = (&runs[0], &runs[1]);
    if a.keys().ne(b.keys()) {
        return Err("runs wrote different file sets".into());
    }
    let differing: Vec<_> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    check(differing.is_empty(), if differing.is_empty() { format!("{} files byte-identical across reruns", a.len()) } else { format!("differing: {differing:?}") })
}

// ---------------------------------------------------------------- AC-8

fn ac8() -> Outcome {
    let mut r = rng::stream(81);
    let (subjects, _) = split_subjects(20, 0, 81);
    let sets: Vec<SubjectSet> = subjects.iter().map(|s| s.photos(2, 40, 81).unwrap()).collect();
    let artifacts: Vec<_> = (0..10).map(|i| random_watermark(&format!("wm-{i}"), &mut r)).collect();
    let ds = build_dataset(&sets, &artifacts, 0.0, 82).map_err(|e| e.to_string())?;
    if ds.blemished.len() != 200 {
        return Err(format!("N=20, L=10 gave {} subsets", ds.blemished.len()));
    }
    for s in &sets {
        for a in &artifacts {
            if !ds.blemished.contains_key(&(s.subject_id.clone(), a.artifact_id.clone())) {
                return Err(format!("missing subset {} / {}", s.subject_id, a.artifact_id));
            }
        }
    }

    // Subjects of sizes 1..=7 so that every ratio hits non-trivial rounding.
    let uneven: Vec<SubjectSet> = (1..=7).map(|m| ToySubject { shape: m % 8, color: (m * 3) % 8 }.photos(m, 40, 83).unwrap()).collect();
    let mut checked = 0;
    for ratio in [1.0, 0.75, 0.5, 0.25, 0.0] {
        let ds = build_dataset(&uneven, &artifacts[..2], ratio, 84).map_err(|e| e.to_string())?;
        for s in &uneven {
            for a in &artifacts[..2] {
                let blem = &ds.blemished[&(s.subject_id.clone(), a.artifact_id.clone())];
                let identical = s.images.iter().zip(&blem.images).filter(|(c, b)| c.to_bytes() == b.to_bytes()).count();
                let expected = (ratio * s.len() as f64).round() as usize;
                if identical != expected {
                    return Err(format!("ratio {ratio}, M={}: {identical} clean images, expected {expected}", s.len()));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("200 subsets from N=20, L=10; {checked} ratio-sweep subsets match round(r*M)"))
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 8] = [
        ("AC-1", "gradient isolation", ac1),
        ("AC-2", "loss-path equivalence", ac2),
        ("AC-3", "gradient correctness", ac3),
        ("AC-4", "metric oracle equivalence", ac4),
        ("AC-5", "directional reproduction", ac5),
        ("AC-6", "ablation ordering", ac6),
        ("AC-7", "determinism", ac7),
        ("AC-8", "dataset counting", ac8),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC-")).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("{id} PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("{id} FAIL {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
