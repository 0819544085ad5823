//! End-to-end toy experiment: corpus, base model, bank, rectification, benchmark.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactParams, ArtifactSpec};
use crate::corpus::{random_watermark, split_subjects};
use crate::dataset::{build_dataset, PairedDataset, SubjectSet};
use crate::diffusion::{pretrain, ModelCheckpoint, PretrainConfig};
use crate::embed::FeatureEmbedder;
use crate::error::{Error, Result};
use crate::eval::{build_test_cases, default_templates, run_benchmark, BenchmarkConfig, Generations, Method, MetricReport, TestCase};
use crate::inversion::{build_embedding_bank, EmbeddingBank, InversionConfig};
use crate::rectify::{rectify_train, GenerationConfig, RectifyConfig, RectifyOutcome, Variant};
use crate::{rng, seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub images_per_subject: usize,
}

impl Default for SubjectConfig {
    fn default() -> Self {
        Self { n_train: 6, n_test: 4, images_per_subject: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactConfig {
    /// Explicit training artifacts; when empty, `n_train` random watermarks are drawn.
    #[serde(default)]
    pub train: Vec<ArtifactSpec>,
    pub n_train: usize,
    /// Training artifacts reused as in-distribution test artifacts.
    pub n_test_id: usize,
    /// Explicit out-of-distribution test artifacts; when empty, `n_test_ood` are drawn.
    #[serde(default)]
    pub test_ood: Vec<ArtifactSpec>,
    pub n_test_ood: usize,
    /// Overrides the tile grid of every test watermark.
    #[serde(default)]
    pub test_density: Option<[u32; 2]>,
    /// Fraction of clean images kept in each blemished test subset.
    #[serde(default)]
    pub test_unblemished_ratio: f64,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        Self { train: vec![], n_train: 4, n_test_id: 2, test_ood: vec![], n_test_ood: 2, test_density: None, test_unblemished_ratio: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    pub pretrain: PretrainConfig,
    pub subjects: SubjectConfig,
    pub artifacts: ArtifactConfig,
    pub bank_inversion: InversionConfig,
    pub test_inversion: InversionConfig,
    pub rectify: RectifyConfig,
    pub variants: Vec<Variant>,
    pub generation: GenerationConfig,
    pub templates: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            pretrain: PretrainConfig::default(),
            subjects: SubjectConfig::default(),
            artifacts: ArtifactConfig::default(),
            bank_inversion: InversionConfig::default(),
            test_inversion: InversionConfig::default(),
            rectify: RectifyConfig::default(),
            variants: Variant::ALL.to_vec(),
            generation: GenerationConfig::default(),
            templates: default_templates(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.bank_inversion.validate()?;
        self.test_inversion.validate()?;
        self.rectify.validate()?;
        if self.image_size != self.pretrain.corpus.image_size {
            return Err(Error::Config("image_size must equal the corpus image size".into()));
        }
        if self.subjects.n_train == 0 || self.subjects.images_per_subject == 0 {
            return Err(Error::Config("need at least one training subject and image".into()));
        }
        if self.subjects.n_train + self.subjects.n_test > crate::corpus::SHAPES.len() * crate::corpus::COLORS.len() {
            return Err(Error::Config("more subjects requested than shape/colour combinations".into()));
        }
        if self.artifacts.n_test_id > self.train_artifacts().len() {
            return Err(Error::Config("n_test_id exceeds the number of training artifacts".into()));
        }
        if !(0.0..=1.0).contains(&self.artifacts.test_unblemished_ratio) {
            return Err(Error::Config("test_unblemished_ratio must lie in [0, 1]".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("at least one prompt template is required".into()));
        }
        Ok(())
    }

    /// Training artifacts: explicit list or seeded watermarks `wm-0…`.
    pub fn train_artifacts(&self) -> Vec<ArtifactSpec> {
        if !self.artifacts.train.is_empty() {
            return self.artifacts.train.clone();
        }
        let mut r = rng::stream(seed!(self.seed, "train-artifacts"));
        (0..self.artifacts.n_train).map(|i| random_watermark(&format!("wm-{i}"), &mut r)).collect()
    }

    /// In-distribution and out-of-distribution test artifacts.
    pub fn test_artifacts(&self) -> (Vec<ArtifactSpec>, Vec<ArtifactSpec>) {
        let train = self.train_artifacts();
        let id: Vec<ArtifactSpec> = train.iter().take(self.artifacts.n_test_id).cloned().collect();
        let ood = if !self.artifacts.test_ood.is_empty() {
            self.artifacts.test_ood.clone()
        } else {
            let mut r = rng::stream(seed!(self.seed, "ood-artifacts"));
            let mut out = Vec::new();
            while out.len() < self.artifacts.n_test_ood {
                let spec = random_watermark(&format!("ood-{}", out.len()), &mut r);
                if !train.iter().any(|t| t.params == spec.params) {
                    out.push(spec);
                }
            }
            out
        };
        let densify = |mut v: Vec<ArtifactSpec>| {
            if let Some([rows, cols]) = self.artifacts.test_density {
                for s in &mut v {
                    if let ArtifactParams::Watermark(w) = &mut s.params {
                        w.tile_rows = rows;
                        w.tile_cols = cols;
                    }
                }
            }
            v
        };
        (densify(id), densify(ood))
    }

    /// Clean training and test subject sets.
    pub fn subject_sets(&self) -> Result<(Vec<SubjectSet>, Vec<SubjectSet>)> {
        let (train, test) = split_subjects(self.subjects.n_train, self.subjects.n_test, self.seed);
        let photos = |v: Vec<crate::corpus::ToySubject>| {
            v.iter().map(|s| s.photos(self.subjects.images_per_subject, self.image_size, self.seed)).collect::<Result<Vec<_>>>()
        };
        Ok((photos(train)?, photos(test)?))
    }

    pub fn training_dataset(&self) -> Result<PairedDataset> {
        let (train, _) = self.subject_sets()?;
        build_dataset(&train, &self.train_artifacts(), 0.0, seed!(self.seed, "train-dataset"))
    }

    pub fn test_cases(&self) -> Result<Vec<TestCase>> {
        let (_, test) = self.subject_sets()?;
        let (id, ood) = self.test_artifacts();
        build_test_cases(&test, &id, &ood, &self.templates, self.artifacts.test_unblemished_ratio, seed!(self.seed, "test"))
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig { inversion: self.test_inversion.clone(), generation: self.generation.clone(), seed: seed!(self.seed, "benchmark") }
    }

    pub fn rectify_config(&self, variant: Variant) -> RectifyConfig {
        RectifyConfig { variant, seed: seed!(self.seed, "rectify", variant.name()), ..self.rectify.clone() }
    }
}

/// Method tag of plain blemished inversion.
pub const VANILLA_TAG: &str = "vanilla_ti";

pub fn method_tag(variant: Variant) -> String {
    format!("rectified_{}", variant.name())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub dataset: PairedDataset,
    pub bank: EmbeddingBank,
    pub rectified: BTreeMap<Variant, RectifyOutcome>,
    pub reports: Vec<MetricReport>,
    pub generations: BTreeMap<String, Generations>,
}

/// Progress events from [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub enum Event<'a> {
    Pretrain { step: usize, loss: f64 },
    Inverted { subject: &'a str, artifact: &'a str, loss: f64 },
    Rectify { variant: Variant, step: usize, loss: f64 },
    Stage(&'a str),
}

/// Runs every stage in memory; pretrains unless `base` is given.
pub fn run_experiment(cfg: &ExperimentConfig, base: Option<&ModelCheckpoint>, embedders: &[&dyn FeatureEmbedder], log: &mut dyn FnMut(Event<'_>)) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let trained;
    let base = match base {
        Some(b) => b,
        None => {
            log(Event::Stage("pretrain"));
            trained = pretrain(&cfg.pretrain, &mut |step, loss| log(Event::Pretrain { step, loss }))?;
            &trained
        }
    };
    log(Event::Stage("dataset"));
    let dataset = cfg.training_dataset()?;
    log(Event::Stage("bank"));
    let bank = build_embedding_bank(&dataset, base, &cfg.bank_inversion, seed!(cfg.seed, "bank"), &mut |subject, artifact, loss| {
        log(Event::Inverted { subject, artifact, loss })
    })?;
    let mut rectified = BTreeMap::new();
    for &variant in &cfg.variants {
        log(Event::Stage(variant.name()));
        let out = rectify_train(&cfg.rectify_config(variant), base, &dataset, &bank, &mut |step, loss| log(Event::Rectify { variant, step, loss }))?;
        rectified.insert(variant, out);
    }
    log(Event::Stage("benchmark"));
    let cases = cfg.test_cases()?;
    let mut methods = vec![Method { tag: VANILLA_TAG.into(), model: base }];
    methods.extend(rectified.iter().map(|(v, o)| Method { tag: method_tag(*v), model: &o.checkpoint }));
    let mut generations = BTreeMap::new();
    let reports = run_benchmark(&cases, base, &methods, &cfg.benchmark_config(), embedders, Some(&mut generations))?;
    Ok(ExperimentOutcome { dataset, bank, rectified, reports, generations })
}
