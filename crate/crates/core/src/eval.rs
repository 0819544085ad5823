//! Similarity-ratio benchmark over blemished test cases.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactSpec;
use crate::dataset::{build_dataset, SubjectSet};
use crate::diffusion::{ModelCheckpoint, PHI_SLOT, SUBJECT_SLOT};
use crate::embed::{cosine, FeatureEmbedder, FeatureVector};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::inversion::{invert_subset, InversionConfig, LearnedEmbedding};
use crate::rectify::{generate_with, GenerationConfig, PromptImages};
use crate::seed;

/// Mean cosine over all `(generated, reference)` feature pairs.
pub fn mean_pair_cosine(generated: &[FeatureVector], references: &[FeatureVector]) -> Result<f64> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::Empty("similarity inputs"));
    }
    let mut s = 0.0;
    for g in generated {
        for r in references {
            s += cosine(g, r)?;
        }
    }
    Ok(s / (generated.len() * references.len()) as f64)
}

pub fn image_similarity(generated: &[ImageTensor], references: &[ImageTensor], embedder: &dyn FeatureEmbedder) -> Result<f64> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::Empty("similarity inputs"));
    }
    mean_pair_cosine(&embedder.embed_images(generated)?, &embedder.embed_images(references)?)
}

/// `I / I_β`, undefined when `I_β` is zero.
pub fn ratio(i: f64, i_beta: f64) -> Result<f64> {
    if i_beta == 0.0 || !i_beta.is_finite() {
        return Err(Error::UndefinedRatio);
    }
    Ok(i / i_beta)
}

/// `(I, I_β, R)`: similarity to clean references, to blemished references, and their ratio.
pub fn ratio_metrics(generated: &[ImageTensor], clean: &[ImageTensor], blemished: &[ImageTensor], embedder: &dyn FeatureEmbedder) -> Result<(f64, f64, f64)> {
    if generated.is_empty() || clean.is_empty() || blemished.is_empty() {
        return Err(Error::Empty("ratio inputs"));
    }
    let g = embedder.embed_images(generated)?;
    let i = mean_pair_cosine(&g, &embedder.embed_images(clean)?)?;
    let ib = mean_pair_cosine(&g, &embedder.embed_images(blemished)?)?;
    Ok((i, ib, ratio(i, ib)?))
}

pub fn text_similarity(generated: &[ImageTensor], prompt: &str, embedder: &dyn FeatureEmbedder) -> Result<f64> {
    if !embedder.descriptor().supports_text {
        return Err(Error::Embedder(format!("{} does not embed text", embedder.descriptor().id)));
    }
    if generated.is_empty() {
        return Err(Error::Empty("generated images"));
    }
    let t = embedder.embed_text(prompt)?;
    let g = embedder.embed_images(generated)?;
    Ok(g.iter().map(|v| cosine(v, &t)).sum::<Result<f64>>()? / g.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub subject_id: String,
    pub class_phrase: String,
    pub artifact: ArtifactSpec,
    pub blemished: SubjectSet,
    pub clean: SubjectSet,
    pub prompts: Vec<String>,
    pub split: Split,
}

impl TestCase {
    pub fn validate(&self) -> Result<()> {
        self.clean.validate()?;
        self.blemished.validate()?;
        if self.clean.len() != self.blemished.len() {
            return Err(Error::Config(format!("test case {} has misaligned subsets", self.subject_id)));
        }
        if self.prompts.is_empty() {
            return Err(Error::Empty("test prompts"));
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.subject_id, self.artifact.artifact_id)
    }
}

/// Blemishes every test subject with every artifact of both splits.
pub fn build_test_cases(subjects: &[SubjectSet], id_artifacts: &[ArtifactSpec], ood_artifacts: &[ArtifactSpec], prompts: &[String], unblemished_ratio: f64, seed: u64) -> Result<Vec<TestCase>> {
    let mut cases = Vec::new();
    for (split, arts) in [(Split::Id, id_artifacts), (Split::Ood, ood_artifacts)] {
        if arts.is_empty() {
            continue;
        }
        let ds = build_dataset(subjects, arts, unblemished_ratio, seed!(seed, "test-cases", if split == Split::Id { "id" } else { "ood" }))?;
        for s in &ds.subjects {
            for a in &ds.artifacts {
                cases.push(TestCase {
                    subject_id: s.subject_id.clone(),
                    class_phrase: s.class_phrase().to_string(),
                    artifact: a.clone(),
                    blemished: ds.subset(&s.subject_id, &a.artifact_id)?.clone(),
                    clean: s.clone(),
                    prompts: prompts.to_vec(),
                    split,
                });
            }
        }
    }
    Ok(cases)
}

/// Prompt text given to text embedders: the artifact-free slot removed and the
/// subject slot replaced by the class phrase.
pub fn readable_prompt(template: &str, class_phrase: &str) -> String {
    template
        .split_whitespace()
        .filter(|w| *w != PHI_SLOT)
        .map(|w| if w == SUBJECT_SLOT { class_phrase } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Eight generation templates: plain and seven scene contexts.
pub fn default_templates() -> Vec<String> {
    std::iter::once(format!("a {PHI_SLOT} photo of {SUBJECT_SLOT}"))
        .chain(crate::corpus::CONTEXTS.iter().map(|(phrase, _)| format!("a {PHI_SLOT} photo of {SUBJECT_SLOT} {phrase}")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub i: f64,
    pub i_beta: f64,
    pub r: f64,
    #[serde(default)]
    pub t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub subject_id: String,
    pub artifact_id: String,
    pub split: Split,
    pub prompt: String,
    /// Keyed by embedder id.
    pub metrics: BTreeMap<String, Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub subject_id: String,
    pub artifact_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub config_hash: String,
    pub records: Vec<MetricRecord>,
    pub failures: Vec<CaseFailure>,
    /// Means over all records, keyed by embedder id.
    pub aggregate: BTreeMap<String, Metrics>,
    /// Means per split, keyed by split then embedder id.
    pub by_split: BTreeMap<String, BTreeMap<String, Metrics>>,
}

fn mean_metrics<'a>(items: impl Iterator<Item = &'a Metrics>) -> Option<Metrics> {
    let items: Vec<&Metrics> = items.collect();
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    let mean = |f: &dyn Fn(&Metrics) -> f64| items.iter().map(|m| f(m)).sum::<f64>() / n;
    let t = items.iter().map(|m| m.t).collect::<Option<Vec<f64>>>().map(|ts| ts.iter().sum::<f64>() / n);
    Some(Metrics { i: mean(&|m| m.i), i_beta: mean(&|m| m.i_beta), r: mean(&|m| m.r), t })
}

impl MetricReport {
    pub fn new(method: &str, config_hash: &str, records: Vec<MetricRecord>, failures: Vec<CaseFailure>) -> Self {
        let mut report = Self { method: method.into(), config_hash: config_hash.into(), records, failures, aggregate: BTreeMap::new(), by_split: BTreeMap::new() };
        report.recompute();
        report
    }

    /// Recomputes aggregates from the records.
    pub fn recompute(&mut self) {
        let embedders: std::collections::BTreeSet<String> = self.records.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
        self.aggregate.clear();
        self.by_split.clear();
        for e in &embedders {
            if let Some(m) = mean_metrics(self.records.iter().filter_map(|r| r.metrics.get(e))) {
                self.aggregate.insert(e.clone(), m);
            }
            for split in [Split::Id, Split::Ood] {
                let key = serde_json::to_value(split).expect("split serializes").as_str().expect("string").to_string();
                if let Some(m) = mean_metrics(self.records.iter().filter(|r| r.split == split).filter_map(|r| r.metrics.get(e))) {
                    self.by_split.entry(key).or_default().insert(e.clone(), m);
                }
            }
        }
    }
}

/// A method under evaluation and the checkpoint it samples from.
pub struct Method<'a> {
    pub tag: String,
    pub model: &'a ModelCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub inversion: InversionConfig,
    pub generation: GenerationConfig,
    pub seed: u64,
}

/// Per-case generations of one method, kept for contact sheets.
pub type Generations = BTreeMap<String, Vec<(String, Vec<ImageTensor>)>>;

/// Generations of every method for one case, in method order.
///
/// The blemished subset is inverted once on `base` and the vector is shared
/// by all methods unless `invert_on_rectified` is set.
pub fn generate_case(case: &TestCase, base: &ModelCheckpoint, methods: &[Method<'_>], cfg: &BenchmarkConfig) -> Vec<Result<Vec<PromptImages>>> {
    let case_seed = seed!(cfg.seed, "case", &case.subject_id, &case.artifact.artifact_id);
    let invert = |model: &ModelCheckpoint| {
        case.validate()?;
        Ok(invert_subset(model, &case.blemished, Some(&case.artifact.artifact_id), &cfg.inversion, seed!(case_seed, "invert"))?.0)
    };
    let shared: Option<Result<LearnedEmbedding>> = (!cfg.generation.invert_on_rectified).then(|| invert(base));
    methods
        .iter()
        .map(|method| {
            let v = match &shared {
                Some(Ok(v)) => v.clone(),
                Some(Err(e)) => return Err(Error::Config(format!("inversion failed: {e}"))),
                None => invert(method.model)?,
            };
            generate_with(method.model, &v, &case.prompts, &cfg.generation, seed!(case_seed, "generate"))
        })
        .collect()
}

fn score_case(case: &TestCase, gens: &[PromptImages], embedders: &[&dyn FeatureEmbedder], refs: &[(Vec<FeatureVector>, Vec<FeatureVector>)]) -> Result<Vec<MetricRecord>> {
    let mut recs = Vec::new();
    for g in gens {
        let mut metrics = BTreeMap::new();
        for (e, (clean, blem)) in embedders.iter().zip(refs) {
            let feats = e.embed_images(&g.images)?;
            let i = mean_pair_cosine(&feats, clean)?;
            let i_beta = mean_pair_cosine(&feats, blem)?;
            let t = if e.descriptor().supports_text {
                let tv = e.embed_text(&readable_prompt(&g.template, &case.class_phrase))?;
                Some(feats.iter().map(|f| cosine(f, &tv)).sum::<Result<f64>>()? / feats.len() as f64)
            } else {
                None
            };
            metrics.insert(e.descriptor().id.clone(), Metrics { i, i_beta, r: ratio(i, i_beta)?, t });
        }
        recs.push(MetricRecord {
            subject_id: case.subject_id.clone(),
            artifact_id: case.artifact.artifact_id.clone(),
            split: case.split,
            prompt: g.template.clone(),
            metrics,
        });
    }
    Ok(recs)
}

/// Cases in report order: by split, then case id.
pub fn ordered_cases(cases: &[TestCase]) -> Vec<&TestCase> {
    let mut ordered: Vec<&TestCase> = cases.iter().collect();
    ordered.sort_by_key(|c| (c.split, c.id()));
    ordered
}

/// Inverts each case against `base` and scores every method with every embedder.
///
/// Case failures are recorded and the run continues.
pub fn run_benchmark(
    cases: &[TestCase],
    base: &ModelCheckpoint,
    methods: &[Method<'_>],
    cfg: &BenchmarkConfig,
    embedders: &[&dyn FeatureEmbedder],
    mut keep: Option<&mut BTreeMap<String, Generations>>,
) -> Result<Vec<MetricReport>> {
    if embedders.is_empty() {
        return Err(Error::Empty("embedders"));
    }
    let config_hash = crate::digest::json_hash(cfg);
    let mut records: Vec<Vec<MetricRecord>> = vec![Vec::new(); methods.len()];
    let mut failures: Vec<Vec<CaseFailure>> = vec![Vec::new(); methods.len()];
    for case in ordered_cases(cases) {
        let fail = |e: &Error| CaseFailure { subject_id: case.subject_id.clone(), artifact_id: case.artifact.artifact_id.clone(), error: e.to_string() };
        let refs: Result<Vec<(Vec<FeatureVector>, Vec<FeatureVector>)>> =
            embedders.iter().map(|e| Ok((e.embed_images(&case.clean.images)?, e.embed_images(&case.blemished.images)?))).collect();
        for (mi, (method, gens)) in methods.iter().zip(generate_case(case, base, methods, cfg)).enumerate() {
            let outcome = gens.and_then(|gens| {
                let refs = refs.as_ref().map_err(|e| Error::Embedder(e.to_string()))?;
                Ok((score_case(case, &gens, embedders, refs)?, gens))
            });
            match outcome {
                Ok((recs, gens)) => {
                    records[mi].extend(recs);
                    if let Some(k) = keep.as_deref_mut() {
                        k.entry(method.tag.clone()).or_default().insert(case.id(), gens.into_iter().map(|g| (g.template, g.images)).collect());
                    }
                }
                Err(e) => failures[mi].push(fail(&e)),
            }
        }
    }
    Ok(methods
        .iter()
        .zip(records.into_iter().zip(failures))
        .map(|(m, (r, f))| MetricReport::new(&m.tag, &config_hash, r, f))
        .collect())
}

/// Fixed-width table: one row per method and split, `I` and `R` per embedder, `T` where available.
pub fn render_table(reports: &[MetricReport]) -> String {
    let embedders: Vec<String> = reports.iter().flat_map(|r| r.aggregate.keys().cloned()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut out = String::new();
    let _ = write!(out, "{:<22} {:<5}", "method", "split");
    for e in &embedders {
        let _ = write!(out, " {:>9} {:>9} {:>9}", format!("I[{e}]"), format!("R[{e}]"), format!("T[{e}]"));
    }
    out.push('\n');
    for r in reports {
        let mut rows: Vec<(&str, &BTreeMap<String, Metrics>)> = r.by_split.iter().map(|(k, v)| (k.as_str(), v)).collect();
        rows.push(("all", &r.aggregate));
        for (split, m) in rows {
            let _ = write!(out, "{:<22} {:<5}", r.method, split);
            for e in &embedders {
                match m.get(e) {
                    Some(x) => {
                        let t = x.t.map_or("-".to_string(), |t| format!("{t:.3}"));
                        let _ = write!(out, " {:>9.3} {:>9.3} {:>9}", x.i, x.r, t);
                    }
                    None => {
                        let _ = write!(out, " {:>9} {:>9} {:>9}", "-", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        if !r.failures.is_empty() {
            let _ = writeln!(out, "  {} failed case(s)", r.failures.len());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::OracleEmbedder;

    fn solid(rgb: [f64; 3]) -> ImageTensor {
        ImageTensor::filled(16, 16, rgb).unwrap()
    }

    #[test]
    fn identical_inputs_score_one() {
        let o = OracleEmbedder::default();
        let img = crate::corpus::canonical_shape(2, 64);
        assert!((image_similarity(std::slice::from_ref(&img), std::slice::from_ref(&img), &o).unwrap() - 1.0).abs() < 1e-12);
        let refs = vec![img.clone()];
        let (_, _, r) = ratio_metrics(&[solid([0.2, 0.3, 0.9])], &refs, &refs, &o).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn empty_inputs_and_zero_denominator() {
        let o = OracleEmbedder::default();
        assert!(image_similarity(&[], &[solid([0.0; 3])], &o).is_err());
        assert!(text_similarity(&[], "red", &o).is_err());
        assert!(matches!(ratio(0.3, 0.0), Err(Error::UndefinedRatio)));
        assert!((ratio(0.217, 0.2547).unwrap() - 0.852).abs() < 5e-4);
    }

    #[test]
    fn prompts_read_naturally() {
        assert_eq!(readable_prompt("a <phi> photo of <v> on a table", "red square"), "a photo of red square on a table");
        assert_eq!(default_templates().len(), 8);
    }

    #[test]
    fn aggregates_are_record_means() {
        let rec = |i: f64, ib: f64, split| MetricRecord {
            subject_id: "s".into(),
            artifact_id: "a".into(),
            split,
            prompt: "p".into(),
            metrics: [("oracle".to_string(), Metrics { i, i_beta: ib, r: i / ib, t: Some(0.5) })].into(),
        };
        let r = MetricReport::new("m", "h", vec![rec(0.5, 0.25, Split::Id), rec(0.3, 0.6, Split::Ood)], vec![]);
        let a = r.aggregate["oracle"];
        assert!((a.i - 0.4).abs() < 1e-15 && (a.r - 1.25).abs() < 1e-15);
        assert_eq!(r.by_split["id"]["oracle"].r, 2.0);
        assert!(render_table(&[r]).contains("oracle"));
    }
}
