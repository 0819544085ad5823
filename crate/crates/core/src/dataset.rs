//! Paired unblemished/blemished datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::artifact::{apply_artifact, ArtifactSpec};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::{rng, seed};

/// Images of one subject, all of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSet {
    pub subject_id: String,
    pub images: Vec<ImageTensor>,
    /// Free-form provenance labels (e.g. `class_phrase`).
    pub labels: BTreeMap<String, String>,
}

impl SubjectSet {
    pub fn new(subject_id: impl Into<String>, images: Vec<ImageTensor>) -> Result<Self> {
        let set = Self {
            subject_id: subject_id.into(),
            images,
            labels: BTreeMap::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_label(mut self, key: &str, value: impl Into<String>) -> Self {
        self.labels.insert(key.into(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.images.first().ok_or(Error::Empty("subject set has no images"))?;
        if self.subject_id.is_empty() || self.subject_id.contains(['/', '\\']) || self.subject_id == "clean" {
            return Err(Error::Config(format!("invalid subject id `{}`", self.subject_id)));
        }
        if let Some(img) = self
            .images
            .iter()
            .find(|i| i.height() != first.height() || i.width() != first.width())
        {
            return Err(Error::Dimension(format!(
                "subject `{}` mixes {}x{} and {}x{} images",
                self.subject_id,
                first.height(),
                first.width(),
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Phrase naming the subject class, used for text-fidelity prompts.
    pub fn class_phrase(&self) -> &str {
        self.labels.get("class_phrase").map(String::as_str).unwrap_or("object")
    }
}

/// `D = {S_i, {S_i^k}}`: clean subsets plus one blemished copy per artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub subjects: Vec<SubjectSet>,
    pub artifacts: Vec<ArtifactSpec>,
    /// Keyed by `(subject_id, artifact_id)`.
    pub blemished: BTreeMap<(String, String), SubjectSet>,
    /// Indices left unblemished in each blemished subset.
    pub kept_clean: BTreeMap<(String, String), Vec<usize>>,
    pub unblemished_ratio: f64,
    pub seed: u64,
}

/// Number of images kept clean for ratio `r` (round half up).
pub fn kept_count(ratio: f64, m: usize) -> usize {
    ((ratio * m as f64 + 0.5).floor() as usize).min(m)
}

fn check_unique_artifacts(artifacts: &[ArtifactSpec]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for a in artifacts {
        if !seen.insert(a.artifact_id.as_str()) {
            return Err(Error::DuplicateArtifact(a.artifact_id.clone()));
        }
    }
    Ok(())
}

/// Applies every artifact to every image of every subject.
pub fn build_dataset(clean: &[SubjectSet], artifacts: &[ArtifactSpec], unblemished_ratio: f64, seed: u64) -> Result<PairedDataset> {
    if clean.is_empty() {
        return Err(Error::Empty("no clean subjects"));
    }
    if artifacts.is_empty() {
        return Err(Error::Empty("no artifacts"));
    }
    if !(0.0..=1.0).contains(&unblemished_ratio) {
        return Err(Error::Config(format!("unblemished ratio {unblemished_ratio} outside [0, 1]")));
    }
    check_unique_artifacts(artifacts)?;
    let mut ids = BTreeSet::new();
    for s in clean {
        s.validate()?;
        if !ids.insert(s.subject_id.as_str()) {
            return Err(Error::Config(format!("duplicate subject id `{}`", s.subject_id)));
        }
    }
    for a in artifacts {
        a.validate()?;
    }

    let subjects: Vec<SubjectSet> = clean
        .iter()
        .map(|s| SubjectSet {
            images: s.images.iter().map(ImageTensor::quantized).collect(),
            ..s.clone()
        })
        .collect();

    let mut blemished = BTreeMap::new();
    let mut kept_clean = BTreeMap::new();
    for subject in &subjects {
        let m = subject.len();
        for artifact in artifacts {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng::stream(seed!(seed, "keep", &subject.subject_id, &artifact.artifact_id)));
            let mut keep: Vec<usize> = order[..kept_count(unblemished_ratio, m)].to_vec();
            keep.sort_unstable();
            let images = subject
                .images
                .iter()
                .enumerate()
                .map(|(j, img)| {
                    if keep.binary_search(&j).is_ok() {
                        Ok(img.clone())
                    } else {
                        let s = seed!(seed, &subject.subject_id, &artifact.artifact_id, j);
                        Ok(apply_artifact(img, artifact, s)?.quantized())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let key = (subject.subject_id.clone(), artifact.artifact_id.clone());
            blemished.insert(
                key.clone(),
                SubjectSet {
                    subject_id: subject.subject_id.clone(),
                    images,
                    labels: subject.labels.clone(),
                },
            );
            kept_clean.insert(key, keep);
        }
    }
    Ok(PairedDataset {
        subjects,
        artifacts: artifacts.to_vec(),
        blemished,
        kept_clean,
        unblemished_ratio,
        seed,
    })
}

impl PairedDataset {
    pub fn subset(&self, subject_id: &str, artifact_id: &str) -> Result<&SubjectSet> {
        self.blemished
            .get(&(subject_id.to_string(), artifact_id.to_string()))
            .ok_or_else(|| Error::MissingSubset {
                subject: subject_id.into(),
                artifact: artifact_id.into(),
            })
    }

    pub fn subject(&self, subject_id: &str) -> Option<&SubjectSet> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }

    /// Checks the N×L completeness and per-subset size invariants.
    pub fn validate(&self) -> Result<()> {
        for s in &self.subjects {
            for a in &self.artifacts {
                let b = self.subset(&s.subject_id, &a.artifact_id)?;
                if b.len() != s.len() {
                    return Err(Error::Dimension(format!(
                        "subset ({}, {}) has {} images, clean has {}",
                        s.subject_id,
                        a.artifact_id,
                        b.len(),
                        s.len()
                    )));
                }
            }
        }
        if self.blemished.len() != self.subjects.len() * self.artifacts.len() {
            return Err(Error::Config("blemished map has extra subsets".into()));
        }
        Ok(())
    }
}

/// Splits test artifacts into those whose parameters match a training artifact and the rest.
pub fn split_artifacts_id_ood(train: &[ArtifactSpec], test: &[ArtifactSpec]) -> (Vec<ArtifactSpec>, Vec<ArtifactSpec>) {
    test.iter()
        .cloned()
        .partition(|t| train.iter().any(|a| a.params == t.params))
}

// ---------------------------------------------------------------------------
// On-disk layout: <root>/<subject>/clean/NNN.png, <root>/<subject>/<artifact>/NNN.png

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_subjects: usize,
    pub n_artifacts: usize,
    pub unblemished_ratio: f64,
    pub seed: u64,
    pub subjects: Vec<SubjectEntry>,
    pub artifacts: Vec<ArtifactSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub images: usize,
    pub labels: BTreeMap<String, String>,
    /// artifact id → indices left clean
    pub kept_clean: BTreeMap<String, Vec<usize>>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format_version != 1 {
            return Err(Error::format("dataset manifest", format!("unsupported version {}", m.format_version)));
        }
        if m.subjects.len() != m.n_subjects || m.artifacts.len() != m.n_artifacts {
            return Err(Error::format("dataset manifest", "counts disagree with listings"));
        }
        if !(0.0..=1.0).contains(&m.unblemished_ratio) {
            return Err(Error::format("dataset manifest", "ratio outside [0, 1]"));
        }
        check_unique_artifacts(&m.artifacts)?;
        for a in &m.artifacts {
            a.validate()?;
        }
        for s in &m.subjects {
            if s.subject_id.is_empty() || s.subject_id.contains(['/', '\\', '.']) || s.images == 0 {
                return Err(Error::format("dataset manifest", format!("bad subject entry `{}`", s.subject_id)));
            }
        }
        Ok(m)
    }
}

fn image_name(j: usize) -> String {
    format!("{j:03}.png")
}

fn write_subset(dir: &Path, set: &SubjectSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::at(dir))?;
    for (j, img) in set.images.iter().enumerate() {
        img.save_png(&dir.join(image_name(j)))?;
    }
    Ok(())
}

fn read_subset(dir: &Path, subject_id: &str, count: usize, labels: &BTreeMap<String, String>) -> Result<SubjectSet> {
    let images = (0..count)
        .map(|j| ImageTensor::load_png(&dir.join(image_name(j))))
        .collect::<Result<Vec<_>>>()?;
    let mut set = SubjectSet::new(subject_id, images)?;
    set.labels = labels.clone();
    Ok(set)
}

impl PairedDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: 1,
            n_subjects: self.subjects.len(),
            n_artifacts: self.artifacts.len(),
            unblemished_ratio: self.unblemished_ratio,
            seed: self.seed,
            subjects: self
                .subjects
                .iter()
                .map(|s| SubjectEntry {
                    subject_id: s.subject_id.clone(),
                    images: s.len(),
                    labels: s.labels.clone(),
                    kept_clean: self
                        .artifacts
                        .iter()
                        .map(|a| {
                            let key = (s.subject_id.clone(), a.artifact_id.clone());
                            (a.artifact_id.clone(), self.kept_clean.get(&key).cloned().unwrap_or_default())
                        })
                        .collect(),
                })
                .collect(),
            artifacts: self.artifacts.clone(),
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for s in &self.subjects {
            write_subset(&root.join(&s.subject_id).join("clean"), s)?;
            for a in &self.artifacts {
                write_subset(&root.join(&s.subject_id).join(&a.artifact_id), self.subset(&s.subject_id, &a.artifact_id)?)?;
            }
        }
        let path = root.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&self.manifest())?).map_err(Error::at(&path))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let manifest = DatasetManifest::parse(&fs::read_to_string(&path).map_err(Error::at(&path))?)?;
        let mut subjects = Vec::new();
        let mut blemished = BTreeMap::new();
        let mut kept_clean = BTreeMap::new();
        for entry in &manifest.subjects {
            let dir = root.join(&entry.subject_id);
            subjects.push(read_subset(&dir.join("clean"), &entry.subject_id, entry.images, &entry.labels)?);
            for a in &manifest.artifacts {
                let key = (entry.subject_id.clone(), a.artifact_id.clone());
                blemished.insert(
                    key.clone(),
                    read_subset(&dir.join(&a.artifact_id), &entry.subject_id, entry.images, &entry.labels)?,
                );
                kept_clean.insert(key, entry.kept_clean.get(&a.artifact_id).cloned().unwrap_or_default());
            }
        }
        let ds = Self {
            subjects,
            artifacts: manifest.artifacts,
            blemished,
            kept_clean,
            unblemished_ratio: manifest.unblemished_ratio,
            seed: manifest.seed,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::{ArtifactParams, FontFace, WatermarkParams};

    pub(crate) fn watermark(id: &str, text: &str, rotation: f64) -> ArtifactSpec {
        ArtifactSpec {
            artifact_id: id.into(),
            params: ArtifactParams::Watermark(WatermarkParams {
                text: text.into(),
                font: FontFace::Bold,
                glyph_height: 0.2,
                rotation,
                color: [1.0, 1.0, 1.0],
                opacity: 0.7,
                tile_rows: 2,
                tile_cols: 2,
            }),
        }
    }

    fn subjects(n: usize, m: usize) -> Vec<SubjectSet> {
        (0..n)
            .map(|i| {
                let imgs = (0..m)
                    .map(|j| ImageTensor::filled(24, 24, [0.1 * i as f64, 0.05 * j as f64, 0.5]).unwrap())
                    .collect();
                SubjectSet::new(format!("s{i}"), imgs).unwrap()
            })
            .collect()
    }

    #[test]
    fn counts_and_full_ratio() {
        let arts = [watermark("a", "AB", 0.0), watermark("b", "CD", 45.0)];
        let ds = build_dataset(&subjects(2, 3), &arts, 0.0, 1).unwrap();
        assert_eq!(ds.subjects.len(), 2);
        assert_eq!(ds.blemished.len(), 4);
        ds.validate().unwrap();
        let ds1 = build_dataset(&subjects(2, 3), &arts, 1.0, 1).unwrap();
        for ((sid, _), set) in &ds1.blemished {
            assert_eq!(set.images, ds1.subject(sid).unwrap().images);
        }
    }

    #[test]
    fn ratio_selects_round_half_up() {
        assert_eq!(kept_count(0.5, 3), 2);
        assert_eq!(kept_count(0.25, 4), 1);
        assert_eq!(kept_count(0.75, 4), 3);
        assert_eq!(kept_count(0.1, 4), 0);
        let arts = [watermark("a", "XY", 10.0)];
        let ds = build_dataset(&subjects(1, 4), &arts, 0.5, 3).unwrap();
        let clean = &ds.subjects[0];
        let b = ds.subset("s0", "a").unwrap();
        let identical = clean.images.iter().zip(&b.images).filter(|(c, x)| c.to_bytes() == x.to_bytes()).count();
        assert_eq!(identical, 2);
    }

    #[test]
    fn errors() {
        let arts = [watermark("a", "XY", 0.0), watermark("a", "Z", 0.0)];
        assert!(matches!(build_dataset(&subjects(1, 1), &arts, 0.0, 0), Err(Error::DuplicateArtifact(_))));
        assert!(matches!(build_dataset(&[], &arts[..1], 0.0, 0), Err(Error::Empty(_))));
        assert!(build_dataset(&subjects(1, 1), &arts[..1], 1.5, 0).is_err());
    }

    #[test]
    fn id_ood_split_compares_full_records() {
        let train = [watermark("t0", "AB", 0.0), watermark("t1", "CD", 0.0), watermark("t2", "EF", 0.0), watermark("t3", "GH", 30.0)];
        let same = watermark("x", "GH", 30.0);
        let rotated = watermark("y", "GH", 31.0);
        let (id, ood) = split_artifacts_id_ood(&train, &[same.clone(), rotated.clone()]);
        assert_eq!(id, vec![same]);
        assert_eq!(ood, vec![rotated]);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arts = [watermark("a", "AB", 15.0)];
        let ds = build_dataset(&subjects(2, 2), &arts, 0.5, 9).unwrap();
        ds.save(dir.path()).unwrap();
        assert!(dir.path().join("s1/clean/001.png").exists());
        assert!(dir.path().join("s1/a/000.png").exists());
        assert_eq!(PairedDataset::load(dir.path()).unwrap(), ds);
    }
}
