//! Run configuration file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use blemish_core::corpus::{COLORS, SHAPES};
use blemish_core::embed::ExternalEmbedder;
use blemish_core::experiment::ExperimentConfig;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// One external feature extractor reached through the file-exchange protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEmbedderSpec {
    pub id: String,
    pub d_feat: usize,
    #[serde(default)]
    pub supports_text: bool,
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExternalEmbedderSpec {
    pub fn build(&self) -> ExternalEmbedder {
        ExternalEmbedder::new(&self.id, self.d_feat, self.supports_text, &self.program, self.args.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of training subjects.
    NSubjects,
    /// Fraction of clean images inside each blemished test subset.
    UnblemishedRatio,
    /// Watermark tile grid `[rows, cols]` of the test artifacts.
    Density,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<serde_json::Value>,
}

/// A typed sweep value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum SweepValue {
    Count(usize),
    Ratio(f64),
    Density([u32; 2]),
}

impl SweepSpec {
    pub fn typed_values(&self) -> Result<Vec<SweepValue>, CliError> {
        if self.values.is_empty() {
            return Err(CliError::Config("sweep.values is empty".into()));
        }
        self.values
            .iter()
            .map(|v| {
                let bad = || CliError::Config(format!("sweep value {v} is invalid for axis {:?}", self.axis));
                match self.axis {
                    SweepAxis::NSubjects => {
                        let n = v.as_u64().filter(|n| *n >= 1).ok_or_else(bad)?;
                        Ok(SweepValue::Count(n as usize))
                    }
                    SweepAxis::UnblemishedRatio => {
                        let r = v.as_f64().filter(|r| (0.0..=1.0).contains(r)).ok_or_else(bad)?;
                        Ok(SweepValue::Ratio(r))
                    }
                    SweepAxis::Density => {
                        let pair: [u32; 2] = serde_json::from_value(v.clone()).map_err(|_| bad())?;
                        if pair.contains(&0) {
                            return Err(bad());
                        }
                        Ok(SweepValue::Density(pair))
                    }
                }
            })
            .collect()
    }
}

/// Everything one invocation needs; every numeric setting lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Experiment root; `--out` takes precedence.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub embedders: Vec<ExternalEmbedderSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl RunConfig {
    /// Parses TOML text and validates it.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.toml` file, or `.json` with the same schema.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            cfg.validate()?;
            return Ok(cfg);
        }
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        self.experiment.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let mut ids = BTreeSet::from(["oracle".to_string()]);
        for e in &self.embedders {
            if !ids.insert(e.id.clone()) {
                return Err(CliError::Config(format!("embedder id {:?} is used twice", e.id)));
            }
            if e.d_feat == 0 {
                return Err(CliError::Config(format!("embedder {:?} needs d_feat > 0", e.id)));
            }
        }
        if let Some(s) = &self.sweep {
            for v in s.typed_values()? {
                if let SweepValue::Count(n) = v {
                    if n + self.experiment.subjects.n_test > SHAPES.len() * COLORS.len() {
                        return Err(CliError::Config(format!("n_subjects {n} exceeds the available shape/colour combinations")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy with one sweep value applied.
    pub fn with_value(&self, axis: SweepAxis, value: SweepValue) -> Self {
        let mut c = self.clone();
        c.sweep = None;
        match (axis, value) {
            (SweepAxis::NSubjects, SweepValue::Count(n)) => c.experiment.subjects.n_train = n,
            (SweepAxis::UnblemishedRatio, SweepValue::Ratio(r)) => c.experiment.artifacts.test_unblemished_ratio = r,
            (SweepAxis::Density, SweepValue::Density(d)) => c.experiment.artifacts.test_density = Some(d),
            _ => unreachable!("typed_values matches the axis"),
        }
        c
    }
}
