//! Content-addressed stage outputs under `<root>/store/<stage>/<key>/` and the
//! append-only `<root>/experiment.jsonl` manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use blemish_core::digest::{json_hash, sha256_hex};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "experiment.jsonl";
pub const RECORD_FILE: &str = "stage.json";

/// Version folded into every stage key, so outputs of other builds are not reused.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Source revision recorded in the manifest.
pub fn source_revision() -> String {
    match option_env!("BLEMISH_SOURCE_REVISION") {
        Some(rev) => format!("{TOOL_VERSION}+{rev}"),
        None => TOOL_VERSION.to_string(),
    }
}

/// Identity of one stage execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageId {
    pub stage: String,
    pub key: String,
    pub config_hash: String,
}

impl StageId {
    /// Key over the stage name, tool version, stage configuration and upstream keys.
    pub fn new<C: Serialize>(stage: &str, config: &C, upstream: &[&StageId]) -> Self {
        let config_hash = json_hash(config);
        let ups: Vec<(&str, &str)> = upstream.iter().map(|u| (u.stage.as_str(), u.key.as_str())).collect();
        let key = json_hash(&(stage, TOOL_VERSION, &config_hash, ups))[..16].to_string();
        Self { stage: stage.into(), key, config_hash }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.stage, self.key)
    }
}

/// Completed stage: written to `stage.json` next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub config_hash: String,
    pub seed: u64,
    /// Upstream files consumed, `<stage>/<key>/<file>` → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Files written, path relative to the stage directory → sha256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    Skipped,
    Failed,
}

/// One line of the experiment manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub key: String,
    pub status: Status,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    /// Paths relative to the experiment root → sha256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub source_revision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Hashes every file under `dir`, keyed by `/`-separated relative path.
pub fn hash_tree(dir: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Stage(e.to_string()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(rel, hash_file(entry.path())?);
        }
    }
    Ok(out)
}

pub struct Store {
    root: PathBuf,
    manifest: Mutex<()>,
    running: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), manifest: Mutex::new(()), running: Mutex::new(BTreeMap::new()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, id: &StageId) -> PathBuf {
        self.root.join("store").join(&id.stage).join(&id.key)
    }

    /// True when a record exists, without verifying hashes.
    pub fn exists(&self, id: &StageId) -> bool {
        self.dir(id).join(RECORD_FILE).is_file()
    }

    /// The verified record of a completed stage, `None` when it never ran.
    ///
    /// Any output whose content no longer matches its recorded hash is an error.
    pub fn record(&self, id: &StageId) -> CliResult<Option<StageRecord>> {
        let dir = self.dir(id);
        let path = dir.join(RECORD_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let rec: StageRecord = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))?;
        if rec.stage != id.stage || rec.key != id.key {
            return Err(CliError::Stage(format!("{} describes {}/{}", path.display(), rec.stage, rec.key)));
        }
        for (file, want) in &rec.outputs {
            let p = dir.join(file);
            let got = hash_file(&p).map_err(|_| CliError::Stage(format!("hash mismatch: {} is missing", p.display())))?;
            if &got != want {
                return Err(CliError::Stage(format!("hash mismatch: {} has sha256 {got}, recorded {want}", p.display())));
            }
        }
        Ok(Some(rec))
    }

    /// The verified record of an upstream stage that must already exist.
    pub fn require(&self, id: &StageId, command: &str) -> CliResult<StageRecord> {
        self.record(id)?.ok_or_else(|| {
            CliError::Stage(format!("stage dependency missing: {} has not run (run `blemish {command}` first)", id.label()))
        })
    }

    fn append(&self, entry: &ManifestEntry) -> CliResult<()> {
        let _guard = self.manifest.lock().expect("manifest lock");
        fs::create_dir_all(&self.root)?;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.root.join(MANIFEST_FILE))?;
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    fn entry(&self, id: &StageId, status: Status, seed: u64, inputs: &BTreeMap<String, String>, outputs: &BTreeMap<String, String>, started: f64, error: Option<String>) -> ManifestEntry {
        let prefix = format!("store/{}/{}/", id.stage, id.key);
        ManifestEntry {
            stage: id.stage.clone(),
            key: id.key.clone(),
            status,
            config_hash: id.config_hash.clone(),
            seed,
            inputs: inputs.clone(),
            outputs: outputs.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect(),
            started_unix: started,
            finished_unix: now(),
            source_revision: source_revision(),
            error,
        }
    }

    /// Runs `body` into a scratch directory and publishes it under the stage key,
    /// or skips when a verified record for the key already exists.
    ///
    /// Returns the record and whether the stage was skipped.
    pub fn run_stage(
        &self,
        id: &StageId,
        seed: u64,
        upstream: &[&StageRecord],
        body: impl FnOnce(&Path) -> CliResult<()>,
    ) -> CliResult<(StageRecord, bool)> {
        let lock = self.running.lock().expect("stage lock table").entry(id.label()).or_default().clone();
        let _guard = lock.lock().expect("stage lock");
        let started = now();
        let inputs: BTreeMap<String, String> = upstream
            .iter()
            .flat_map(|u| u.outputs.iter().map(move |(f, h)| (format!("{}/{}/{f}", u.stage, u.key), h.clone())))
            .collect();
        if let Some(rec) = self.record(id)? {
            tracing::info!(stage = %id.stage, key = %id.key, "skipped: outputs match the stored hashes");
            self.append(&self.entry(id, Status::Skipped, seed, &rec.inputs, &rec.outputs, started, None))?;
            return Ok((rec, true));
        }
        let final_dir = self.dir(id);
        let parent = final_dir.parent().expect("stage dir has a parent");
        fs::create_dir_all(parent)?;
        let scratch = parent.join(format!(".tmp-{}-{}", id.key, std::process::id()));
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        fs::create_dir_all(&scratch)?;
        tracing::info!(stage = %id.stage, key = %id.key, "started");
        let outcome = body(&scratch).and_then(|_| {
            let outputs = hash_tree(&scratch)?;
            let rec = StageRecord {
                stage: id.stage.clone(),
                key: id.key.clone(),
                config_hash: id.config_hash.clone(),
                seed,
                inputs: inputs.clone(),
                outputs,
            };
            fs::write(scratch.join(RECORD_FILE), serde_json::to_vec_pretty(&rec)?)?;
            if final_dir.exists() {
                fs::remove_dir_all(&final_dir)?;
            }
            fs::rename(&scratch, &final_dir)?;
            Ok(rec)
        });
        match outcome {
            Ok(rec) => {
                tracing::info!(stage = %id.stage, key = %id.key, files = rec.outputs.len(), "completed");
                self.append(&self.entry(id, Status::Completed, seed, &rec.inputs, &rec.outputs, started, None))?;
                Ok((rec, false))
            }
            Err(e) => {
                let _ = fs::remove_dir_all(&scratch);
                tracing::error!(stage = %id.stage, key = %id.key, error = %e, "failed");
                self.append(&self.entry(id, Status::Failed, seed, &inputs, &BTreeMap::new(), started, Some(e.to_string())))?;
                Err(e)
            }
        }
    }

    /// All manifest entries in append order.
    pub fn manifest_entries(&self) -> CliResult<Vec<ManifestEntry>> {
        let path = self.root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Ok(vec![]);
        }
        fs::read_to_string(&path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| CliError::Stage(format!("{}: {e}", path.display()))))
            .collect()
    }
}
