//! Pipeline runs over one swept axis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use blemish_core::digest::json_hash;
use blemish_core::eval::Metrics;

use crate::config::{RunConfig, SweepAxis, SweepValue};
use crate::error::{CliError, CliResult};
use crate::stages::Pipeline;
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: serde_json::Value,
    /// Key of the evaluate stage that produced the row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Method → split (`all`, `id`, `ood`) → embedder → means.
    pub aggregates: BTreeMap<String, BTreeMap<String, BTreeMap<String, Metrics>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// `value  method  I  R  T` per method, oracle aggregates over all cases.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:<22} {:>9} {:>9} {:>9}\n", "value", "method", "I", "R", "T");
        for row in &self.rows {
            let v = row.value.to_string();
            if let Some(e) = &row.error {
                let _ = writeln!(s, "{v:<12} failed: {e}");
                continue;
            }
            for (method, splits) in &row.aggregates {
                if let Some(m) = splits.get("all").and_then(|e| e.get("oracle")) {
                    let t = m.t.map_or("-".into(), |t| format!("{t:.4}"));
                    let _ = writeln!(s, "{v:<12} {method:<22} {:>9.4} {:>9.4} {t:>9}", m.i, m.r);
                }
            }
        }
        s
    }
}

/// Runs the pipeline once per value with up to `workers` runs in parallel.
///
/// Every value uses the configured seed, so stages that do not depend on
/// the swept axis are shared through the store and a single-value sweep
/// reproduces a plain run. Failed values are recorded and the sweep continues.
pub fn run_sweep(cfg: &RunConfig, store: &Store, workers: usize) -> CliResult<SweepReport> {
    let spec = cfg.sweep.as_ref().ok_or_else(|| CliError::Config("the config has no [sweep] section".into()))?;
    let values = spec.typed_values()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| CliError::Stage(e.to_string()))?;
    let run_one = |value: SweepValue| -> SweepRow {
        let derived = cfg.with_value(spec.axis, value);
        let value = serde_json::to_value(value).expect("sweep values serialize");
        tracing::info!(axis = ?spec.axis, value = %value, "sweep run");
        let pipeline = Pipeline::new(&derived, store);
        match pipeline.run_all() {
            Ok((rec, reports)) => {
                let aggregates = reports
                    .into_iter()
                    .map(|r| {
                        let mut splits = r.by_split;
                        splits.insert("all".into(), r.aggregate);
                        (r.method, splits)
                    })
                    .collect();
                SweepRow { value, evaluate_key: Some(rec.key), error: None, aggregates }
            }
            Err(e) => SweepRow { value, evaluate_key: None, error: Some(e.to_string()), aggregates: BTreeMap::new() },
        }
    };
    let rows: Vec<SweepRow> = pool.install(|| values.par_iter().map(|v| run_one(*v)).collect());
    let report = SweepReport { axis: spec.axis, config_hash: json_hash(cfg), rows };
    let dir = store.root().join("sweeps");
    std::fs::create_dir_all(&dir)?;
    let name = format!("{}-{}.json", serde_json::to_value(spec.axis)?.as_str().unwrap_or("axis"), &report.config_hash[..12]);
    std::fs::write(dir.join(name), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}
