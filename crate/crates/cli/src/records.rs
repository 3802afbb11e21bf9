use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rla_core::evalkit::EvalReport;
use rla_core::extractor::ExtractorModel;
use rla_core::io;
use rla_core::rla::{LoraPool, RlaOutcome};
use rla_core::{Error, Result};

pub const EVALUATION_KIND: &str = "evaluation";
pub const RLA_KIND: &str = "rla-adaptation";

/// Output of `adapt-rla`: the weights plus enough context to rebuild the
/// aggregated model from the same pool.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RlaReport {
    pub kind: String,
    pub base_checksum: u64,
    pub pool_dir: PathBuf,
    /// Pool order; `alpha[k]` scales `environments[k]`.
    pub environments: Vec<String>,
    pub outcome: RlaOutcome,
}

impl RlaReport {
    pub fn new(pool: &LoraPool, outcome: RlaOutcome, base: &ExtractorModel, pool_dir: &Path) -> Self {
        Self {
            kind: RLA_KIND.into(),
            base_checksum: base.checksum(),
            pool_dir: pool_dir.to_path_buf(),
            environments: pool.environment_ids().iter().map(|s| s.to_string()).collect(),
            outcome,
        }
    }

    pub fn check_pool(&self, pool: &LoraPool, path: &Path) -> Result<()> {
        let ids: Vec<&str> = pool.environment_ids();
        if ids != self.environments.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "report pool {:?} does not match pool directory {:?}",
                    self.environments, ids
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub kind: String,
    pub label: String,
    pub model: PathBuf,
    pub adapter: Option<PathBuf>,
    pub data: PathBuf,
    pub report: EvalReport,
}

impl EvaluationRecord {
    pub fn new(label: String, model: &Path, adapter: Option<&Path>, data: &Path, report: EvalReport) -> Self {
        Self {
            kind: EVALUATION_KIND.into(),
            label,
            model: model.to_path_buf(),
            adapter: adapter.map(Path::to_path_buf),
            data: data.to_path_buf(),
            report,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub eer: f64,
    pub auc: f64,
    pub pair_count: usize,
    pub file: PathBuf,
}

/// Consolidated table over every evaluation record in a directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn collect(dir: &Path) -> Result<Self> {
        let io_err = |source| Error::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(io_err)?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
        paths.sort();
        let mut rows = Vec::new();
        for p in paths {
            let value: serde_json::Value = match io::load_json(&p) {
                Ok(v) => v,
                Err(_) => continue,
            };
            if value.get("kind").and_then(|k| k.as_str()) != Some(EVALUATION_KIND) {
                continue;
            }
            let rec: EvaluationRecord = serde_json::from_value(value).map_err(|e| Error::Format {
                path: p.clone(),
                reason: e.to_string(),
            })?;
            rows.push(SummaryRow {
                label: rec.label,
                eer: rec.report.eer,
                auc: rec.report.auc,
                pair_count: rec.report.pair_count,
                file: p,
            });
        }
        rows.sort_by(|a, b| a.label.cmp(&b.label));
        Ok(Self { rows })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("label,eer,auc,pair_count\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.label, r.eer, r.auc, r.pair_count));
        }
        s
    }
}
