use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessSettings};
use crate::error::{Error, Result};
use crate::transfer::FineTuneHistory;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Grid,
    SizeSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Macro-F1 on the shared target test set.
    pub f1: f64,
    /// F1 of the positive class on the same predictions.
    pub binary_f1: f64,
    pub accuracy: f64,
    pub positive_rate: f64,
    /// Digest of the fine-tuning subset, for checking nestedness.
    pub train_subset_hash: String,
    pub history: FineTuneHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_f1: f64,
    pub min_f1: f64,
    pub max_f1: f64,
    pub mean_binary_f1: f64,
}

impl Summary {
    pub fn of(results: &[SeedResult]) -> Option<Summary> {
        if results.is_empty() {
            return None;
        }
        let n = results.len() as f64;
        let f1 = results.iter().map(|r| r.f1);
        Some(Summary {
            mean_f1: results.iter().map(|r| r.f1).sum::<f64>() / n,
            min_f1: f1.clone().fold(f64::INFINITY, f64::min),
            max_f1: f1.fold(f64::NEG_INFINITY, f64::max),
            mean_binary_f1: results.iter().map(|r| r.binary_f1).sum::<f64>() / n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell_id: String,
    pub config: ExperimentConfig,
    pub results: Vec<SeedResult>,
    pub summary: Option<Summary>,
    /// Set when the cell failed; the other cells still ran.
    pub error: Option<String>,
}

impl CellReport {
    pub fn mean_f1(&self) -> Option<f64> {
        self.summary.as_ref().map(|s| s.mean_f1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub kind: ReportKind,
    pub settings: HarnessSettings,
    pub cells: Vec<CellReport>,
}

impl Report {
    pub fn cell(&self, cell_id: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.cell_id == cell_id)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Report> {
        let r: Report = serde_json::from_str(s)?;
        if r.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::format("report", format!("unsupported format version {}", r.format_version)));
        }
        Ok(r)
    }

    /// One row per (cell, seed); failed cells get a single row carrying the
    /// error.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "cell_id",
            "weight_init",
            "freeze_plan",
            "embedding_init",
            "train_size",
            "objective",
            "seed",
            "f1",
            "binary_f1",
            "accuracy",
            "error",
        ])
        .map_err(csv_err)?;
        for c in &self.cells {
            let cfg = &c.config;
            let fixed = [
                c.cell_id.clone(),
                json_name(&cfg.weight_init)?,
                cfg.freeze_plan.to_string(),
                json_name(&cfg.embedding_init)?,
                cfg.train_size.to_string(),
                cfg.objective_for_pretrain.name().to_string(),
            ];
            if let Some(e) = &c.error {
                let mut row = fixed.to_vec();
                row.extend([String::new(), String::new(), String::new(), String::new(), e.clone()]);
                w.write_record(&row).map_err(csv_err)?;
            }
            for r in &c.results {
                let mut row = fixed.to_vec();
                row.extend([
                    r.seed.to_string(),
                    r.f1.to_string(),
                    r.binary_f1.to_string(),
                    r.accuracy.to_string(),
                    String::new(),
                ]);
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::format("report csv", e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format("report csv", e.to_string()))
    }

    /// Write `report.json` and `report.csv` into `dir`, each via a temporary
    /// file renamed into place.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("report.json"), self.to_json()?.as_bytes())?;
        write_atomic(&dir.join("report.csv"), self.to_csv()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Report> {
        Report::from_json(&fs::read_to_string(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("report csv", e.to_string())
}

fn json_name<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_value(v)?.as_str().unwrap_or_default().to_string())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Wall-clock seconds per cell, kept apart from the report so the report
/// itself is reproducible byte for byte.
pub fn write_timings(dir: &Path, timings: &BTreeMap<String, f64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = serde_json::to_string_pretty(timings)?;
    s.push('\n');
    write_atomic(&dir.join("timings.json"), s.as_bytes())
}
