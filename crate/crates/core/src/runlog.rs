//! Line-delimited typed run records.
//!
//! A RunLog is a JSONL file: one header record followed by step, eval,
//! clip, diagnostic and trajectory records. Re-running an identical config
//! and seed reproduces the file byte for byte (single-threaded mode), so no
//! wall-clock fields live here.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::diagnostics::{SubspaceReport, TermNormRecord, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::optim::ClipReport;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogRecord {
    Header {
        config: ExperimentConfig,
        seed: u64,
        code_version: String,
    },
    Step {
        step: u64,
        loss: f64,
        grad_norm: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        perturbation_norm: Option<f64>,
        skipped_perturbation: bool,
        backwards: u32,
    },
    Eval {
        step: u64,
        train_loss: f64,
        eval_loss: f64,
        train_metric: f64,
        eval_metric: f64,
    },
    Clip {
        step: u64,
        #[serde(flatten)]
        report: ClipReport,
    },
    TermNorms(TermNormRecord),
    Subspace(SubspaceReport),
    Trajectory(TrajectoryRecord),
}

impl LogRecord {
    pub fn step_index(&self) -> Option<u64> {
        match self {
            LogRecord::Header { .. } => None,
            LogRecord::Step { step, .. }
            | LogRecord::Eval { step, .. }
            | LogRecord::Clip { step, .. } => Some(*step),
            LogRecord::TermNorms(r) => Some(r.step),
            LogRecord::Subspace(r) => Some(r.step),
            LogRecord::Trajectory(r) => Some(r.step),
        }
    }
}

/// Collects records in memory and mirrors them to a JSONL file.
pub struct RunLogWriter {
    out: Option<BufWriter<File>>,
    records: Vec<LogRecord>,
}

impl RunLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(RunLogWriter {
            out: Some(BufWriter::new(File::create(path)?)),
            records: Vec::new(),
        })
    }

    pub fn in_memory() -> Self {
        RunLogWriter {
            out: None,
            records: Vec::new(),
        }
    }

    pub fn append(&mut self, record: LogRecord) -> Result<()> {
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(&record).map_err(|e| Error::Data(e.to_string()))?;
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<LogRecord>> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(self.records)
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }
}

/// Parse a JSONL run log.
pub fn read_runlog(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("run log line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// The header config of a run log, if present.
pub fn header_config(records: &[LogRecord]) -> Option<&ExperimentConfig> {
    records.iter().find_map(|r| match r {
        LogRecord::Header { config, .. } => Some(config),
        _ => None,
    })
}

/// Check that step indices are strictly increasing within each record kind.
pub fn validate_monotone_steps(records: &[LogRecord]) -> Result<()> {
    use std::collections::HashMap;
    let mut last: HashMap<&'static str, u64> = HashMap::new();
    for rec in records {
        let kind = match rec {
            LogRecord::Header { .. } => continue,
            LogRecord::Step { .. } => "step",
            LogRecord::Eval { .. } => "eval",
            LogRecord::Clip { .. } => "clip",
            LogRecord::TermNorms(_) => "term-norms",
            LogRecord::Subspace(_) => "subspace",
            LogRecord::Trajectory(_) => "trajectory",
        };
        let step = rec.step_index().unwrap();
        if let Some(&prev) = last.get(kind) {
            if step <= prev && !matches!(rec, LogRecord::TermNorms(_) | LogRecord::Subspace(_)) {
                return Err(Error::Contract(format!(
                    "non-increasing {kind} step index: {prev} then {step}"
                )));
            }
            if step < prev {
                return Err(Error::Contract(format!(
                    "decreasing {kind} step index: {prev} then {step}"
                )));
            }
        }
        last.insert(kind, step);
    }
    Ok(())
}
