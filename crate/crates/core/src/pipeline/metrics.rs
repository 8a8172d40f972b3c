use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One line of `metrics.jsonl`.
///
/// Everything that depends on wall-clock time lives in `timestamp` and
/// `timing`; the rest is reproducible from the config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub timestamp: f64,
    pub run_id: String,
    pub command: String,
    /// Position in the log, counting from 0.
    pub seq: u64,
    /// Which curve the record belongs to, e.g. `weights` or `prefix-2`.
    pub series: String,
    /// Compression stage; non-decreasing within one command invocation.
    pub stage: usize,
    pub step: Option<usize>,
    pub kind: String,
    pub metrics: BTreeMap<String, f64>,
    pub timing: BTreeMap<String, f64>,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: Option<String>,
    pub detail: Option<Value>,
}

/// A record under construction.
#[derive(Clone, Debug, Default)]
pub struct Entry {
    pub series: String,
    pub stage: usize,
    pub step: Option<usize>,
    pub kind: String,
    pub metrics: BTreeMap<String, f64>,
    pub timing: BTreeMap<String, f64>,
    pub checkpoint: Option<String>,
    pub detail: Option<Value>,
}

impl Entry {
    pub fn new(kind: &str, series: &str) -> Self {
        Self {
            kind: kind.into(),
            series: series.into(),
            ..Self::default()
        }
    }

    pub fn stage(mut self, stage: usize) -> Self {
        self.stage = stage;
        self
    }

    pub fn step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }

    pub fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.into(), value);
        self
    }

    pub fn timing(mut self, name: &str, value: f64) -> Self {
        self.timing.insert(name.into(), value);
        self
    }

    pub fn checkpoint(mut self, path: impl Into<String>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    pub fn detail(mut self, detail: impl Serialize) -> Result<Self> {
        self.detail = Some(serde_json::to_value(detail)?);
        Ok(self)
    }
}

/// Append-only writer for one command's records.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    run_id: String,
    command: String,
    next_seq: u64,
    last_stage: usize,
}

impl MetricsLog {
    pub fn open(path: &Path, run_id: &str, command: &str) -> Result<Self> {
        let next_seq = match fs::read_to_string(path) {
            Ok(text) => text.lines().filter(|l| !l.trim().is_empty()).count() as u64,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            path: path.to_path_buf(),
            run_id: run_id.into(),
            command: command.into(),
            next_seq,
            last_stage: 0,
        })
    }

    pub fn append(&mut self, entry: Entry) -> Result<MetricsRecord> {
        if entry.stage < self.last_stage {
            return Err(Error::contract(format!(
                "stage {} logged after stage {}",
                entry.stage, self.last_stage
            )));
        }
        let record = MetricsRecord {
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
            run_id: self.run_id.clone(),
            command: self.command.clone(),
            seq: self.next_seq,
            series: entry.series,
            stage: entry.stage,
            step: entry.step,
            kind: entry.kind,
            metrics: entry.metrics,
            timing: entry.timing,
            checkpoint: entry.checkpoint,
            detail: entry.detail,
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        OpenOptions::new().create(true).append(true).open(&self.path)?.write_all(line.as_bytes())?;
        self.next_seq += 1;
        self.last_stage = record.stage;
        Ok(record)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                offset,
                message: format!("bad metrics record: {e}"),
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// The log with `timestamp` and `timing` removed from every line, for
/// comparing runs.
pub fn strip_timing(text: &str) -> Result<Vec<Value>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: Value = serde_json::from_str(l)?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove("timestamp");
                obj.remove("timing");
            }
            Ok(v)
        })
        .collect()
}
