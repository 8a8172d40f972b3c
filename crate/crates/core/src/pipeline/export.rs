use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use super::commands::Session;
use super::metrics::{read_metrics, Entry, MetricsRecord};
use crate::error::Result;

/// Columns of every cost table: the three trade-off axes and their x.
const COST_COLUMNS: [&str; 8] = [
    "stage",
    "density",
    "params_nonzero",
    "macs_per_sec",
    "macs_per_sec_theoretical",
    "rtf_median",
    "rtf_q1",
    "rtf_q3",
];

fn cell(r: &MetricsRecord, column: &str) -> String {
    if column == "stage" {
        return r.stage.to_string();
    }
    r.metrics
        .get(column)
        .or_else(|| r.timing.get(column))
        .map_or_else(String::new, |v| v.to_string())
}

/// Turn the metrics log into CSV tables under `exports/`: one cost table
/// per series (RTF, MACs per second and parameters against density) and
/// one table of probe accuracies. Returns the files written.
pub fn export_plots(s: &mut Session) -> Result<Vec<PathBuf>> {
    let records = read_metrics(&s.metrics_path())?;
    let mut series: BTreeMap<&str, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| matches!(r.kind.as_str(), "stage" | "profile" | "distill")) {
        series.entry(r.series.as_str()).or_default().push(r);
    }
    let dir = s.exports_dir();
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (name, rows) in &series {
        let mut out = COST_COLUMNS.join(",");
        out.push('\n');
        for r in rows {
            let cells: Vec<String> = COST_COLUMNS.iter().map(|c| cell(r, c)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, out)?;
        written.push(path);
    }

    let mut probes = String::from("series,checkpoint,depth,task,accuracy,dev_accuracy\n");
    for r in records.iter().filter(|r| r.kind == "probe") {
        let task = r
            .detail
            .as_ref()
            .and_then(|d| d.get("task"))
            .and_then(|t| t.as_str())
            .unwrap_or("");
        let _ = writeln!(
            probes,
            "{},{},{},{},{},{}",
            r.series,
            r.checkpoint.as_deref().unwrap_or(""),
            cell(r, "depth"),
            task,
            cell(r, "accuracy"),
            cell(r, "dev_accuracy"),
        );
    }
    let path = dir.join("probes.csv");
    fs::write(&path, probes)?;
    written.push(path);

    s.log(Entry::new("export", "export").metric("files", written.len() as f64))?;
    Ok(written)
}
