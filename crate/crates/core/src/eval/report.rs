use std::path::Path;

use serde::Serialize;

use super::MetricsReport;
use crate::error::{Error, Result};
use crate::model::Domain;

const HEADER: [&str; 11] = [
    "scenario", "model", "snr_db", "top1", "top5", "pr5", "r5", "map", "n_queries", "seed", "config_hash",
];

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// One row per report. Floats are written in shortest round-trip form, so
/// equal reports give byte-identical files.
pub fn export_report(reports: &[MetricsReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Empty("metric reports"));
    }
    let mut w = writer(path)?;
    w.write_record(HEADER)?;
    for r in reports {
        w.write_record([
            r.scenario.to_string(),
            r.model.clone(),
            r.snr_db.map(|s| s.to_string()).unwrap_or_default(),
            r.top1.to_string(),
            r.top5.to_string(),
            r.pr_at_k.to_string(),
            r.r_at_k.to_string(),
            r.map.to_string(),
            r.n_queries.to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionRow {
    pub track_id: String,
    pub singer_id: String,
    pub domain: Domain,
    pub x: f64,
    pub y: f64,
}

pub fn export_projection(rows: &[ProjectionRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty("projection rows"));
    }
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
