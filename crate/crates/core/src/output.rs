//! On-disk layout of a run directory:
//!
//! ```text
//! <run>/config.json      experiment config
//! <run>/reports.jsonl    one IterationReport per line
//! <run>/summary.csv      iteration,test_ap,hit_fraction,selected_count,checkpoint_epoch
//! <run>/influence.csv    only with store_influence
//! <run>/influence.jsonl  only with store_influence; read by `inspect`
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gbair::{InfluenceEntry, IterationReport, RunOutput};
use crate::tracin::{self, InfluenceRecord};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const INFLUENCE_CSV: &str = "influence.csv";
pub const INFLUENCE_JSONL: &str = "influence.jsonl";

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_reports(path: &Path, reports: &[IterationReport]) -> Result<()> {
    write_jsonl(path, reports)
}

pub fn read_reports(path: &Path) -> Result<Vec<IterationReport>> {
    read_jsonl(path)
}

pub fn write_summary_csv(path: &Path, reports: &[IterationReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iteration",
        "test_ap",
        "hit_fraction",
        "selected_count",
        "checkpoint_epoch",
    ])?;
    for r in reports {
        w.write_record([
            r.iteration.to_string(),
            r.test_ap.to_string(),
            r.hit_fraction.to_string(),
            r.selected_ids.len().to_string(),
            r.checkpoint_epoch.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_influence(path: &Path) -> Result<Vec<InfluenceEntry>> {
    read_jsonl(path)
}

/// Write all files of one run into `dir`, creating it if needed.
pub fn write_run(dir: &Path, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut config = serde_json::to_vec_pretty(&run.config)?;
    config.push(b'\n');
    write_bytes(&dir.join(CONFIG_FILE), &config)?;
    write_reports(&dir.join(REPORTS_FILE), &run.reports)?;
    write_summary_csv(&dir.join(SUMMARY_FILE), &run.reports)?;
    if run.config.store_influence {
        write_jsonl(&dir.join(INFLUENCE_JSONL), &run.influence)?;
        let records: Vec<InfluenceRecord> = run
            .influence
            .iter()
            .flat_map(|entry| {
                entry.retrieved.iter().map(|r| InfluenceRecord {
                    val_id: entry.val_id.clone(),
                    train_id: r.train_id.clone(),
                    score: r.score,
                    measure: entry.measure,
                    checkpoint_epochs: entry.checkpoint_epochs.clone(),
                })
            })
            .collect();
        tracin::write_influence_csv(&dir.join(INFLUENCE_CSV), &records)?;
    }
    Ok(())
}
