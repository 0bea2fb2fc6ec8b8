//! CSV and JSON artifacts.
//!
//! `history.csv` has one row per epoch with the columns of
//! [`EpochRecord::CSV_HEADER`]. Evaluation CSVs use [`EVAL_CSV_HEADER`];
//! empty cells mean the value does not apply to the mode. Accuracies are
//! percentages, compactness is a cosine in [-1, 1].

use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use srwgan_core::data::TaskMode;
use srwgan_core::evaluation::EvalReport;
use srwgan_core::model::Variant;
use srwgan_core::training::{EpochRecord, RunHistory};

use crate::blob::{write_bytes, write_json};
use crate::error::Result;

pub const EVAL_CSV_HEADER: &str = "mode,n_synth,unseen,seen,harmonic,fn_seen,fn_unseen,ri";

pub fn history_csv(history: &RunHistory) -> String {
    let mut s = String::from(EpochRecord::CSV_HEADER);
    s.push('\n');
    for r in &history.records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn eval_csv_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.mode.as_str(),
        r.n_synth,
        r.unseen,
        cell(r.seen),
        cell(r.harmonic),
        cell(r.fn_seen),
        cell(r.fn_unseen),
        cell(r.ri)
    )
}

pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{EVAL_CSV_HEADER}\n");
    for r in reports {
        s.push_str(&eval_csv_row(r));
        s.push('\n');
    }
    s
}

/// `summary.json` of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub dataset: String,
    pub mode: TaskMode,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub last: Option<EpochRecord>,
    pub eval: EvalReport,
}

/// Wall-clock facts kept out of the deterministic artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix: u64,
    pub seconds: f64,
}

impl Timing {
    pub fn new(started: SystemTime, elapsed: Duration) -> Self {
        let started_unix = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { started_unix, seconds: elapsed.as_secs_f64() }
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn write_timing(path: &Path, t: &Timing) -> Result<()> {
    write_json(path, t)
}
