use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde_json::json;
use tracing::{info, warn};

use super::manifest::DatasetManifest;
use super::metrics::{compute_metrics, compute_run_metrics};
use super::overhead::aggregate_overhead;
use super::EvalError;
use crate::detect::{DetectionReport, Detector, Mode};
use crate::pipeline::IngestOptions;

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const OVERHEAD_FILE: &str = "overhead.json";

pub struct BatchOptions<'a> {
    pub mode: Mode,
    pub repeats: usize,
    /// Holds the journal and, once the batch completes, the outputs.
    pub out_dir: PathBuf,
    pub ingest: IngestOptions,
    /// Checked before each contract starts; in-flight contracts finish.
    pub cancel: Option<Arc<AtomicBool>>,
    /// Called after each report has been journaled.
    pub on_report: Option<&'a (dyn Fn(&DetectionReport) + Sync)>,
}

impl BatchOptions<'_> {
    pub fn new(mode: Mode, repeats: usize, out_dir: impl Into<PathBuf>) -> Self {
        BatchOptions {
            mode,
            repeats,
            out_dir: out_dir.into(),
            ingest: IngestOptions::default(),
            cancel: None,
            on_report: None,
        }
    }
}

#[derive(Debug)]
pub struct BatchOutcome {
    /// Reports for the completed entries, in manifest order.
    pub reports: Vec<DetectionReport>,
    /// Entries taken from an earlier journal instead of being rerun.
    pub resumed: usize,
    /// Every manifest entry has a report.
    pub complete: bool,
}

/// Line-delimited reports, synced to disk after every record.
struct Journal {
    file: Mutex<File>,
}

impl Journal {
    fn open(path: &Path) -> Result<Self, EvalError> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        Ok(Journal { file: Mutex::new(file) })
    }

    fn append(&self, report: &DetectionReport) -> Result<(), EvalError> {
        let mut line = serde_json::to_string(report).map_err(|e| EvalError::Journal(e.to_string()))?;
        line.push('\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(line.as_bytes()).and_then(|_| file.sync_data()).map_err(|e| EvalError::Journal(e.to_string()))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> EvalError {
    EvalError::Io(format!("{}: {e}", path.display()))
}

/// Reports already journaled in `path`, keyed by contract id. A torn last
/// line from an interrupted write is ignored.
pub fn read_journal(path: &Path) -> Result<HashMap<String, DetectionReport>, EvalError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        match serde_json::from_str::<DetectionReport>(line) {
            Ok(r) => {
                out.insert(r.contract_id.clone(), r);
            }
            Err(e) => warn!(line = i + 1, error = %e, "skipping unreadable journal line"),
        }
    }
    Ok(out)
}

/// Detects every manifest entry, skipping those already in the journal.
/// Per-contract failures become error reports; only journal I/O aborts.
pub fn run_batch(
    manifest: &DatasetManifest,
    detector: &Detector,
    opts: &BatchOptions<'_>,
) -> Result<BatchOutcome, EvalError> {
    manifest.validate()?;
    fs::create_dir_all(&opts.out_dir).map_err(|e| io_err(&opts.out_dir, e))?;
    let journal_path = opts.out_dir.join(REPORTS_FILE);
    let mut done = read_journal(&journal_path)?;
    done.retain(|id, _| manifest.get(id).is_some());
    let resumed = done.len();
    let pending: Vec<_> = manifest.entries.iter().filter(|e| !done.contains_key(&e.id)).collect();
    info!(total = manifest.len(), resumed, pending = pending.len(), "starting batch");

    let journal = Journal::open(&journal_path)?;
    let fresh = Mutex::new(Vec::new());
    let failure: Mutex<Option<EvalError>> = Mutex::new(None);
    let stop = AtomicBool::new(false);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(detector.cfg.concurrency_limit.max(1))
        .build()
        .map_err(|e| EvalError::Io(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        pending.par_iter().for_each(|entry| {
            let cancelled = opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst));
            if cancelled || stop.load(Ordering::SeqCst) {
                return;
            }
            let report =
                detector.detect_source(&entry.id, &entry.path_or_address, &opts.ingest, opts.mode, opts.repeats);
            if let Err(e) = journal.append(&report) {
                stop.store(true, Ordering::SeqCst);
                failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                return;
            }
            if let Some(hook) = opts.on_report {
                hook(&report);
            }
            fresh.lock().unwrap_or_else(|p| p.into_inner()).push(report);
        })
    });
    if let Some(e) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    for r in fresh.into_inner().unwrap_or_else(|p| p.into_inner()) {
        done.insert(r.contract_id.clone(), r);
    }
    let reports: Vec<_> = manifest.entries.iter().filter_map(|e| done.remove(&e.id)).collect();
    let complete = reports.len() == manifest.len();
    if complete {
        // Journal lines are in completion order; settle them into manifest
        // order so interrupted and uninterrupted runs leave the same file.
        write_reports(&journal_path, &reports)?;
    }
    Ok(BatchOutcome { reports, resumed, complete })
}

/// Writes `reports` as line-delimited JSON, replacing `path` atomically.
pub fn write_reports(path: &Path, reports: &[DetectionReport]) -> Result<(), EvalError> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r).map_err(|e| EvalError::Journal(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Writes `metrics.json` and `overhead.json` for `reports` into `dir`.
pub fn write_summaries(
    dir: &Path,
    manifest: &DatasetManifest,
    reports: &[DetectionReport],
) -> Result<serde_json::Value, EvalError> {
    let metrics = json!({
        "manifest": manifest.name,
        "entries": manifest.len(),
        "reports": reports.len(),
        "per_contract": compute_metrics::<f64>(manifest, reports)?,
        "per_run": compute_run_metrics::<f64>(manifest, reports)?,
    });
    let overhead =
        serde_json::to_value(aggregate_overhead::<f64>(reports)).map_err(|e| EvalError::Journal(e.to_string()))?;
    let pretty = |v: &serde_json::Value| serde_json::to_string_pretty(v).map(|s| s + "\n").unwrap_or_default();
    write_atomic(&dir.join(METRICS_FILE), pretty(&metrics).as_bytes())?;
    write_atomic(&dir.join(OVERHEAD_FILE), pretty(&overhead).as_bytes())?;
    Ok(json!({ "metrics": metrics, "overhead": overhead }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_journal_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(REPORTS_FILE);
        fs::write(&path, "{\"contract_id\":\"a\"").unwrap();
        assert!(read_journal(&path).unwrap().is_empty());
        assert!(read_journal(&dir.path().join("absent.jsonl")).unwrap().is_empty());
    }
}
