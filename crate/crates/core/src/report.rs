//! Human-readable summary of a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::{LedgerEntry, RunDir, RunMetrics};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("run directory incomplete, {}: {e}", path.display())))
}

pub fn load_run(run_dir: &Path) -> Result<(RunMetrics, Vec<LedgerEntry>)> {
    let dir = RunDir::new(run_dir);
    let metrics: RunMetrics = serde_json::from_str(&read(&dir.metrics_json())?)?;
    let ledgers: Vec<LedgerEntry> = serde_json::from_str(&read(&dir.ledger_json())?)?;
    Ok((metrics, ledgers))
}

fn millions(v: u64) -> String {
    format!("{:.4}", v as f64 / 1e6)
}

/// Accuracy table (methods × clients + Avg, in percent), then the
/// communication ledger and client training cost.
pub fn render(metrics: &RunMetrics, ledgers: &[LedgerEntry]) -> String {
    let mut s = String::new();
    let k = metrics.num_clients;
    let _ = write!(s, "{:<16}", "Method");
    for c in 0..k {
        let _ = write!(s, "{:>10}", format!("client {c}"));
    }
    let _ = writeln!(s, "{:>10}", "Avg");
    let best = metrics
        .rows
        .iter()
        .map(|r| r.average)
        .fold(f64::NEG_INFINITY, f64::max);
    for r in &metrics.rows {
        let _ = write!(s, "{:<16}", r.method);
        for v in &r.per_client {
            let _ = write!(s, "{:>10.2}", 100.0 * v);
        }
        let mark = if r.average == best { " *" } else { "" };
        let _ = writeln!(s, "{:>10.2}{mark}", 100.0 * r.average);
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<16}{:>14}{:>14}{:>14}{:>16}{:>10}",
        "Ledger", "Upload (M)", "Download (M)", "Total (M)", "Flops (G)", "Rounds"
    );
    for l in ledgers {
        let r = &l.report;
        let _ = writeln!(
            s,
            "{:<16}{:>14}{:>14}{:>14}{:>16.4}{:>10}",
            l.method,
            millions(r.upload_params),
            millions(r.download_params),
            millions(r.total_params),
            r.train_flops as f64 / 1e9,
            r.rounds
        );
    }
    let _ = writeln!(s, "\nBytes");
    for l in ledgers {
        let _ = writeln!(
            s,
            "  {:<14} upload {} B, download {} B",
            l.method, l.report.upload_bytes, l.report.download_bytes
        );
    }
    s
}

pub fn emit_report(run_dir: &Path) -> Result<String> {
    let (m, l) = load_run(run_dir)?;
    Ok(render(&m, &l))
}
