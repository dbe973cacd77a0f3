//! Comparison tables across finished runs. Reads only; never touches inputs.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;
use umrm_core::align::{fmt_sig6, BonRow, BonSweep, TrajectoryLog};

use crate::config::{ReportParams, RunEntry};
use crate::error::CliError;
use crate::manifest::Outputs;
use crate::stages::{detect, BonSummary};

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub label: String,
    pub experts: usize,
    pub accuracy: Option<f64>,
    pub bon: Vec<BonRow>,
    pub bon_gap: Option<(usize, f64)>,
    pub divergence: Option<Option<usize>>,
    pub max_gold: Option<f64>,
    pub ppo_steps: Option<usize>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn missing(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Report(format!("{}: {e}", path.display()))
}

pub fn collect(entry: &RunEntry, params: &ReportParams) -> Result<RunRow, CliError> {
    let accuracy = match &entry.accuracy {
        Some(p) => {
            let v: Value = serde_json::from_str(&read(p)?).map_err(|e| missing(p, e))?;
            Some(v["accuracy"].as_f64().ok_or_else(|| missing(p, "no `accuracy` field"))?)
        }
        None => None,
    };
    let bon = match &entry.bon {
        Some(p) => BonSweep::rows_from_csv(&read(p)?).map_err(|e| missing(p, e))?,
        None => Vec::new(),
    };
    let bon_gap = match &entry.bon_summary {
        Some(p) => {
            let s: BonSummary = serde_json::from_str(&read(p)?).map_err(|e| missing(p, e))?;
            s.gaps.last().copied()
        }
        None => None,
    };
    let (divergence, max_gold, ppo_steps) = match &entry.trajectory {
        Some(p) => {
            let log = TrajectoryLog::from_csv(&read(p)?).map_err(|e| missing(p, e))?;
            (
                Some(detect(&log, &params.divergence)),
                log.gold().into_iter().reduce(f64::max),
                Some(log.len()),
            )
        }
        None => (None, None, None),
    };
    Ok(RunRow {
        label: entry.label.clone(),
        experts: entry.experts,
        accuracy,
        bon,
        bon_gap,
        divergence,
        max_gold,
        ppo_steps,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig6).unwrap_or_default()
}

fn divergence_cell(d: Option<Option<usize>>) -> String {
    match d {
        Some(Some(s)) => s.to_string(),
        Some(None) => "none".into(),
        None => String::new(),
    }
}

pub const REPORT_HEADER: &str = "label,experts,accuracy,bon_max_n,bon_win_rate,bon_gap,ppo_divergence_step,ppo_max_gold";

pub fn summary_csv(rows: &[RunRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let last = r.bon.last();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.label,
            r.experts,
            opt(r.accuracy),
            last.map(|b| b.n.to_string()).unwrap_or_default(),
            opt(last.map(|b| b.win_rate)),
            opt(r.bon_gap.map(|g| g.1)),
            divergence_cell(r.divergence),
            opt(r.max_gold),
        );
    }
    s
}

pub fn win_rate_csv(rows: &[RunRow]) -> String {
    let mut s = String::from("label,n,mean_proxy,mean_gold,win_rate\n");
    for r in rows {
        for b in &r.bon {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.label,
                b.n,
                fmt_sig6(b.mean_proxy),
                fmt_sig6(b.mean_gold),
                fmt_sig6(b.win_rate)
            );
        }
    }
    s
}

pub fn text_summary(rows: &[RunRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(16);
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$} {:>7} {:>9} {:>10} {:>9} {:>11} {:>9}", "model", "experts", "accuracy", "bon_win", "bon_gap", "divergence", "max_gold");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<w$} {:>7} {:>9} {:>10} {:>9} {:>11} {:>9}",
            r.label,
            r.experts,
            opt(r.accuracy),
            opt(r.bon.last().map(|b| b.win_rate)),
            opt(r.bon_gap.map(|g| g.1)),
            divergence_cell(r.divergence),
            opt(r.max_gold),
        );
    }
    let with_bon: Vec<&RunRow> = rows.iter().filter(|r| !r.bon.is_empty()).collect();
    if !with_bon.is_empty() {
        let _ = writeln!(s, "\nBest-of-N win rate against the first sample");
        let ns: Vec<usize> = with_bon[0].bon.iter().map(|b| b.n).collect();
        let _ = write!(s, "{:<w$}", "model");
        for n in &ns {
            let _ = write!(s, " {:>8}", format!("N={n}"));
        }
        s.push('\n');
        for r in with_bon {
            let _ = write!(s, "{:<w$}", r.label);
            for b in &r.bon {
                let _ = write!(s, " {:>8}", fmt_sig6(b.win_rate));
            }
            s.push('\n');
        }
    }
    s
}

pub fn report(p: &ReportParams, out: &mut Outputs) -> Result<(), CliError> {
    if p.runs.is_empty() {
        return Err(CliError::Config("report needs at least one run".into()));
    }
    let mut rows = p.runs.iter().map(|e| collect(e, p)).collect::<Result<Vec<_>, _>>()?;
    rows.sort_by_key(|r| r.experts);
    out.write("report.csv", summary_csv(&rows).as_bytes())?;
    out.write("bon_win_rates.csv", win_rate_csv(&rows).as_bytes())?;
    out.write("report.txt", text_summary(&rows).as_bytes())?;
    Ok(())
}
