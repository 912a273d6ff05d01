use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Paradigm;
use super::metrics::{read_metrics, Manifest, COST_FILE, LEDGER_FILE, MANIFEST_FILE, METRICS_FILE, THEORY_FILE};
use super::runner::CostFile;
use super::{ExperimentError, Result};
use crate::model::LossBundle;
use crate::protocol::CommLedger;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// Column sums of the metrics CSV.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub rounds: usize,
    /// Tokens of the last row (the column is cumulative).
    pub tokens: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub merges: usize,
    pub merge_displacement: f64,
}

/// Measured parameter traffic against the analytic formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerCheck {
    pub rounds_checked: usize,
    /// Analytic parameters on the wire per round for this paradigm.
    pub analytic_units: u64,
    pub analytic_bytes: u64,
    /// Enumerated framing bytes per round.
    pub overhead_bytes: u64,
    /// Largest and smallest measured model bytes of any round.
    pub measured_max: u64,
    pub measured_min: u64,
    /// Every round lies in `[analytic, analytic + overhead]`.
    pub within_overhead: bool,
    /// `overhead / analytic`
    pub relative_overhead: f64,
    /// Measured bytes over the DiLoCo analytic bytes, versus the cost
    /// report's ratio for this paradigm.
    pub measured_ratio: f64,
    pub expected_ratio: f64,
    pub ratio_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dir: PathBuf,
    pub no_rounds: bool,
    pub paradigm: Option<Paradigm>,
    pub totals: Totals,
    pub final_train: Option<LossBundle>,
    pub final_eval: Option<LossBundle>,
    pub cost: Option<CostFile>,
    pub ledger: Option<LedgerCheck>,
    pub theory: Option<serde_json::Value>,
    /// Missing or unreadable side files.
    pub issues: Vec<String>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, issues: &mut Vec<String>) -> Option<T> {
    match fs::read_to_string(path) {
        Ok(text) => match serde_json::from_str(&text) {
            Ok(v) => Some(v),
            Err(e) => {
                issues.push(format!("{}: corrupt ({e})", path.display()));
                None
            }
        },
        Err(_) => {
            issues.push(format!("{}: missing", path.display()));
            None
        }
    }
}

pub fn ledger_check(ledger: &CommLedger, cost: &CostFile) -> Option<LedgerCheck> {
    let per_round = ledger.model_traffic_by_round();
    // round 0 carries only the initial download
    let rounds: Vec<u64> = per_round
        .iter()
        .filter(|(r, t)| **r > 0 && t.up > 0)
        .map(|(_, t)| t.total())
        .collect();
    if rounds.is_empty() {
        return None;
    }
    let r = &cost.report;
    let units = match cost.paradigm {
        Paradigm::Spes => r.comm.spes,
        _ => r.comm.diloco,
    };
    let w = cost.bytes_per_param;
    let analytic = units * w;
    let overhead = cost.round_overhead.total();
    let max = *rounds.iter().max().expect("non-empty");
    let min = *rounds.iter().min().expect("non-empty");
    let diloco = (r.comm.diloco * w) as f64;
    Some(LedgerCheck {
        rounds_checked: rounds.len(),
        analytic_units: units,
        analytic_bytes: analytic,
        overhead_bytes: overhead,
        measured_max: max,
        measured_min: min,
        within_overhead: min >= analytic && max <= analytic + overhead,
        relative_overhead: overhead as f64 / analytic as f64,
        measured_ratio: max as f64 / diloco,
        expected_ratio: if cost.paradigm == Paradigm::Spes { r.comm_ratio } else { 1.0 },
        ratio_tolerance: overhead as f64 / diloco,
    })
}

impl LedgerCheck {
    pub fn ratio_ok(&self) -> bool {
        // slack for the rounding of the three divisions
        (self.measured_ratio - self.expected_ratio).abs() <= self.ratio_tolerance * (1.0 + 1e-9)
    }
}

/// Summarizes a metrics directory. A directory without rounds yields an
/// explicit "no rounds" report; a missing directory or a malformed metrics
/// file is an error.
pub fn emit_report(dir: &Path) -> Result<Report> {
    if !dir.is_dir() {
        return Err(ExperimentError::Metrics(format!("{} is not a run directory", dir.display())));
    }
    let mut issues = Vec::new();
    let metrics = dir.join(METRICS_FILE);
    let rows = if metrics.exists() { read_metrics(&metrics)? } else { Vec::new() };
    let mut report = Report {
        dir: dir.to_path_buf(),
        no_rounds: rows.is_empty(),
        paradigm: None,
        totals: Totals::default(),
        final_train: None,
        final_eval: None,
        cost: None,
        ledger: None,
        theory: None,
        issues: Vec::new(),
    };
    if dir.join(THEORY_FILE).exists() {
        report.theory = read_json(&dir.join(THEORY_FILE), &mut issues);
    }
    if !rows.is_empty() {
        let t = &mut report.totals;
        t.rounds = rows.len();
        t.tokens = rows.last().map_or(0, |r| r.tokens);
        for r in &rows {
            t.bytes_up += r.bytes_up;
            t.bytes_down += r.bytes_down;
            if let Some(d) = r.merge_displacement {
                t.merges += 1;
                t.merge_displacement += d;
            }
        }
        report.final_train = rows.iter().rev().find_map(|r| r.train);
        report.final_eval = rows.iter().rev().find_map(|r| r.eval);
        let manifest: Option<Manifest> = read_json(&dir.join(MANIFEST_FILE), &mut issues);
        report.paradigm = manifest.map(|m| m.config.paradigm);
        report.cost = read_json(&dir.join(COST_FILE), &mut issues);
        if report.paradigm != Some(Paradigm::Centralized) {
            let ledger: Option<CommLedger> = read_json(&dir.join(LEDGER_FILE), &mut issues);
            if let (Some(l), Some(c)) = (&ledger, &report.cost) {
                report.ledger = ledger_check(l, c);
            }
        }
    }
    report.issues = issues;
    fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(&report)?)?;
    fs::write(dir.join(REPORT_TEXT), report.text())?;
    Ok(report)
}

fn bundle_line(name: &str, b: &LossBundle) -> String {
    format!(
        "{name:<12} total {:.5}  ce {:.5}  lb {:.5}  moe_z {:.5}  z {:.3e}\n",
        b.total, b.ce, b.lb, b.moe_z, b.z
    )
}

impl Report {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run: {}", self.dir.display());
        if self.no_rounds {
            let _ = writeln!(s, "no rounds recorded");
            return s;
        }
        if let Some(p) = self.paradigm {
            let _ = writeln!(s, "paradigm: {p:?}");
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "rounds {}  tokens {}  bytes up {}  bytes down {}  merges {} (displacement² {:.4e})",
            t.rounds, t.tokens, t.bytes_up, t.bytes_down, t.merges, t.merge_displacement
        );
        s.push_str("\nfinal losses\n");
        if let Some(b) = &self.final_train {
            s.push_str(&bundle_line("train", b));
        }
        if let Some(b) = &self.final_eval {
            s.push_str(&bundle_line("eval", b));
        }
        if let Some(c) = &self.cost {
            let r = &c.report;
            let _ = writeln!(
                s,
                "\ncost (parameter units)\n|ψ| {}  |Φ| {}  max |Φᵢ| {}  N {}\nmemory per node: centralized {}  diloco {}  spes {}  (ratio {:.4})\ncomm per round: diloco {}  spes {}  (ratio {:.4})",
                r.counts.shared,
                r.counts.experts,
                r.counts.max_node_experts(),
                r.nodes,
                r.memory.centralized,
                r.memory.diloco,
                r.memory.spes,
                r.memory_ratio,
                r.comm.diloco,
                r.comm.spes,
                r.comm_ratio
            );
        }
        if let Some(l) = &self.ledger {
            let _ = writeln!(
                s,
                "\nledger: {} rounds, measured {}..{} bytes vs analytic {} + overhead ≤ {} ({})\nmeasured/diloco ratio {:.5} vs expected {:.5} ± {:.5} ({})",
                l.rounds_checked,
                l.measured_min,
                l.measured_max,
                l.analytic_bytes,
                l.overhead_bytes,
                if l.within_overhead { "ok" } else { "MISMATCH" },
                l.measured_ratio,
                l.expected_ratio,
                l.ratio_tolerance,
                if l.ratio_ok() { "ok" } else { "MISMATCH" }
            );
        }
        if let Some(th) = &self.theory {
            let _ = writeln!(s, "\ntheory\n{}", serde_json::to_string_pretty(th).unwrap_or_default());
        }
        for i in &self.issues {
            let _ = writeln!(s, "warning: {i}");
        }
        s
    }
}
