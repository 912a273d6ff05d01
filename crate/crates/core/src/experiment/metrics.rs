use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RoundPlan};
use super::{ExperimentError, Result};
use crate::model::{LossBundle, RoutingDecision};
use crate::protocol::Traffic;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const COST_FILE: &str = "cost.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const MERGES_FILE: &str = "merges.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const THEORY_FILE: &str = "theory.json";

/// One row per round. Evaluation columns are empty on rounds that were not
/// evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    /// Cumulative tokens consumed by all nodes.
    pub tokens: u64,
    /// Mean over nodes and local steps; absent when workers run remotely.
    pub train: Option<LossBundle>,
    pub eval: Option<LossBundle>,
    /// Fraction of top-k assignments per expert, summed over layers.
    pub utilization: Vec<f64>,
    /// Mutual information (nats) between sequence source and top-1 expert,
    /// averaged over layers.
    pub source_mi: Option<f64>,
    pub wall_secs: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub merge_alpha: Option<f64>,
    pub merge_displacement: Option<f64>,
}

impl MetricsRow {
    /// The row with wall time cleared, for determinism comparisons.
    pub fn without_wall_time(&self) -> Self {
        Self {
            wall_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub transport: String,
    pub plan: RoundPlan,
    /// HELLO, ASSIGN, initial model and BYE frames.
    pub setup_traffic: Traffic,
    pub wall_secs: f64,
    pub final_train: Option<LossBundle>,
    pub final_eval: Option<LossBundle>,
    pub files: Vec<String>,
}

const LOSS_FIELDS: [&str; 5] = ["total", "ce", "lb", "moe_z", "z"];

fn header(experts: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["round".into(), "tokens".into()];
    for prefix in ["train", "eval"] {
        h.extend(LOSS_FIELDS.iter().map(|f| format!("{prefix}_{f}")));
    }
    h.extend(
        [
            "source_mi",
            "wall_secs",
            "bytes_up",
            "bytes_down",
            "merge_alpha",
            "merge_displacement",
        ]
        .map(String::from),
    );
    h.extend((0..experts).map(|j| format!("util_{j}")));
    h
}

fn bundle_fields(b: &LossBundle) -> [f64; 5] {
    [b.total, b.ce, b.lb, b.moe_z, b.z]
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics(path: &Path, experts: usize, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(experts))?;
    for r in rows {
        let mut rec: Vec<String> = vec![r.round.to_string(), r.tokens.to_string()];
        for b in [&r.train, &r.eval] {
            match b {
                Some(b) => rec.extend(bundle_fields(b).iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat_n(String::new(), 5)),
            }
        }
        rec.push(opt(r.source_mi));
        rec.push(r.wall_secs.to_string());
        rec.push(r.bytes_up.to_string());
        rec.push(r.bytes_down.to_string());
        rec.push(opt(r.merge_alpha));
        rec.push(opt(r.merge_displacement));
        if r.utilization.is_empty() {
            rec.extend(std::iter::repeat_n(String::new(), experts));
        } else if r.utilization.len() == experts {
            rec.extend(r.utilization.iter().map(f64::to_string));
        } else {
            return Err(ExperimentError::Metrics(format!(
                "round {}: {} utilization entries for {experts} experts",
                r.round,
                r.utilization.len()
            )));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(line: usize, col: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| ExperimentError::Metrics(format!("line {line}: bad {col} value {s:?}")))
}

fn parse_opt(line: usize, col: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse(line, col, s).map(Some)
    }
}

/// Reads a metrics CSV back, rejecting unknown layouts and malformed cells.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let head: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let experts = head.iter().filter(|h| h.starts_with("util_")).count();
    if head != header(experts) {
        return Err(ExperimentError::Metrics(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let bundle = |at: usize| -> Result<Option<LossBundle>> {
            let v: Vec<Option<f64>> = (0..5)
                .map(|k| parse_opt(line, &head[at + k], cell(at + k)))
                .collect::<Result<_>>()?;
            if v.iter().all(Option::is_none) {
                return Ok(None);
            }
            let g = |k: usize| v[k].ok_or_else(|| ExperimentError::Metrics(format!("line {line}: partial loss columns")));
            Ok(Some(LossBundle {
                total: g(0)?,
                ce: g(1)?,
                lb: g(2)?,
                moe_z: g(3)?,
                z: g(4)?,
            }))
        };
        let utilization: Vec<f64> = (0..experts)
            .filter_map(|j| parse_opt(line, "utilization", cell(18 + j)).transpose())
            .collect::<Result<_>>()?;
        if !utilization.is_empty() && utilization.len() != experts {
            return Err(ExperimentError::Metrics(format!("line {line}: partial utilization")));
        }
        rows.push(MetricsRow {
            round: parse(line, "round", cell(0))?,
            tokens: parse(line, "tokens", cell(1))?,
            train: bundle(2)?,
            eval: bundle(7)?,
            source_mi: parse_opt(line, "source_mi", cell(12))?,
            wall_secs: parse(line, "wall_secs", cell(13))?,
            bytes_up: parse(line, "bytes_up", cell(14))?,
            bytes_down: parse(line, "bytes_down", cell(15))?,
            merge_alpha: parse_opt(line, "merge_alpha", cell(16))?,
            merge_displacement: parse_opt(line, "merge_displacement", cell(17))?,
            utilization,
        });
    }
    Ok(rows)
}

/// Fraction of `(token, slot)` assignments landing on each expert, pooled
/// over layers.
pub fn utilization(routing: &[RoutingDecision]) -> Vec<f64> {
    let Some(first) = routing.first() else {
        return Vec::new();
    };
    let mut counts = vec![0usize; first.probs.last_dim()];
    for r in routing {
        for (c, n) in counts.iter_mut().zip(r.assignment_counts()) {
            *c += n;
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// `I(source; top-1 expert)` in nats from the empirical joint distribution
/// of each layer, averaged over layers. `sources[p]` labels position `p`.
pub fn source_expert_mi(routing: &[RoutingDecision], sources: &[usize], num_sources: usize) -> f64 {
    if routing.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in routing {
        let m = r.probs.last_dim();
        let mut joint = vec![0.0f64; num_sources * m];
        for (p, &c) in sources.iter().enumerate().take(r.tokens()) {
            joint[c * m + r.selected_for(p)[0]] += 1.0;
        }
        let n: f64 = joint.iter().sum();
        let ps: Vec<f64> = joint.chunks(m).map(|row| row.iter().sum::<f64>() / n).collect();
        let pe: Vec<f64> = (0..m).map(|j| (0..num_sources).map(|c| joint[c * m + j]).sum::<f64>() / n).collect();
        for c in 0..num_sources {
            for j in 0..m {
                let pj = joint[c * m + j] / n;
                if pj > 0.0 {
                    total += pj * (pj / (ps[c] * pe[j])).ln();
                }
            }
        }
    }
    total / routing.len() as f64
}
