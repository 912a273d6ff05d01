use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{run_experiment, RunOptions, Transport};
use super::{ExperimentError, Result};

pub const SUMMARY_FILE: &str = "summary.csv";

/// Cartesian grid over the listed axes; an empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub h: Vec<usize>,
    #[serde(default)]
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub t_merge: Vec<usize>,
    /// Keep `N · batch` fixed at this many sequences per step.
    #[serde(default)]
    pub global_batch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub index: usize,
    pub h: usize,
    pub nodes: usize,
    pub alpha: f64,
    pub k: usize,
    pub t_merge: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: AblationCell,
    pub rounds: Option<usize>,
    pub final_eval_ce: Option<f64>,
    pub final_train_loss: Option<f64>,
    /// `(round, eval ce)` of every evaluated round.
    pub eval_curve: Vec<(u32, f64)>,
    pub error: Option<String>,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl AblationGrid {
    pub fn new(base: ExperimentConfig) -> Self {
        Self {
            base,
            h: Vec::new(),
            nodes: Vec::new(),
            alpha: Vec::new(),
            k: Vec::new(),
            t_merge: Vec::new(),
            global_batch: None,
        }
    }

    pub fn cells(&self) -> Vec<AblationCell> {
        let b = &self.base;
        let mut out = Vec::new();
        for &h in &axis(&self.h, b.h) {
            for &nodes in &axis(&self.nodes, b.nodes) {
                for &alpha in &axis(&self.alpha, b.merge.alpha0) {
                    for &k in &axis(&self.k, b.merge.k) {
                        for &t_merge in &axis(&self.t_merge, b.merge.t_merge) {
                            let batch = self.global_batch.map_or(b.batch, |g| g / nodes.max(1));
                            out.push(AblationCell {
                                index: out.len(),
                                h,
                                nodes,
                                alpha,
                                k,
                                t_merge,
                                batch,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn config_for(&self, cell: &AblationCell) -> Result<ExperimentConfig> {
        if let Some(g) = self.global_batch {
            if cell.nodes == 0 || g % cell.nodes != 0 {
                return Err(ExperimentError::Config(format!(
                    "global batch {g} does not split over {} nodes",
                    cell.nodes
                )));
            }
        }
        let mut cfg = self.base.clone();
        cfg.h = cell.h;
        cfg.nodes = cell.nodes;
        cfg.batch = cell.batch;
        cfg.merge.alpha0 = cell.alpha;
        cfg.merge.k = cell.k;
        cfg.merge.t_merge = cell.t_merge;
        Ok(cfg)
    }
}

/// Runs every cell with the base corpus and seeds. A failing cell is
/// recorded and the grid continues.
pub fn run_ablation(grid: &AblationGrid, out_dir: Option<&Path>, transport: Transport) -> Result<Vec<CellOutcome>> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let cells = grid.cells();
    let mut outcomes = Vec::with_capacity(cells.len());
    for cell in cells {
        info!("ablation cell {}: {:?}", cell.index, cell);
        let opts = RunOptions {
            out_dir: out_dir.map(|d| d.join(format!("cell-{:03}", cell.index))),
            transport,
        };
        let result = grid.config_for(&cell).and_then(|cfg| run_experiment(&cfg, &opts));
        outcomes.push(match result {
            Ok(run) => CellOutcome {
                cell,
                rounds: Some(run.rows.len()),
                final_eval_ce: run.manifest.final_eval.map(|e| e.ce),
                final_train_loss: run.manifest.final_train.map(|e| e.total),
                eval_curve: run.eval_curve(),
                error: None,
            },
            Err(e) => {
                warn!("ablation cell {} failed: {e}", cell.index);
                CellOutcome {
                    cell,
                    rounds: None,
                    final_eval_ce: None,
                    final_train_loss: None,
                    eval_curve: Vec::new(),
                    error: Some(e.to_string()),
                }
            }
        });
    }
    if let Some(dir) = out_dir {
        write_summary(&dir.join(SUMMARY_FILE), &outcomes)?;
    }
    Ok(outcomes)
}

pub fn write_summary(path: &Path, outcomes: &[CellOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cell",
        "h",
        "nodes",
        "alpha",
        "k",
        "t_merge",
        "batch",
        "rounds",
        "final_eval_ce",
        "final_train_loss",
        "error",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for o in outcomes {
        let c = &o.cell;
        w.write_record([
            c.index.to_string(),
            c.h.to_string(),
            c.nodes.to_string(),
            c.alpha.to_string(),
            c.k.to_string(),
            c.t_merge.to_string(),
            c.batch.to_string(),
            o.rounds.map(|r| r.to_string()).unwrap_or_default(),
            opt(o.final_eval_ce),
            opt(o.final_train_loss),
            o.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
