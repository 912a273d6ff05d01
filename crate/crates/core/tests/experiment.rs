use std::fs;

use spes_core::experiment::{
    emit_report, evaluate, gen_corpus, preset, read_metrics, run_ablation, run_experiment, run_setup, AblationGrid, CorpusSpec,
    ExperimentConfig, Paradigm, RunOptions, RunSetup, ShardPolicy, Transport, COST_FILE, LEDGER_FILE, MANIFEST_FILE,
    METRICS_FILE, REPORT_JSON, SUMMARY_FILE,
};
use spes_core::merging::MergeSchedule;
use spes_core::protocol::{CommLedger, Direction, MessageKind};

fn tiny() -> ExperimentConfig {
    preset("desk-tiny").unwrap()
}

fn quiet() -> RunOptions {
    RunOptions::default()
}

/// Ledger entries in a fixed order; arrival order across nodes is not.
fn canonical(l: &CommLedger) -> Vec<(u32, usize, Direction, MessageKind, u64, Vec<String>)> {
    let mut v: Vec<_> = l
        .entries
        .iter()
        .map(|e| (e.round, e.node, e.direction, e.kind, e.bytes, e.blocks.clone()))
        .collect();
    v.sort();
    v
}

#[test]
fn runs_are_deterministic_up_to_wall_time() {
    for paradigm in [Paradigm::Spes, Paradigm::Diloco, Paradigm::Centralized] {
        let cfg = ExperimentConfig { paradigm, ..tiny() }.normalized();
        let a = run_experiment(&cfg, &quiet()).unwrap();
        let b = run_experiment(&cfg, &quiet()).unwrap();
        assert!(a.model.bit_eq(&b.model), "{paradigm:?}");
        let strip = |rows: &[spes_core::experiment::MetricsRow]| {
            rows.iter().map(|r| r.without_wall_time()).collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.rows), strip(&b.rows));
        assert_eq!(canonical(&a.ledger), canonical(&b.ledger));
    }
}

#[test]
fn tcp_and_in_process_runs_are_bit_identical() {
    let mut cfg = tiny();
    cfg.merge = MergeSchedule {
        t_merge: 3,
        interval: 1,
        alpha0: 0.1,
        k: 1,
        basis: Default::default(),
    };
    let mem = run_experiment(&cfg, &quiet()).unwrap();
    let tcp = run_experiment(
        &cfg,
        &RunOptions {
            out_dir: None,
            transport: Transport::Tcp,
        },
    )
    .unwrap();
    assert!(mem.model.bit_eq(&tcp.model));
    assert_eq!(canonical(&mem.ledger), canonical(&tcp.ledger));
    let strip = |o: &spes_core::experiment::RunOutput| o.rows.iter().map(|r| r.without_wall_time()).collect::<Vec<_>>();
    assert_eq!(strip(&mem), strip(&tcp));
    assert_eq!(mem.merges.len(), 3);
}

#[test]
fn zero_alpha_merge_matches_disabled() {
    let base = tiny();
    let mut zero = base.clone();
    zero.merge = MergeSchedule {
        t_merge: 4,
        interval: 1,
        alpha0: 0.0,
        k: 2,
        basis: Default::default(),
    };
    let a = run_experiment(&base, &quiet()).unwrap();
    let b = run_experiment(&zero, &quiet()).unwrap();
    assert!(a.model.bit_eq(&b.model));
    assert!(b.merges.iter().all(|m| m.displacement_sq() == 0.0));
}

#[test]
fn centralized_ignores_merge_and_diloco_never_merges() {
    let merge = MergeSchedule {
        t_merge: 3,
        interval: 1,
        alpha0: 0.3,
        k: 1,
        basis: Default::default(),
    };
    let c = ExperimentConfig {
        paradigm: Paradigm::Centralized,
        ..tiny()
    }
    .normalized();
    let plain = run_experiment(&c, &quiet()).unwrap();
    let merged = run_experiment(&ExperimentConfig { merge, ..c.clone() }, &quiet()).unwrap();
    assert!(plain.model.bit_eq(&merged.model));
    let d = ExperimentConfig {
        paradigm: Paradigm::Diloco,
        merge,
        ..tiny()
    };
    assert!(run_experiment(&d, &quiet()).unwrap().merges.is_empty());
}

#[test]
fn tokens_follow_the_plan() {
    let mut cfg = tiny();
    cfg.token_budget = cfg.tokens_per_round() * 3 + 7;
    let out = run_experiment(&cfg, &quiet()).unwrap();
    assert_eq!(out.rows.len(), 3);
    let per = (cfg.nodes * cfg.h * cfg.batch * cfg.corpus.seq_len) as u64;
    for (i, r) in out.rows.iter().enumerate() {
        assert_eq!(r.tokens, per * (i as u64 + 1));
    }
    cfg.token_budget = per - 1;
    assert!(run_experiment(&cfg, &quiet()).is_err());
}

#[test]
fn metrics_directory_and_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = run_experiment(
        &tiny(),
        &RunOptions {
            out_dir: Some(run_dir.clone()),
            transport: Transport::InProcess,
        },
    )
    .unwrap();
    for f in [METRICS_FILE, MANIFEST_FILE, COST_FILE, LEDGER_FILE] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let rows = read_metrics(&run_dir.join(METRICS_FILE)).unwrap();
    let strip = |rows: &[spes_core::experiment::MetricsRow]| {
        rows.iter().map(|r| r.without_wall_time()).collect::<Vec<_>>()
    };
    assert_eq!(strip(&rows), strip(&out.rows));

    let report = emit_report(&run_dir).unwrap();
    assert!(report.issues.is_empty(), "{:?}", report.issues);
    assert_eq!(report.totals.rounds, rows.len());
    assert_eq!(report.totals.tokens, rows.last().unwrap().tokens);
    assert_eq!(report.totals.bytes_up, rows.iter().map(|r| r.bytes_up).sum::<u64>());
    assert_eq!(report.totals.bytes_down, rows.iter().map(|r| r.bytes_down).sum::<u64>());
    let check = report.ledger.clone().unwrap();
    assert!(check.within_overhead, "{check:?}");
    assert!(check.ratio_ok(), "{check:?}");
    assert_eq!(check.rounds_checked, rows.len());
    assert!(run_dir.join(REPORT_JSON).exists());
    assert!(!report.text().is_empty());

    // empty directory: explicit no-rounds report
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert!(emit_report(&empty).unwrap().no_rounds);

    // corrupt metrics file is an error
    fs::write(run_dir.join(METRICS_FILE), "round,tokens\nx,y\n").unwrap();
    assert!(emit_report(&run_dir).is_err());
}

#[test]
fn ablation_grid_runs_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut grid = AblationGrid::new(tiny());
    grid.h = vec![1, 2];
    grid.alpha = vec![0.0, 0.1];
    grid.t_merge = vec![2];
    let cells = grid.cells();
    assert_eq!(cells.len(), 4);
    let out = run_ablation(&grid, Some(dir.path()), Transport::InProcess).unwrap();
    assert!(out.iter().all(|o| o.error.is_none() && o.final_eval_ce.unwrap().is_finite()));
    assert!(dir.path().join(SUMMARY_FILE).exists());

    // a global batch that does not split is a per-cell error, not a failure
    let mut bad = AblationGrid::new(tiny());
    bad.global_batch = Some(3);
    bad.nodes = vec![2];
    let out = run_ablation(&bad, None, Transport::InProcess).unwrap();
    assert!(out[0].error.is_some());
}

#[test]
fn node_count_at_fixed_global_batch_is_stable() {
    let mut base = ExperimentConfig::desk();
    base.corpus.sequences = 2048;
    base.eval_sequences = 256;
    base.token_budget = 4 * 10 * 4 * 32 * 30;
    base.eval_every = 30;
    let mut grid = AblationGrid::new(base);
    grid.nodes = vec![2, 4, 8];
    grid.global_batch = Some(16);
    let out = run_ablation(&grid, None, Transport::InProcess).unwrap();
    let losses: Vec<f64> = out.iter().map(|o| o.final_eval_ce.unwrap()).collect();
    let (lo, hi) = losses.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi <= 1.15 * lo, "{losses:?}");
}

fn source_sharded(rounds: usize, eval_every: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.corpus.sources = cfg.model.experts;
    cfg.corpus.sequences = 2048;
    cfg.eval_sequences = 256;
    cfg.shard = ShardPolicy::BySource;
    cfg.token_budget = cfg.tokens_per_round() * rounds as u64;
    cfg.eval_every = eval_every;
    cfg
}

/// Source/expert mutual information at initialization followed by every
/// evaluated round.
fn source_mi_curve(cfg: &ExperimentConfig) -> Vec<f64> {
    let setup = RunSetup::new(cfg).unwrap();
    let init = evaluate(&setup.initial, &setup).unwrap().2;
    let out = run_setup(&setup, &quiet()).unwrap();
    std::iter::once(init).chain(out.rows.iter().filter_map(|r| r.source_mi)).collect()
}

#[test]
fn training_raises_source_expert_information() {
    let mi = source_mi_curve(&source_sharded(40, 10));
    assert_eq!(mi.len(), 5);
    assert!(mi[4] > mi[0], "{mi:?}");
}

#[test]
#[ignore = "source/expert MI rises early, then plateaus and fluctuates at desk scale"]
fn source_expert_information_is_monotone_over_checkpoints() {
    let mi = source_mi_curve(&source_sharded(100, 25));
    assert!(mi.windows(2).all(|w| w[1] > w[0]), "{mi:?}");
}

#[test]
fn single_source_unigrams_match_stationary_distribution() {
    let spec = CorpusSpec {
        sources: 1,
        sequences: 1_000_000 / 33 + 1,
        ..CorpusSpec::default()
    };
    let c = gen_corpus(&spec).unwrap();
    let v = spec.vocab;
    let mut counts = vec![0.0f64; v];
    for s in &c.sequences {
        for &t in s {
            counts[t as usize] += 1.0;
        }
    }
    let n: f64 = counts.iter().sum();
    assert!(n >= 1e6);

    // stationary law recomputed as the normalized null vector of (Tᵀ − I)
    let t = &c.transitions[0];
    let mut a = nalgebra::DMatrix::<f64>::zeros(v, v);
    for i in 0..v {
        for j in 0..v {
            a[(j, i)] = t[i * v + j];
        }
        a[(i, i)] -= 1.0;
    }
    for j in 0..v {
        a[(v - 1, j)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::<f64>::zeros(v);
    rhs[v - 1] = 1.0;
    let pi = a.lu().solve(&rhs).unwrap();
    for k in 0..v {
        assert!((pi[k] - c.stationary[0][k]).abs() < 1e-9);
    }
    let l1: f64 = (0..v).map(|k| (counts[k] / n - pi[k]).abs()).sum();
    assert!(l1 < 0.01, "L1 distance {l1}");
}
