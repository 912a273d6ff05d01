use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::{TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Paradigm, RoundPlan};
use super::corpus::{gen_corpus, BatchStream, SyntheticCorpus};
use super::metrics::{
    source_expert_mi, utilization, write_metrics, Manifest, MetricsRow, CHECKPOINT_FILE, COST_FILE, LEDGER_FILE,
    MANIFEST_FILE, MERGES_FILE, METRICS_FILE,
};
use super::{ExperimentError, Result};
use crate::cost::{cost_report, round_overhead, CostReport, RoundOverhead};
use crate::merging::{MergeEvent, MergeSchedule};
use crate::model::{
    loss_and_grads, model_loss, param_partition, routing_trace, Batch, LossBundle, ModelParams,
};
use crate::protocol::{
    run_in_process, run_server, run_worker, tcp_accept, tcp_connect, write_checkpoint, Aggregation, CommLedger,
    LocalTrainer, ProtocolError, ServerConfig, Traffic, WorkerOutcome, DEFAULT_TIMEOUT,
};
use crate::trainer::{
    local_round, masked_step, BatchSource, LrSchedule, MaskedOptimizerState, OuterOptimizer, RoundOptions,
    TrainError, TrainMask,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    InProcess,
    /// Loopback sockets, one per worker.
    Tcp,
}

impl Transport {
    fn name(self) -> &'static str {
        match self {
            Transport::InProcess => "in_process",
            Transport::Tcp => "tcp",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where metrics, manifest and checkpoint go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    pub transport: Transport,
}

/// Everything a run derives deterministically from its config.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub config: ExperimentConfig,
    pub corpus: SyntheticCorpus,
    pub shards: Vec<Vec<usize>>,
    pub eval_batch: Batch,
    /// Source id of every evaluated position.
    pub eval_sources: Vec<usize>,
    /// Experts trained by each node.
    pub assignment: Vec<Vec<usize>>,
    pub plan: RoundPlan,
    pub schedule: LrSchedule,
    pub initial: ModelParams,
}

fn node_seed(seed: u64, node: usize) -> u64 {
    seed ^ (node as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl RunSetup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let config = config.clone().normalized();
        config.validate()?;
        let corpus = gen_corpus(&config.corpus)?;
        let shards = corpus.shards(config.eval_sequences, config.nodes, config.shard, config.seed)?;
        let eval_idx = corpus.eval_indices(config.eval_sequences);
        let eval_batch = corpus.batch(&eval_idx)?;
        let eval_sources = eval_idx
            .iter()
            .flat_map(|&i| std::iter::repeat_n(corpus.source_ids[i], config.corpus.seq_len))
            .collect();
        let m = config.model.experts;
        let assignment = match config.paradigm {
            Paradigm::Spes => param_partition(m, config.nodes)?,
            Paradigm::Diloco | Paradigm::Centralized => vec![(0..m).collect(); config.nodes],
        };
        let plan = config.plan()?;
        let schedule = config.lr.schedule(plan.total_steps());
        let initial = ModelParams::init(&config.model, config.seed)?;
        Ok(Self {
            config,
            corpus,
            shards,
            eval_batch,
            eval_sources,
            assignment,
            plan,
            schedule,
            initial,
        })
    }

    pub fn merge_schedule(&self) -> MergeSchedule {
        match self.config.paradigm {
            Paradigm::Spes => self.config.merge,
            _ => MergeSchedule::disabled(),
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        let outer = self.config.outer;
        if self.config.paradigm == Paradigm::Spes && outer.is_plain_average() {
            Aggregation::Sparse
        } else {
            Aggregation::Outer(OuterOptimizer::new(outer.kind, outer.lr, self.config.nodes))
        }
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            rounds: self.plan.rounds() as u32,
            assignment: self.assignment.clone(),
            config_hash: self.config.hash(),
            merge: self.merge_schedule(),
            aggregation: self.aggregation(),
        }
    }

    pub fn stream(&self, node: usize) -> BatchStream<'_> {
        BatchStream::new(
            &self.corpus,
            self.shards[node].clone(),
            self.plan.batch[0],
            node_seed(self.config.seed, node),
        )
    }

    pub fn trainer(&self, node: usize, events: Option<mpsc::Sender<NodeEvent>>) -> NodeTrainer<'_> {
        NodeTrainer {
            node,
            stream: self.stream(node),
            plan: &self.plan,
            schedule: self.schedule,
            config: &self.config,
            state: None,
            events,
        }
    }

    pub fn cost(&self) -> Result<CostFile> {
        let report = cost_report(&self.config.model, self.config.nodes.min(self.config.model.experts), false)?;
        Ok(CostFile {
            paradigm: self.config.paradigm,
            bytes_per_param: 4,
            round_overhead: round_overhead(&self.config.model, &self.assignment),
            report,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFile {
    pub paradigm: Paradigm,
    pub bytes_per_param: u64,
    /// Framing bytes per round for this run's assignment.
    pub round_overhead: RoundOverhead,
    pub report: CostReport,
}

#[derive(Debug, Clone)]
pub enum NodeEvent {
    Losses { node: usize, round: u32, losses: Vec<LossBundle> },
    Failed { node: usize, round: u32, error: String },
}

/// One node's local optimization: its shard stream, mask and (optionally
/// persistent) optimizer state.
pub struct NodeTrainer<'a> {
    node: usize,
    stream: BatchStream<'a>,
    plan: &'a RoundPlan,
    schedule: LrSchedule,
    config: &'a ExperimentConfig,
    state: Option<MaskedOptimizerState>,
    events: Option<mpsc::Sender<NodeEvent>>,
}

impl NodeTrainer<'_> {
    fn emit(&self, e: NodeEvent) {
        if let Some(tx) = &self.events {
            let _ = tx.send(e);
        }
    }
}

impl LocalTrainer for NodeTrainer<'_> {
    fn train(&mut self, round: u32, global: &ModelParams, owned: &[usize]) -> Result<ModelParams, TrainError> {
        let r = (round as usize).saturating_sub(1).min(self.plan.rounds() - 1);
        let mask = TrainMask::new(self.node, owned.iter().copied());
        if !self.config.carry_state || self.state.is_none() {
            self.state = Some(MaskedOptimizerState::new(global, &mask, self.config.inner));
        }
        self.stream.set_batch(self.plan.batch[r]);
        let opts = RoundOptions {
            steps: self.plan.h[r],
            schedule: self.schedule,
            step_offset: self.plan.step_offset[r],
            record_trace: false,
        };
        let state = self.state.as_mut().expect("set above");
        match local_round(global, &mut self.stream, &mask, state, &opts) {
            Ok(out) => {
                self.emit(NodeEvent::Losses {
                    node: self.node,
                    round,
                    losses: out.losses,
                });
                Ok(out.params)
            }
            Err(e) => {
                self.emit(NodeEvent::Failed {
                    node: self.node,
                    round,
                    error: e.to_string(),
                });
                Err(e)
            }
        }
    }
}

/// Held-out losses, utilization and source/expert mutual information.
pub fn evaluate(params: &ModelParams, setup: &RunSetup) -> Result<(LossBundle, Vec<f64>, f64)> {
    let loss = model_loss(params, &setup.eval_batch)?;
    let routing = routing_trace(params, &setup.eval_batch)?;
    let mi = source_expert_mi(&routing, &setup.eval_sources, setup.config.corpus.sources);
    Ok((loss, utilization(&routing), mi))
}

fn mean_bundle<'a>(it: impl IntoIterator<Item = &'a LossBundle>) -> Option<LossBundle> {
    let mut acc = LossBundle::default();
    let mut n = 0usize;
    for b in it {
        acc.total += b.total;
        acc.ce += b.ce;
        acc.lb += b.lb;
        acc.moe_z += b.moe_z;
        acc.z += b.z;
        n += 1;
    }
    (n > 0).then(|| {
        let k = n as f64;
        LossBundle {
            total: acc.total / k,
            ce: acc.ce / k,
            lb: acc.lb / k,
            moe_z: acc.moe_z / k,
            z: acc.z / k,
        }
    })
}

/// Builds metric rows from the per-round global models.
struct Recorder<'a> {
    setup: &'a RunSetup,
    events: Option<mpsc::Receiver<NodeEvent>>,
    pending: BTreeMap<(u32, usize), Vec<LossBundle>>,
    failure: Option<String>,
    rows: Vec<MetricsRow>,
    tokens: u64,
    start: Instant,
    error: Option<ExperimentError>,
}

impl<'a> Recorder<'a> {
    fn new(setup: &'a RunSetup, events: Option<mpsc::Receiver<NodeEvent>>) -> Self {
        Self {
            setup,
            events,
            pending: BTreeMap::new(),
            failure: None,
            rows: Vec::new(),
            tokens: 0,
            start: Instant::now(),
            error: None,
        }
    }

    fn drain(&mut self) {
        let Some(rx) = &self.events else { return };
        while let Ok(e) = rx.try_recv() {
            match e {
                NodeEvent::Losses { node, round, losses } => {
                    self.pending.insert((round, node), losses);
                }
                NodeEvent::Failed { node, round, error } => {
                    self.failure.get_or_insert(format!("node {node}, round {round}: {error}"));
                }
            }
        }
    }

    fn observe(&mut self, t: u32, model: &ModelParams, merge: Option<&MergeEvent>, train: Option<LossBundle>) {
        let r = t as usize - 1;
        let plan = &self.setup.plan;
        let cfg = &self.setup.config;
        self.tokens += plan.tokens(r, cfg.nodes, cfg.corpus.seq_len);
        let last = r + 1 == plan.rounds();
        let every = cfg.eval_every.max(1);
        let (eval, util, mi) = if last || t as usize % every == 0 {
            match evaluate(model, self.setup) {
                Ok((l, u, m)) => (Some(l), u, Some(m)),
                Err(e) => {
                    self.error.get_or_insert(e.context(format!("evaluation after round {t}")));
                    (None, Vec::new(), None)
                }
            }
        } else {
            (None, Vec::new(), None)
        };
        self.rows.push(MetricsRow {
            round: t,
            tokens: self.tokens,
            train,
            eval,
            utilization: util,
            source_mi: mi,
            wall_secs: self.start.elapsed().as_secs_f64(),
            bytes_up: 0,
            bytes_down: 0,
            merge_alpha: merge.map(|m| m.alpha),
            merge_displacement: merge.map(MergeEvent::displacement_sq),
        });
    }

    fn observe_round(&mut self, t: u32, model: &ModelParams, merge: Option<&MergeEvent>) {
        self.drain();
        let train = if self.events.is_some() {
            let keys: Vec<(u32, usize)> = self.pending.range((t, 0)..(t + 1, 0)).map(|(k, _)| *k).collect();
            let losses: Vec<Vec<LossBundle>> = keys.iter().filter_map(|k| self.pending.remove(k)).collect();
            mean_bundle(losses.iter().flatten())
        } else {
            None
        };
        self.observe(t, model, merge, train);
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub model: ModelParams,
    pub ledger: CommLedger,
    pub merges: Vec<MergeEvent>,
    pub workers: Vec<WorkerOutcome>,
    pub manifest: Manifest,
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    /// Evaluation cross-entropy of the final round.
    pub fn final_eval_ce(&self) -> f64 {
        self.manifest.final_eval.map_or(f64::NAN, |e| e.ce)
    }

    /// `(round, eval ce)` of every evaluated round.
    pub fn eval_curve(&self) -> Vec<(u32, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.eval.map(|e| (r.round, e.ce)))
            .collect()
    }
}

fn centralized(setup: &RunSetup, recorder: &mut Recorder<'_>) -> Result<ModelParams> {
    let cfg = &setup.config;
    let mask = TrainMask::full(0, &cfg.model);
    let mut params = setup.initial.clone();
    let mut state = MaskedOptimizerState::new(&params, &mask, cfg.inner);
    let mut stream = setup.stream(0);
    for step in 0..setup.plan.rounds() {
        stream.set_batch(setup.plan.batch[step]);
        let batch = stream.next_batch();
        let context = |e: ExperimentError| e.context(format!("centralized step {step}"));
        let (loss, grads) = loss_and_grads(&params, &batch, &|id| mask.is_trainable(id)).map_err(|e| context(e.into()))?;
        if !loss.total.is_finite() {
            return Err(context(TrainError::NonFinite { step }.into()));
        }
        masked_step(&mut params, &grads, &mut state, &mask, setup.schedule.at(step)).map_err(|e| context(e.into()))?;
        recorder.observe(step as u32 + 1, &params, None, Some(loss));
        if let Some(e) = recorder.error.take() {
            return Err(e);
        }
    }
    Ok(params)
}

/// The most informative error of a failed distributed run: a trainer
/// failure first, then a worker error that is not a mere disconnect, then
/// the server's.
fn pick_error(
    failure: Option<String>,
    server: Option<ProtocolError>,
    workers: Vec<(usize, ProtocolError)>,
) -> ExperimentError {
    let first_real = workers
        .iter()
        .position(|(_, e)| !matches!(e, ProtocolError::Disconnected | ProtocolError::Timeout));
    let (base, ctx): (ExperimentError, String) = match (server, first_real) {
        (_, Some(i)) => {
            let (node, e) = workers.into_iter().nth(i).expect("index valid");
            (e.into(), format!("worker {node}"))
        }
        (Some(e), None) => (e.into(), "server".into()),
        (None, None) => match workers.into_iter().next() {
            Some((node, e)) => (e.into(), format!("worker {node}")),
            None => (ExperimentError::Metrics("run failed without an error".into()), "run".into()),
        },
    };
    match failure {
        Some(f) => base.context(f),
        None => base.context(ctx),
    }
}

struct Distributed {
    model: ModelParams,
    ledger: CommLedger,
    merges: Vec<MergeEvent>,
    workers: Vec<WorkerOutcome>,
}

fn distributed(setup: &RunSetup, transport: Transport, recorder: &mut Recorder<'_>, events: mpsc::Sender<NodeEvent>) -> Result<Distributed> {
    let n = setup.config.nodes;
    let scfg = setup.server_config();
    let trainers: Vec<NodeTrainer<'_>> = (0..n).map(|i| setup.trainer(i, Some(events.clone()))).collect();
    drop(events);
    let mut observer = |t: u32, m: &ModelParams, e: Option<&MergeEvent>| recorder.observe_round(t, m, e);
    let (server, workers): (Result<_, ProtocolError>, Vec<Result<WorkerOutcome, ProtocolError>>) = match transport {
        Transport::InProcess => match run_in_process(setup.initial.clone(), scfg, trainers, &mut observer) {
            Ok((s, w)) => (Ok(s), w.into_iter().map(Ok).collect()),
            Err(e) => (Err(e), Vec::new()),
        },
        Transport::Tcp => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let model_cfg = &setup.config.model;
            let hash = scfg.config_hash;
            thread::scope(|scope| {
                let handles: Vec<_> = trainers
                    .into_iter()
                    .enumerate()
                    .map(|(node, mut trainer)| {
                        scope.spawn(move || {
                            let conn = tcp_connect(addr, DEFAULT_TIMEOUT)?;
                            run_worker(conn, node as u32, model_cfg, hash, &mut trainer)
                        })
                    })
                    .collect();
                let server = tcp_accept(&listener, n, DEFAULT_TIMEOUT)
                    .and_then(|conns| run_server(setup.initial.clone(), scfg, conns, &mut observer));
                let workers = handles
                    .into_iter()
                    .map(|h| h.join().expect("worker thread panicked"))
                    .collect();
                (server, workers)
            })
        }
    };
    recorder.drain();
    if let Some(e) = recorder.error.take() {
        return Err(e);
    }
    let mut errs = Vec::new();
    let mut outs = Vec::new();
    for (i, w) in workers.into_iter().enumerate() {
        match w {
            Ok(o) => outs.push(o),
            Err(e) => errs.push((i, e)),
        }
    }
    match server {
        Ok(s) if errs.is_empty() && recorder.failure.is_none() => Ok(Distributed {
            model: s.model,
            ledger: s.ledger,
            merges: s.merges,
            workers: outs,
        }),
        Ok(_) => Err(pick_error(recorder.failure.take(), None, errs)),
        Err(e) => Err(pick_error(recorder.failure.take(), Some(e), errs)),
    }
}

/// Fills per-round traffic from the ledger and returns the setup traffic.
fn attach_traffic(rows: &mut [MetricsRow], ledger: &CommLedger) -> Traffic {
    let mut rest = ledger.totals();
    for row in rows.iter_mut() {
        let t = ledger.round(row.round);
        row.bytes_up = t.up;
        row.bytes_down = t.down;
        rest.up -= t.up;
        rest.down -= t.down;
    }
    rest
}

fn write_outputs(dir: &Path, setup: &RunSetup, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics(&dir.join(METRICS_FILE), setup.config.model.experts, &out.rows)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&out.manifest)?)?;
    fs::write(dir.join(COST_FILE), serde_json::to_string_pretty(&setup.cost()?)?)?;
    fs::write(dir.join(LEDGER_FILE), serde_json::to_string(&out.ledger)?)?;
    let mut merges = fs::File::create(dir.join(MERGES_FILE))?;
    for m in &out.merges {
        writeln!(merges, "{}", serde_json::to_string(m)?)?;
    }
    write_checkpoint(&dir.join(CHECKPOINT_FILE), out.rows.len() as u64, &out.model)?;
    Ok(())
}

fn finish(
    setup: &RunSetup,
    opts: &RunOptions,
    mut rows: Vec<MetricsRow>,
    result: Distributed,
    wall: f64,
) -> Result<RunOutput> {
    let setup_traffic = attach_traffic(&mut rows, &result.ledger);
    let last = rows.last().expect("at least one round");
    let files = [METRICS_FILE, MANIFEST_FILE, COST_FILE, LEDGER_FILE, MERGES_FILE, CHECKPOINT_FILE]
        .map(String::from)
        .to_vec();
    let manifest = Manifest {
        schema: setup.config.schema,
        config: setup.config.clone(),
        config_hash: setup.config.hash_hex(),
        transport: match setup.config.paradigm {
            Paradigm::Centralized => "none".into(),
            _ => opts.transport.name().into(),
        },
        plan: setup.plan.clone(),
        setup_traffic,
        wall_secs: wall,
        final_train: last.train,
        final_eval: last.eval,
        files: if opts.out_dir.is_some() { files } else { Vec::new() },
    };
    let out = RunOutput {
        rows,
        model: result.model,
        ledger: result.ledger,
        merges: result.merges,
        workers: result.workers,
        manifest,
        dir: opts.out_dir.clone(),
    };
    if let Some(dir) = &opts.out_dir {
        write_outputs(dir, setup, &out)?;
    }
    Ok(out)
}

/// Runs the configured paradigm end to end and, if asked, writes the
/// metrics directory.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    let setup = RunSetup::new(config)?;
    run_setup(&setup, opts)
}

pub fn run_setup(setup: &RunSetup, opts: &RunOptions) -> Result<RunOutput> {
    let cfg = &setup.config;
    info!(
        "{:?}: N={} H={} rounds={} tokens/round={}",
        cfg.paradigm,
        cfg.nodes,
        cfg.h,
        setup.plan.rounds(),
        cfg.tokens_per_round()
    );
    let start = Instant::now();
    let (rows, result) = if cfg.paradigm == Paradigm::Centralized {
        if cfg.merge.t_merge > 0 {
            warn!("merge schedule ignored by the centralized paradigm");
        }
        let mut rec = Recorder::new(setup, None);
        let model = centralized(setup, &mut rec)?;
        let result = Distributed {
            model,
            ledger: CommLedger::default(),
            merges: Vec::new(),
            workers: Vec::new(),
        };
        (rec.rows, result)
    } else {
        let (tx, rx) = mpsc::channel();
        let mut rec = Recorder::new(setup, Some(rx));
        let result = distributed(setup, opts.transport, &mut rec, tx)?;
        (rec.rows, result)
    };
    finish(setup, opts, rows, result, start.elapsed().as_secs_f64())
}

/// Server side of a multi-process run: accepts `N` workers on `addr` and
/// records metrics from the global models. Training losses are not
/// available to the server.
pub fn serve(config: &ExperimentConfig, addr: impl ToSocketAddrs, opts: &RunOptions) -> Result<RunOutput> {
    let setup = RunSetup::new(config)?;
    if setup.config.paradigm == Paradigm::Centralized {
        return Err(ExperimentError::Config("the centralized paradigm has no server".into()));
    }
    let listener = TcpListener::bind(addr)?;
    info!("listening on {} for {} workers", listener.local_addr()?, setup.config.nodes);
    let start = Instant::now();
    let mut rec = Recorder::new(&setup, None);
    let conns = tcp_accept(&listener, setup.config.nodes, DEFAULT_TIMEOUT)?;
    let outcome = {
        let mut observer = |t: u32, m: &ModelParams, e: Option<&MergeEvent>| rec.observe_round(t, m, e);
        run_server(setup.initial.clone(), setup.server_config(), conns, &mut observer)
            .map_err(|e| ExperimentError::from(e).context("server"))?
    };
    if let Some(e) = rec.error.take() {
        return Err(e);
    }
    let result = Distributed {
        model: outcome.model,
        ledger: outcome.ledger,
        merges: outcome.merges,
        workers: Vec::new(),
    };
    let opts = RunOptions {
        transport: Transport::Tcp,
        ..opts.clone()
    };
    finish(&setup, &opts, rec.rows, result, start.elapsed().as_secs_f64())
}

/// Worker side of a multi-process run.
pub fn work(config: &ExperimentConfig, addr: impl ToSocketAddrs, node: usize) -> Result<WorkerOutcome> {
    let setup = RunSetup::new(config)?;
    if node >= setup.config.nodes {
        return Err(ExperimentError::Config(format!("node {node} outside 0..{}", setup.config.nodes)));
    }
    let mut trainer = setup.trainer(node, None);
    let conn = tcp_connect(addr, DEFAULT_TIMEOUT)?;
    run_worker(conn, node as u32, &setup.config.model, setup.config.hash(), &mut trainer)
        .map_err(|e| ExperimentError::from(e).context(format!("worker {node}")))
}
