use std::collections::BTreeSet;
use std::sync::mpsc;
use std::thread;

use log::{debug, info};

use super::ledger::{CommLedger, Direction, LedgerEntry};
use super::message::{ConfigHash, Message};
use super::round::{validate_assignment, Aggregation, RoundState};
use super::transport::{memory_pair, Connection, FrameSender};
use super::wire::{MessageKind, WireMessage};
use super::worker::{run_worker, LocalTrainer, WorkerOutcome};
use super::{blocks_payload, ProtocolError, Result};
use crate::merging::{merge_experts, MergeEvent, MergeSchedule};
use crate::model::ModelParams;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub rounds: u32,
    /// Experts owned by each node.
    pub assignment: Vec<Vec<usize>>,
    pub config_hash: ConfigHash,
    pub merge: MergeSchedule,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub model: ModelParams,
    pub ledger: CommLedger,
    pub merges: Vec<MergeEvent>,
}

/// Called after every aggregation (and merge) with the new global model.
pub type RoundObserver<'a> = dyn FnMut(u32, &ModelParams, Option<&MergeEvent>) + 'a;

struct Sessions {
    tx: Vec<Box<dyn FrameSender>>,
    /// Node id per connection once HELLO arrived.
    node_of: Vec<Option<usize>>,
    conn_of: Vec<usize>,
    inbox: mpsc::Receiver<(usize, Result<WireMessage>)>,
    ledger: CommLedger,
}

impl Sessions {
    fn send(&mut self, node: usize, w: &WireMessage, blocks: Vec<String>) -> Result<()> {
        self.tx[self.conn_of[node]].send_frame(w)?;
        self.ledger.record(LedgerEntry {
            node,
            round: w.round,
            direction: Direction::Down,
            kind: w.kind,
            bytes: w.encoded_len() as u64,
            blocks,
        });
        Ok(())
    }

    fn broadcast(&mut self, msg: &Message) -> Result<()> {
        let w = msg.to_wire()?;
        let names = block_names(msg);
        for node in 0..self.conn_of.len() {
            self.send(node, &w, names.clone())?;
        }
        Ok(())
    }

    /// Next frame from any session, decoded, with its sender's connection.
    fn next(&mut self) -> Result<(usize, Message, WireMessage)> {
        let (conn, frame) = self.inbox.recv().map_err(|_| ProtocolError::Disconnected)?;
        let w = frame?;
        let msg = Message::from_wire(&w)?;
        Ok((conn, msg, w))
    }

    fn record_up(&mut self, node: usize, msg: &Message, w: &WireMessage) {
        self.ledger.record(LedgerEntry {
            node,
            round: w.round,
            direction: Direction::Up,
            kind: w.kind,
            bytes: w.encoded_len() as u64,
            blocks: block_names(msg),
        });
    }
}

fn block_names(msg: &Message) -> Vec<String> {
    match msg {
        Message::GlobalModel { blocks, .. } | Message::LocalUpdate { blocks, .. } => {
            blocks.blocks.iter().map(|(n, _)| n.clone()).collect()
        }
        _ => Vec::new(),
    }
}

fn unexpected(from: String, got: MessageKind, expected: &'static str) -> ProtocolError {
    ProtocolError::UnexpectedMessage { from, got, expected }
}

/// Runs `rounds` synchronous rounds over already-established connections.
/// Each connection gets a reader thread that forwards frames to this single
/// aggregation loop. Nodes are identified by HELLO, not connection order.
pub fn run_server(
    initial: ModelParams,
    mut cfg: ServerConfig,
    conns: Vec<Connection>,
    observer: &mut RoundObserver<'_>,
) -> Result<ServerOutcome> {
    let nodes = cfg.assignment.len();
    validate_assignment(
        &cfg.assignment,
        initial.config.experts,
        matches!(cfg.aggregation, Aggregation::Sparse),
    )?;
    if conns.len() != nodes {
        return Err(ProtocolError::Barrier {
            expected: nodes,
            got: conns.len(),
        });
    }
    let (inbox_tx, inbox) = mpsc::channel();
    let mut tx = Vec::with_capacity(nodes);
    for (i, conn) in conns.into_iter().enumerate() {
        tx.push(conn.tx);
        let mut rx = conn.rx;
        let out = inbox_tx.clone();
        thread::spawn(move || loop {
            let frame = rx.recv_frame();
            let stop = match &frame {
                Ok(w) => w.kind == MessageKind::Bye,
                Err(_) => true,
            };
            if out.send((i, frame)).is_err() || stop {
                break;
            }
        });
    }
    drop(inbox_tx);
    let mut s = Sessions {
        tx,
        node_of: vec![None; nodes],
        conn_of: vec![usize::MAX; nodes],
        inbox,
        ledger: CommLedger::default(),
    };

    while s.node_of.iter().any(Option::is_none) {
        let (conn, msg, w) = s.next()?;
        let Message::Hello { node, config_hash } = msg else {
            return Err(unexpected(format!("connection {conn}"), w.kind, "HELLO"));
        };
        if node as usize >= nodes {
            return Err(ProtocolError::UnknownNode(node));
        }
        if s.node_of[conn].is_some() || s.conn_of[node as usize] != usize::MAX {
            return Err(ProtocolError::DuplicateNode(node));
        }
        if config_hash != cfg.config_hash {
            return Err(ProtocolError::ConfigHashMismatch { node });
        }
        s.node_of[conn] = Some(node as usize);
        s.conn_of[node as usize] = conn;
        s.record_up(node as usize, &msg, &w);
    }
    info!("all {nodes} nodes connected");
    for node in 0..nodes {
        let assign = Message::Assign {
            node: node as u32,
            rounds: cfg.rounds,
            experts: cfg.assignment[node].iter().map(|&j| j as u32).collect(),
        };
        s.send(node, &assign.to_wire()?, Vec::new())?;
    }
    let mut model = initial;
    s.broadcast(&Message::GlobalModel {
        round: 0,
        blocks: blocks_payload(&model, |_| true),
    })?;

    let mut merges = Vec::new();
    for t in 1..=cfg.rounds {
        let mut state = RoundState::new(t, &model.config, &cfg.assignment);
        while !state.is_complete() {
            let (conn, msg, w) = s.next()?;
            let node = s.node_of[conn].expect("all nodes said hello");
            let Message::LocalUpdate { round, blocks } = msg else {
                return Err(unexpected(format!("node {node}"), w.kind, "LOCAL_UPDATE"));
            };
            let names = blocks.blocks.iter().map(|(n, _)| n.clone()).collect();
            state.accept_push(node, round, blocks)?;
            s.ledger.record(LedgerEntry {
                node,
                round,
                direction: Direction::Up,
                kind: w.kind,
                bytes: w.encoded_len() as u64,
                blocks: names,
            });
            s.send(node, &Message::RoundDone { round: t }.to_wire()?, Vec::new())?;
        }
        model = state.aggregate(&model, &mut cfg.aggregation)?;
        let merge = merge_experts(&mut model, &cfg.merge, (t - 1) as usize);
        if let Some(ev) = &merge {
            debug!("round {t}: merged with alpha {}", ev.alpha);
            s.broadcast(&Message::MergeApplied {
                round: t,
                alpha: ev.alpha,
                displacement: ev.layers.iter().map(|l| l.displacement_sq).collect(),
            })?;
        }
        observer(t, &model, merge.as_ref());
        if let Some(ev) = merge {
            merges.push(ev);
        }
        s.broadcast(&Message::GlobalModel {
            round: t,
            blocks: blocks_payload(&model, |_| true),
        })?;
    }

    s.broadcast(&Message::Bye)?;
    let mut done = BTreeSet::new();
    while done.len() < nodes {
        let (conn, msg, w) = s.next()?;
        let node = s.node_of[conn].expect("all nodes said hello");
        if msg != Message::Bye {
            return Err(unexpected(format!("node {node}"), w.kind, "BYE"));
        }
        s.record_up(node, &msg, &w);
        done.insert(node);
    }
    Ok(ServerOutcome {
        model,
        ledger: s.ledger,
        merges,
    })
}

/// Server plus one worker thread per trainer, linked by in-process
/// transports. Trainer `i` runs as node `i`.
pub fn run_in_process<T: LocalTrainer + Send>(
    initial: ModelParams,
    cfg: ServerConfig,
    trainers: Vec<T>,
    observer: &mut RoundObserver<'_>,
) -> Result<(ServerOutcome, Vec<WorkerOutcome>)> {
    let timeout = super::transport::DEFAULT_TIMEOUT;
    let model_cfg = initial.config.clone();
    let hash = cfg.config_hash;
    thread::scope(|scope| {
        let mut server_conns = Vec::new();
        let mut handles = Vec::new();
        for (node, mut trainer) in trainers.into_iter().enumerate() {
            let (server_end, worker_end) = memory_pair(timeout);
            server_conns.push(server_end);
            let model_cfg = &model_cfg;
            handles.push(scope.spawn(move || run_worker(worker_end, node as u32, model_cfg, hash, &mut trainer)));
        }
        let server = run_server(initial, cfg, server_conns, observer);
        let workers: Vec<Result<WorkerOutcome>> = handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect();
        let server = server?;
        let workers = workers.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((server, workers))
    })
}
