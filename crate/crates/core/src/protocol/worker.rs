use log::debug;

use super::message::{ConfigHash, Message};
use super::transport::Connection;
use super::{blocks_payload, params_from_payload, ProtocolError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::trainer::TrainError;

/// Node-side local optimization for one round.
pub trait LocalTrainer {
    /// Starting from `global`, returns the node's locally updated model.
    /// Blocks outside the shared set and `owned` must come back untouched.
    fn train(&mut self, round: u32, global: &ModelParams, owned: &[usize]) -> Result<ModelParams, TrainError>;
}

impl<F> LocalTrainer for F
where
    F: FnMut(u32, &ModelParams, &[usize]) -> Result<ModelParams, TrainError>,
{
    fn train(&mut self, round: u32, global: &ModelParams, owned: &[usize]) -> Result<ModelParams, TrainError> {
        self(round, global, owned)
    }
}

#[derive(Debug, Clone)]
pub struct WorkerOutcome {
    pub node: u32,
    pub owned: Vec<usize>,
    pub rounds: u32,
    /// Last global model received.
    pub model: ModelParams,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

fn expect_kind(got: &Message, expected: &'static str) -> ProtocolError {
    ProtocolError::UnexpectedMessage {
        from: "server".into(),
        got: got.kind(),
        expected,
    }
}

struct Link {
    conn: Connection,
    up: u64,
    down: u64,
}

impl Link {
    fn send(&mut self, m: &Message) -> Result<()> {
        self.up += self.conn.send(m)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        let (m, n) = self.conn.recv()?;
        self.down += n;
        Ok(m)
    }

    fn recv_global(&mut self, config: &ModelConfig, expected_round: u32) -> Result<ModelParams> {
        match self.recv()? {
            Message::GlobalModel { round, blocks } if round == expected_round => params_from_payload(config, blocks),
            Message::GlobalModel { round, .. } => Err(ProtocolError::RoundMismatch {
                expected: expected_round,
                got: round,
            }),
            other => Err(expect_kind(&other, "GLOBAL_MODEL")),
        }
    }
}

/// Single-threaded worker loop: HELLO, ASSIGN, then per round receive the
/// global model, train, and push shared plus owned blocks only.
pub fn run_worker(
    conn: Connection,
    node: u32,
    config: &ModelConfig,
    config_hash: ConfigHash,
    trainer: &mut dyn LocalTrainer,
) -> Result<WorkerOutcome> {
    let mut link = Link { conn, up: 0, down: 0 };
    link.send(&Message::Hello { node, config_hash })?;
    let (rounds, owned) = match link.recv()? {
        Message::Assign {
            node: n,
            rounds,
            experts,
        } if n == node => (rounds, experts.into_iter().map(|j| j as usize).collect::<Vec<_>>()),
        Message::Assign { node: n, .. } => return Err(ProtocolError::UnknownNode(n)),
        other => return Err(expect_kind(&other, "ASSIGN")),
    };
    let mut global = link.recv_global(config, 0)?;
    for t in 1..=rounds {
        let local = trainer.train(t, &global, &owned)?;
        let is_owned = |id: crate::model::BlockId| id.expert_index().is_none_or(|j| owned.contains(&j));
        for (id, before) in global.blocks() {
            if is_owned(id) {
                continue;
            }
            let after = local.block(id).ok_or_else(|| ProtocolError::UnknownBlock(id.to_string()))?;
            let same = before.shape() == after.shape()
                && before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(ProtocolError::FrozenBlockChanged {
                    node,
                    block: id.to_string(),
                });
            }
        }
        link.send(&Message::LocalUpdate {
            round: t,
            blocks: blocks_payload(&local, is_owned),
        })?;
        match link.recv()? {
            Message::RoundDone { round } if round == t => {}
            Message::RoundDone { round } => {
                return Err(ProtocolError::RoundMismatch { expected: t, got: round });
            }
            other => return Err(expect_kind(&other, "ROUND_DONE")),
        }
        let mut msg = link.recv()?;
        if let Message::MergeApplied { round, alpha, .. } = &msg {
            debug!("node {node}: merge at round {round}, alpha {alpha}");
            msg = link.recv()?;
        }
        global = match msg {
            Message::GlobalModel { round, blocks } if round == t => params_from_payload(config, blocks)?,
            Message::GlobalModel { round, .. } => {
                return Err(ProtocolError::RoundMismatch { expected: t, got: round });
            }
            other => return Err(expect_kind(&other, "GLOBAL_MODEL")),
        };
    }
    match link.recv()? {
        Message::Bye => link.send(&Message::Bye)?,
        other => return Err(expect_kind(&other, "BYE")),
    }
    Ok(WorkerOutcome {
        node,
        owned,
        rounds,
        model: global,
        bytes_up: link.up,
        bytes_down: link.down,
    })
}
