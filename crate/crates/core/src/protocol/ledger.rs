use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::wire::MessageKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Worker to server.
    Up,
    /// Server to worker.
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub node: usize,
    pub round: u32,
    pub direction: Direction,
    pub kind: MessageKind,
    /// Full frame length, header included.
    pub bytes: u64,
    /// Block names carried by tensor-bearing messages.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<String>,
}

/// Append-only record of every frame the server sent or received.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub entries: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub up: u64,
    pub down: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.up + self.down
    }
}

impl CommLedger {
    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn count(&self, kind: MessageKind, direction: Direction) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind && e.direction == direction)
            .count()
    }

    fn sum(&self, pred: impl Fn(&LedgerEntry) -> bool) -> Traffic {
        let mut t = Traffic::default();
        for e in self.entries.iter().filter(|e| pred(e)) {
            match e.direction {
                Direction::Up => t.up += e.bytes,
                Direction::Down => t.down += e.bytes,
            }
        }
        t
    }

    pub fn totals(&self) -> Traffic {
        self.sum(|_| true)
    }

    pub fn node_round(&self, node: usize, round: u32) -> Traffic {
        self.sum(|e| e.node == node && e.round == round)
    }

    pub fn round(&self, round: u32) -> Traffic {
        self.sum(|e| e.round == round)
    }

    /// Bytes of parameter-carrying messages (LOCAL_UPDATE up and
    /// GLOBAL_MODEL down) per round.
    pub fn model_traffic_by_round(&self) -> BTreeMap<u32, Traffic> {
        let mut out: BTreeMap<u32, Traffic> = BTreeMap::new();
        for e in &self.entries {
            let t = out.entry(e.round).or_default();
            match (e.kind, e.direction) {
                (MessageKind::LocalUpdate, Direction::Up) => t.up += e.bytes,
                (MessageKind::GlobalModel, Direction::Down) => t.down += e.bytes,
                _ => {}
            }
        }
        out
    }

    /// Running byte totals after each entry; never decreasing.
    pub fn cumulative(&self) -> Vec<u64> {
        let mut acc = 0;
        self.entries
            .iter()
            .map(|e| {
                acc += e.bytes;
                acc
            })
            .collect()
    }
}
