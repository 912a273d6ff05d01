use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{CorpusSpec, ShardPolicy};
use super::{ExperimentError, Result};
use crate::cost::preset_2b;
use crate::merging::MergeSchedule;
use crate::model::{LossCoefficients, ModelConfig};
use crate::protocol::ConfigHash;
use crate::trainer::{AdamWConfig, InnerOptimizer, LrSchedule, OuterKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Centralized,
    Diloco,
    Spes,
}

impl std::str::FromStr for Paradigm {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centralized" => Ok(Paradigm::Centralized),
            "diloco" => Ok(Paradigm::Diloco),
            "spes" => Ok(Paradigm::Spes),
            other => Err(ExperimentError::Config(format!("unknown paradigm {other:?}"))),
        }
    }
}

/// Linear warmup to `peak`, cosine to `min_ratio · peak` over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    pub peak: f64,
    pub warmup_steps: usize,
    pub min_ratio: f64,
}

impl LrConfig {
    pub fn schedule(&self, total_steps: usize) -> LrSchedule {
        LrSchedule {
            peak: self.peak,
            warmup_steps: self.warmup_steps,
            total_steps,
            min_ratio: self.min_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterConfig {
    pub kind: OuterKind,
    pub lr: f64,
}

impl OuterConfig {
    pub fn sgd() -> Self {
        Self {
            kind: OuterKind::Sgd,
            lr: 1.0,
        }
    }

    pub fn nesterov() -> Self {
        Self {
            kind: OuterKind::Nesterov { momentum: 0.9 },
            lr: 0.7,
        }
    }

    /// Plain averaging: outer SGD with unit step.
    pub fn is_plain_average(&self) -> bool {
        self.kind == OuterKind::Sgd && self.lr == 1.0
    }
}

/// Switch to a second `(H, batch)` setting once a fraction of the token
/// budget has been consumed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondPhase {
    pub at_fraction: f64,
    pub h: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub model: ModelConfig,
    pub paradigm: Paradigm,
    pub nodes: usize,
    /// Local steps per round.
    pub h: usize,
    pub token_budget: u64,
    /// Sequences per node per local step.
    pub batch: usize,
    pub inner: InnerOptimizer,
    pub lr: LrConfig,
    pub outer: OuterConfig,
    pub merge: MergeSchedule,
    /// Keep each node's inner optimizer moments across rounds.
    pub carry_state: bool,
    pub corpus: CorpusSpec,
    pub shard: ShardPolicy,
    /// Held-out sequences taken from the end of the corpus.
    pub eval_sequences: usize,
    /// Evaluate every this many rounds (the last round always).
    pub eval_every: usize,
    #[serde(default)]
    pub second_phase: Option<SecondPhase>,
    pub seed: u64,
}

/// Per-round local steps, batch and global step offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub h: Vec<usize>,
    pub batch: Vec<usize>,
    pub step_offset: Vec<usize>,
}

impl RoundPlan {
    pub fn rounds(&self) -> usize {
        self.h.len()
    }

    pub fn total_steps(&self) -> usize {
        self.h.iter().sum()
    }

    /// Tokens consumed across all nodes in 0-based round `r`.
    pub fn tokens(&self, r: usize, nodes: usize, seq_len: usize) -> u64 {
        (nodes * self.h[r] * self.batch[r] * seq_len) as u64
    }
}

impl ExperimentConfig {
    /// Base desk-scale configuration: SPES over 4 nodes.
    pub fn desk() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            model: ModelConfig {
                vocab: 64,
                hidden: 32,
                intermediate: 64,
                layers: 2,
                experts: 8,
                active: 2,
                renormalize_after_topk: true,
                tied_head: false,
                coefficients: LossCoefficients::default(),
            },
            paradigm: Paradigm::Spes,
            nodes: 4,
            h: 10,
            token_budget: 4 * 10 * 4 * 32 * 100,
            batch: 4,
            inner: InnerOptimizer::AdamW(AdamWConfig::default()),
            lr: LrConfig {
                peak: 1e-2,
                warmup_steps: 20,
                min_ratio: 0.1,
            },
            outer: OuterConfig::sgd(),
            merge: MergeSchedule::disabled(),
            carry_state: true,
            corpus: CorpusSpec::default(),
            shard: ShardPolicy::Iid,
            eval_sequences: 128,
            eval_every: 1,
            second_phase: None,
            seed: 0,
        }
    }

    /// Centralized forces one node and one step per round; other paradigms
    /// are left alone.
    pub fn normalized(mut self) -> Self {
        if self.paradigm == Paradigm::Centralized {
            self.nodes = 1;
            self.h = 1;
            self.second_phase = None;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ExperimentError::Config(m));
        if self.schema != SCHEMA_VERSION {
            return err(format!("schema {} unsupported (expected {SCHEMA_VERSION})", self.schema));
        }
        self.model.validate()?;
        if self.corpus.vocab != self.model.vocab {
            return err(format!(
                "corpus vocabulary {} differs from model vocabulary {}",
                self.corpus.vocab, self.model.vocab
            ));
        }
        if self.paradigm == Paradigm::Centralized && (self.nodes != 1 || self.h != 1) {
            return err("centralized runs use N = 1 and H = 1".into());
        }
        if self.nodes == 0 || self.h == 0 || self.batch == 0 {
            return err("N, H and batch must be positive".into());
        }
        if self.paradigm == Paradigm::Spes && self.nodes > self.model.experts {
            return err(format!("{} nodes cannot each own one of {} experts", self.nodes, self.model.experts));
        }
        if self.eval_sequences == 0 || self.eval_sequences >= self.corpus.sequences {
            return err("evaluation split must be non-empty and leave training data".into());
        }
        if !(self.lr.peak > 0.0 && (0.0..=1.0).contains(&self.lr.min_ratio)) {
            return err("learning rate must be positive with min_ratio in [0, 1]".into());
        }
        if !(self.outer.lr > 0.0) {
            return err("outer learning rate must be positive".into());
        }
        if self.merge.t_merge > 0 && (self.merge.interval == 0 || self.merge.k == 0) {
            return err("active merge schedule needs interval ≥ 1 and K ≥ 1".into());
        }
        if let Some(p) = self.second_phase {
            if !(0.0..1.0).contains(&p.at_fraction) || p.h == 0 || p.batch == 0 {
                return err("second phase needs a fraction in [0, 1), H ≥ 1 and batch ≥ 1".into());
            }
        }
        self.plan().map(|_| ())
    }

    pub fn tokens_per_round(&self) -> u64 {
        (self.nodes * self.h * self.batch * self.corpus.seq_len) as u64
    }

    /// Whole rounds that fit in the token budget, per phase.
    pub fn plan(&self) -> Result<RoundPlan> {
        let s = self.corpus.seq_len;
        let phases: Vec<(u64, usize, usize)> = match self.second_phase {
            None => vec![(self.token_budget, self.h, self.batch)],
            Some(p) => {
                let first = (self.token_budget as f64 * p.at_fraction) as u64;
                vec![(first, self.h, self.batch), (self.token_budget - first, p.h, p.batch)]
            }
        };
        let mut plan = RoundPlan {
            h: Vec::new(),
            batch: Vec::new(),
            step_offset: Vec::new(),
        };
        let mut offset = 0;
        for (budget, h, batch) in phases {
            let per_round = (self.nodes * h * batch * s) as u64;
            for _ in 0..budget / per_round.max(1) {
                plan.h.push(h);
                plan.batch.push(batch);
                plan.step_offset.push(offset);
                offset += h;
            }
        }
        if plan.rounds() == 0 {
            return Err(ExperimentError::Config(format!(
                "token budget {} is smaller than one round ({} tokens)",
                self.token_budget,
                self.tokens_per_round()
            )));
        }
        Ok(plan)
    }

    pub fn rounds(&self) -> Result<usize> {
        Ok(self.plan()?.rounds())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> ConfigHash {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.schema != SCHEMA_VERSION {
            return Err(ExperimentError::Config(format!(
                "schema {} unsupported (expected {SCHEMA_VERSION})",
                cfg.schema
            )));
        }
        Ok(cfg)
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &["desk-spes", "desk-diloco", "desk-centralized", "desk-tiny", "scale-2b"]
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let desk = ExperimentConfig::desk();
    let cfg = match name {
        "desk-spes" => desk,
        "desk-diloco" => ExperimentConfig {
            paradigm: Paradigm::Diloco,
            outer: OuterConfig::nesterov(),
            ..desk
        },
        "desk-centralized" => ExperimentConfig {
            paradigm: Paradigm::Centralized,
            nodes: 1,
            h: 1,
            ..desk
        },
        "desk-tiny" => {
            let model = ModelConfig {
                vocab: 16,
                hidden: 8,
                intermediate: 16,
                layers: 1,
                experts: 4,
                ..desk.model.clone()
            };
            ExperimentConfig {
                model,
                nodes: 2,
                h: 2,
                batch: 2,
                token_budget: 2 * 2 * 2 * 8 * 5,
                corpus: CorpusSpec {
                    vocab: 16,
                    seq_len: 8,
                    sources: 4,
                    sequences: 256,
                    ..CorpusSpec::default()
                },
                eval_sequences: 32,
                ..desk
            }
        }
        "scale-2b" => {
            let model = preset_2b();
            let h = 100;
            ExperimentConfig {
                corpus: CorpusSpec {
                    vocab: model.vocab,
                    seq_len: 2048,
                    sources: 16,
                    ..CorpusSpec::default()
                },
                model,
                nodes: 16,
                h,
                batch: 256,
                token_budget: 400_000_000_000,
                lr: LrConfig {
                    peak: 5e-4,
                    warmup_steps: 2000,
                    min_ratio: 0.1,
                },
                merge: MergeSchedule {
                    t_merge: 12_500 / h,
                    interval: 500 / h,
                    alpha0: 0.1,
                    k: 4,
                    basis: Default::default(),
                },
                second_phase: Some(SecondPhase {
                    at_fraction: 0.7,
                    h: 50,
                    batch: 128,
                }),
                ..desk
            }
        }
        other => {
            return Err(ExperimentError::Config(format!(
                "unknown preset {other:?}; known: {}",
                preset_names().join(", ")
            )))
        }
    };
    Ok(cfg)
}
