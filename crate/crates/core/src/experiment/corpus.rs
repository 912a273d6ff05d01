use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result};
use crate::model::Batch;
use crate::trainer::BatchSource;

/// Mixture of first-order Markov sources. Source `c` prefers tokens of its
/// own vocabulary band `[c·V/C, (c+1)·V/C)`, so tokens carry source identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab: usize,
    /// Predicted positions per sequence; sequences hold `S + 1` tokens.
    pub seq_len: usize,
    pub sources: usize,
    /// Total sequences, evaluation split included.
    pub sequences: usize,
    /// Successor candidates per row, inside and outside the band.
    pub branching: usize,
    /// Probability mass a row puts on its own band.
    pub own_band: f64,
    /// Uniform smoothing over the whole vocabulary.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            seq_len: 32,
            sources: 8,
            sequences: 4096,
            branching: 3,
            own_band: 0.9,
            smoothing: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    /// Row-stochastic `V×V` matrix per source, row-major.
    pub transitions: Vec<Vec<f64>>,
    pub stationary: Vec<Vec<f64>>,
    /// Each `S + 1` tokens.
    pub sequences: Vec<Vec<u32>>,
    pub source_ids: Vec<usize>,
}

fn band(spec: &CorpusSpec, c: usize) -> std::ops::Range<usize> {
    c * spec.vocab / spec.sources..(c + 1) * spec.vocab / spec.sources
}

fn sparse_row(rng: &mut ChaCha8Rng, pool: std::ops::Range<usize>, branching: usize, mass: f64, row: &mut [f64]) {
    let candidates: Vec<usize> = pool.collect();
    let picks = rand::seq::index::sample(rng, candidates.len(), branching.min(candidates.len()));
    let weights: Vec<f64> = picks.iter().map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for (i, w) in picks.iter().zip(weights) {
        row[candidates[i]] += mass * w / total;
    }
}

/// Left eigenvector of a row-stochastic matrix for eigenvalue 1, by power
/// iteration.
pub fn stationary_distribution(t: &[f64], v: usize) -> Vec<f64> {
    let mut pi = vec![1.0 / v as f64; v];
    for _ in 0..100_000 {
        let mut next = vec![0.0; v];
        for (i, p) in pi.iter().enumerate() {
            for (j, n) in next.iter_mut().enumerate() {
                *n += p * t[i * v + j];
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    let (v, c) = (spec.vocab, spec.sources);
    if c == 0 || v < c {
        return Err(ExperimentError::Config(format!("corpus needs V ≥ C ≥ 1, got V={v}, C={c}")));
    }
    if (v as u128) * (v as u128) * (c as u128) > 1 << 28 {
        return Err(ExperimentError::Config(format!("transition tables for V={v}, C={c} are too large")));
    }
    if spec.seq_len == 0 || spec.branching == 0 || !(0.0..=1.0).contains(&spec.own_band) || !(0.0..1.0).contains(&spec.smoothing) {
        return Err(ExperimentError::Config("corpus needs S ≥ 1, branching ≥ 1, mixture weights in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut transitions = Vec::with_capacity(c);
    for src in 0..c {
        let mut t = vec![0.0; v * v];
        for r in 0..v {
            let row = &mut t[r * v..(r + 1) * v];
            let body = 1.0 - spec.smoothing;
            sparse_row(&mut rng, band(spec, src), spec.branching, body * spec.own_band, row);
            sparse_row(&mut rng, 0..v, spec.branching, body * (1.0 - spec.own_band), row);
            row.iter_mut().for_each(|x| *x += spec.smoothing / v as f64);
        }
        transitions.push(t);
    }
    let stationary: Vec<Vec<f64>> = transitions.iter().map(|t| stationary_distribution(t, v)).collect();
    let samplers: Vec<Vec<WeightedIndex<f64>>> = transitions
        .iter()
        .map(|t| {
            t.chunks(v)
                .map(|row| WeightedIndex::new(row).expect("positive row"))
                .collect()
        })
        .collect();
    let starts: Vec<WeightedIndex<f64>> = stationary
        .iter()
        .map(|p| WeightedIndex::new(p).expect("positive stationary"))
        .collect();
    let mut sequences = Vec::with_capacity(spec.sequences);
    let mut source_ids = Vec::with_capacity(spec.sequences);
    for _ in 0..spec.sequences {
        let src = rng.random_range(0..c);
        let mut tok = starts[src].sample(&mut rng);
        let mut seq = Vec::with_capacity(spec.seq_len + 1);
        seq.push(tok as u32);
        for _ in 0..spec.seq_len {
            tok = samplers[src][tok].sample(&mut rng);
            seq.push(tok as u32);
        }
        sequences.push(seq);
        source_ids.push(src);
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        transitions,
        stationary,
        sequences,
        source_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardPolicy {
    /// Random disjoint split.
    #[default]
    Iid,
    /// Node `i` gets every sequence whose source `c` has `c mod N = i`.
    BySource,
}

impl SyntheticCorpus {
    /// Indices of training sequences: all but the last `eval` ones.
    pub fn train_indices(&self, eval: usize) -> Vec<usize> {
        (0..self.sequences.len().saturating_sub(eval)).collect()
    }

    pub fn eval_indices(&self, eval: usize) -> Vec<usize> {
        (self.sequences.len().saturating_sub(eval)..self.sequences.len()).collect()
    }

    /// Disjoint shards of the training split covering it exactly.
    pub fn shards(&self, eval: usize, nodes: usize, policy: ShardPolicy, seed: u64) -> Result<Vec<Vec<usize>>> {
        if nodes == 0 {
            return Err(ExperimentError::Config("need at least one node".into()));
        }
        let mut train = self.train_indices(eval);
        let shards: Vec<Vec<usize>> = match policy {
            ShardPolicy::Iid => {
                train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let base = train.len() / nodes;
                let extra = train.len() % nodes;
                let mut out = Vec::with_capacity(nodes);
                let mut start = 0;
                for i in 0..nodes {
                    let len = base + usize::from(i < extra);
                    let mut s = train[start..start + len].to_vec();
                    s.sort_unstable();
                    out.push(s);
                    start += len;
                }
                out
            }
            ShardPolicy::BySource => (0..nodes)
                .map(|i| {
                    train
                        .iter()
                        .copied()
                        .filter(|&s| self.source_ids[s] % nodes == i)
                        .collect()
                })
                .collect(),
        };
        if let Some(i) = shards.iter().position(Vec::is_empty) {
            return Err(ExperimentError::Config(format!("shard {i} of {nodes} is empty")));
        }
        Ok(shards)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let seqs: Vec<&[u32]> = indices.iter().map(|&i| self.sequences[i].as_slice()).collect();
        Ok(Batch::from_sequences(&seqs)?)
    }
}

/// Sequential minibatches over a shuffled shard, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    corpus: &'a SyntheticCorpus,
    shard: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(corpus: &'a SyntheticCorpus, shard: Vec<usize>, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shard = shard;
        shard.shuffle(&mut rng);
        Self {
            corpus,
            shard,
            pos: 0,
            batch,
            rng,
        }
    }

    pub fn set_batch(&mut self, batch: usize) {
        self.batch = batch;
    }
}

impl BatchSource for BatchStream<'_> {
    fn next_batch(&mut self) -> Batch {
        let mut idx = Vec::with_capacity(self.batch);
        while idx.len() < self.batch {
            if self.pos == self.shard.len() {
                self.shard.shuffle(&mut self.rng);
                self.pos = 0;
            }
            idx.push(self.shard[self.pos]);
            self.pos += 1;
        }
        self.corpus.batch(&idx).expect("corpus sequences share one length")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(sources: usize) -> CorpusSpec {
        CorpusSpec {
            vocab: 16,
            seq_len: 8,
            sources,
            sequences: 200,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_row_stochastic() {
        let a = gen_corpus(&small(4)).unwrap();
        let b = gen_corpus(&small(4)).unwrap();
        assert_eq!(a, b);
        for t in &a.transitions {
            for row in t.chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(a.sequences.iter().all(|s| s.len() == 9));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(gen_corpus(&CorpusSpec { sources: 0, ..small(1) }).is_err());
        assert!(gen_corpus(&CorpusSpec { sources: 17, ..small(1) }).is_err());
    }

    #[test]
    fn shards_partition_training_split() {
        let c = gen_corpus(&small(4)).unwrap();
        for policy in [ShardPolicy::Iid, ShardPolicy::BySource] {
            let shards = c.shards(20, 2, policy, 3).unwrap();
            let mut all: Vec<usize> = shards.concat();
            all.sort_unstable();
            assert_eq!(all, c.train_indices(20));
        }
        let by = c.shards(20, 2, ShardPolicy::BySource, 0).unwrap();
        assert!(by[0].iter().all(|&s| c.source_ids[s] % 2 == 0));
        assert!(c.shards(20, 5, ShardPolicy::BySource, 0).is_err());
    }

    #[test]
    fn stream_cycles_through_epochs() {
        let c = gen_corpus(&small(1)).unwrap();
        let mut s = BatchStream::new(&c, vec![0, 1, 2], 2, 0);
        let mut seen = Vec::new();
        for _ in 0..3 {
            let b = s.next_batch();
            assert_eq!(b.rows(), 2);
            seen.extend(b.tokens().chunks(9).map(|r| r.to_vec()));
        }
        for i in 0..3 {
            assert_eq!(seen.iter().filter(|r| **r == c.sequences[i]).count(), 2);
        }
    }
}
