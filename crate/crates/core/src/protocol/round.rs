use std::collections::{BTreeMap, BTreeSet};

use super::payload::TensorBlockPayload;
use super::{ProtocolError, Result};
use crate::model::{BlockId, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{outer_step, OuterOptimizer};

/// How the server turns a complete set of pushes into the next global model.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregation {
    /// Shared blocks averaged, each expert taken verbatim from its owner.
    Sparse,
    /// Outer optimizer over the mean delta of every block.
    Outer(OuterOptimizer),
}

/// Checks an ownership table. Sparse aggregation needs every expert to have
/// exactly one owner; outer aggregation needs every expert covered.
pub fn validate_assignment(assignment: &[Vec<usize>], experts: usize, sparse: bool) -> Result<()> {
    let mut owners = vec![0usize; experts];
    for (node, owned) in assignment.iter().enumerate() {
        if owned.is_empty() {
            return Err(ProtocolError::Assignment(format!("node {node} owns no experts")));
        }
        for &j in owned {
            if j >= experts {
                return Err(ProtocolError::Assignment(format!("node {node} owns unknown expert {j}")));
            }
            owners[j] += 1;
        }
    }
    for (j, &c) in owners.iter().enumerate() {
        if c == 0 {
            return Err(ProtocolError::Assignment(format!("expert {j} has no owner")));
        }
        if sparse && c > 1 {
            return Err(ProtocolError::Assignment(format!("expert {j} has {c} owners")));
        }
    }
    Ok(())
}

/// Server view of one synchronization round, independent of any transport.
#[derive(Debug, Clone)]
pub struct RoundState {
    round: u32,
    config: ModelConfig,
    expected: Vec<BTreeSet<BlockId>>,
    received: BTreeMap<usize, BTreeMap<BlockId, Tensor>>,
}

impl RoundState {
    pub fn new(round: u32, config: &ModelConfig, assignment: &[Vec<usize>]) -> Self {
        let expected = assignment
            .iter()
            .map(|owned| {
                ModelParams::block_ids(config)
                    .into_iter()
                    .filter(|id| id.expert_index().is_none_or(|j| owned.contains(&j)))
                    .collect()
            })
            .collect();
        Self {
            round,
            config: config.clone(),
            expected,
            received: BTreeMap::new(),
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn nodes(&self) -> usize {
        self.expected.len()
    }

    pub fn received(&self) -> usize {
        self.received.len()
    }

    pub fn has_pushed(&self, node: usize) -> bool {
        self.received.contains_key(&node)
    }

    pub fn is_complete(&self) -> bool {
        self.received.len() == self.expected.len()
    }

    /// Blocks node `node` must upload.
    pub fn expected_blocks(&self, node: usize) -> Option<&BTreeSet<BlockId>> {
        self.expected.get(node)
    }

    /// Validates and records a LOCAL_UPDATE. On error nothing is recorded.
    pub fn accept_push(&mut self, node: usize, round: u32, payload: TensorBlockPayload) -> Result<()> {
        let expected = self
            .expected
            .get(node)
            .ok_or(ProtocolError::UnknownNode(node as u32))?;
        if round != self.round {
            return Err(ProtocolError::RoundMismatch {
                expected: self.round,
                got: round,
            });
        }
        if self.received.contains_key(&node) {
            return Err(ProtocolError::DuplicatePush { node, round });
        }
        let mut blocks = BTreeMap::new();
        for (name, t) in payload.blocks {
            let id: BlockId = name
                .parse()
                .map_err(|_| ProtocolError::UnknownBlock(name.clone()))?;
            if !expected.contains(&id) {
                return Err(match id.expert_index() {
                    Some(_) if ModelParams::expected_shape(&self.config, id).is_some() => {
                        ProtocolError::NonOwnedBlock { node, block: name }
                    }
                    _ => ProtocolError::UnknownBlock(name),
                });
            }
            let shape = ModelParams::expected_shape(&self.config, id).expect("expected block has a shape");
            if t.shape() != shape.as_slice() {
                return Err(ProtocolError::BlockShape {
                    block: name,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
            blocks.insert(id, t);
        }
        if let Some(missing) = expected.iter().find(|id| !blocks.contains_key(id)) {
            return Err(ProtocolError::MissingBlock {
                node,
                block: missing.to_string(),
            });
        }
        self.received.insert(node, blocks);
        Ok(())
    }

    /// Produces the next global model. Fails unless every node has pushed.
    pub fn aggregate(&self, global: &ModelParams, aggregation: &mut Aggregation) -> Result<ModelParams> {
        if !self.is_complete() {
            return Err(ProtocolError::Barrier {
                expected: self.nodes(),
                got: self.received(),
            });
        }
        match aggregation {
            Aggregation::Outer(opt) => {
                let updates: Vec<BTreeMap<BlockId, Tensor>> = self.received.values().cloned().collect();
                Ok(outer_step(global, &updates, opt)?)
            }
            Aggregation::Sparse => {
                let mut next = global.clone();
                for id in ModelParams::block_ids(&self.config) {
                    let providers: Vec<&Tensor> = self.received.values().filter_map(|b| b.get(&id)).collect();
                    let value = if id.is_shared() {
                        mean(&providers)
                    } else {
                        match providers.as_slice() {
                            [only] => (*only).clone(),
                            _ => {
                                return Err(ProtocolError::Assignment(format!(
                                    "{id} pushed by {} nodes",
                                    providers.len()
                                )))
                            }
                        }
                    };
                    next.set_block(id, value)?;
                }
                Ok(next)
            }
        }
    }
}

/// Elementwise mean accumulated in 64-bit, in provider order.
fn mean(ts: &[&Tensor]) -> Tensor {
    let n = ts.len() as f64;
    let data = (0..ts[0].numel())
        .map(|i| (ts.iter().map(|t| t.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Tensor::new(ts[0].shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::OuterKind;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 5,
            hidden: 2,
            intermediate: 3,
            layers: 1,
            experts: 4,
            active: 1,
            renormalize_after_topk: false,
            tied_head: false,
            coefficients: Default::default(),
        }
    }

    fn push_for(p: &ModelParams, owned: &[usize]) -> TensorBlockPayload {
        TensorBlockPayload::new(
            p.blocks()
                .into_iter()
                .filter(|(id, _)| id.expert_index().is_none_or(|j| owned.contains(&j)))
                .map(|(id, t)| (id.to_string(), t.clone()))
                .collect(),
        )
    }

    fn assignment() -> Vec<Vec<usize>> {
        vec![vec![0, 1], vec![2, 3]]
    }

    #[test]
    fn shared_mean_and_expert_passthrough() {
        let c = cfg();
        let g = ModelParams::init(&c, 0).unwrap();
        let mut a = ModelParams::init(&c, 1).unwrap();
        let mut b = ModelParams::init(&c, 2).unwrap();
        a.shared.final_norm = Tensor::full(&[2], 1.0);
        b.shared.final_norm = Tensor::full(&[2], 3.0);
        let mut st = RoundState::new(1, &c, &assignment());
        st.accept_push(0, 1, push_for(&a, &[0, 1])).unwrap();
        assert!(st.aggregate(&g, &mut Aggregation::Sparse).is_err());
        st.accept_push(1, 1, push_for(&b, &[2, 3])).unwrap();
        let next = st.aggregate(&g, &mut Aggregation::Sparse).unwrap();
        assert_eq!(next.shared.final_norm.data(), &[2.0, 2.0]);
        assert_eq!(next.experts[0][1], a.experts[0][1]);
        assert_eq!(next.experts[0][2], b.experts[0][2]);
    }

    #[test]
    fn rejects_bad_pushes_without_side_effects() {
        let c = cfg();
        let p = ModelParams::init(&c, 0).unwrap();
        let mut st = RoundState::new(2, &c, &assignment());
        assert!(matches!(
            st.accept_push(0, 3, push_for(&p, &[0, 1])),
            Err(ProtocolError::RoundMismatch { expected: 2, got: 3 })
        ));
        assert!(matches!(
            st.accept_push(0, 2, push_for(&p, &[0, 1, 2])),
            Err(ProtocolError::NonOwnedBlock { node: 0, .. })
        ));
        assert!(matches!(
            st.accept_push(0, 2, push_for(&p, &[0])),
            Err(ProtocolError::MissingBlock { node: 0, .. })
        ));
        assert!(matches!(
            st.accept_push(5, 2, push_for(&p, &[0])),
            Err(ProtocolError::UnknownNode(5))
        ));
        assert_eq!(st.received(), 0);
        st.accept_push(0, 2, push_for(&p, &[0, 1])).unwrap();
        assert!(matches!(
            st.accept_push(0, 2, push_for(&p, &[0, 1])),
            Err(ProtocolError::DuplicatePush { node: 0, round: 2 })
        ));
        assert_eq!(st.received(), 1);
    }

    #[test]
    fn assignment_checks() {
        assert!(validate_assignment(&[vec![0, 1], vec![1, 2]], 3, true).is_err());
        assert!(validate_assignment(&[vec![0, 1], vec![1, 2]], 3, false).is_ok());
        assert!(validate_assignment(&[vec![0], vec![2]], 3, false).is_err());
        assert!(validate_assignment(&[vec![0, 1, 2], vec![]], 3, false).is_err());
    }

    #[test]
    fn outer_sgd_unit_lr_matches_sparse_on_shared_blocks() {
        let c = cfg();
        let g = ModelParams::init(&c, 0).unwrap();
        let a = ModelParams::init(&c, 1).unwrap();
        let b = ModelParams::init(&c, 2).unwrap();
        let mut st = RoundState::new(1, &c, &assignment());
        st.accept_push(0, 1, push_for(&a, &[0, 1])).unwrap();
        st.accept_push(1, 1, push_for(&b, &[2, 3])).unwrap();
        let sparse = st.aggregate(&g, &mut Aggregation::Sparse).unwrap();
        let mut outer = Aggregation::Outer(OuterOptimizer::new(OuterKind::Sgd, 1.0, 2));
        let fed = st.aggregate(&g, &mut outer).unwrap();
        for id in ModelParams::shared_block_ids(&c) {
            let (x, y) = (sparse.block(id).unwrap(), fed.block(id).unwrap());
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() <= 1e-6 * p.abs().max(1.0));
            }
        }
    }

    proptest! {
        // arbitrary interleavings of valid, duplicate and stale pushes:
        // aggregation only succeeds after all nodes pushed once, and the
        // result does not depend on arrival order
        #[test]
        fn barrier_under_interleavings(order in Just(vec![0usize, 1, 2]).prop_shuffle(), noise in proptest::collection::vec(0usize..3, 0..6)) {
            let c = ModelConfig { experts: 3, ..cfg() };
            let asg = vec![vec![0], vec![1], vec![2]];
            let g = ModelParams::init(&c, 0).unwrap();
            let locals: Vec<ModelParams> = (0..3).map(|i| ModelParams::init(&c, 10 + i as u64).unwrap()).collect();
            let mut st = RoundState::new(1, &c, &asg);
            let mut noise = noise.into_iter();
            for (step, &node) in order.iter().enumerate() {
                if let Some(n) = noise.next() {
                    // stale round push is always rejected
                    prop_assert!(st.accept_push(n, 0, push_for(&locals[n], &asg[n])).is_err());
                    if st.has_pushed(n) {
                        prop_assert!(st.accept_push(n, 1, push_for(&locals[n], &asg[n])).is_err());
                    }
                }
                prop_assert!(!st.is_complete());
                prop_assert!(st.aggregate(&g, &mut Aggregation::Sparse).is_err());
                st.accept_push(node, 1, push_for(&locals[node], &asg[node])).unwrap();
                prop_assert_eq!(st.received(), step + 1);
            }
            let got = st.aggregate(&g, &mut Aggregation::Sparse).unwrap();
            let mut reference = RoundState::new(1, &c, &asg);
            for n in 0..3 {
                reference.accept_push(n, 1, push_for(&locals[n], &asg[n])).unwrap();
            }
            prop_assert!(got.bit_eq(&reference.aggregate(&g, &mut Aggregation::Sparse).unwrap()));
        }
    }
}
