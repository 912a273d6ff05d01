use std::collections::BTreeSet;

use crate::model::{BlockId, ModelConfig, ModelParams};

/// Block mask `U_i`: every shared block plus the experts node `i` owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainMask {
    node: usize,
    owned: BTreeSet<usize>,
}

impl TrainMask {
    pub fn new(node: usize, owned: impl IntoIterator<Item = usize>) -> Self {
        Self {
            node,
            owned: owned.into_iter().collect(),
        }
    }

    /// Mask that trains the whole model.
    pub fn full(node: usize, config: &ModelConfig) -> Self {
        Self::new(node, 0..config.experts)
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn owned(&self) -> &BTreeSet<usize> {
        &self.owned
    }

    pub fn is_trainable(&self, id: BlockId) -> bool {
        match id.expert_index() {
            None => true,
            Some(j) => self.owned.contains(&j),
        }
    }

    pub fn trainable_blocks(&self, config: &ModelConfig) -> Vec<BlockId> {
        ModelParams::block_ids(config)
            .into_iter()
            .filter(|&id| self.is_trainable(id))
            .collect()
    }

    /// `|ψ| + |Φ_i|`
    pub fn trainable_params(&self, config: &ModelConfig) -> usize {
        let owned = self.owned.iter().filter(|&&j| j < config.experts).count();
        config.shared_params() + config.layers * owned * config.expert_size()
    }

    /// `U_i v`: zeroes every frozen block of a parameter-shaped vector.
    pub fn project(&self, v: &ModelParams) -> ModelParams {
        let mut out = v.clone();
        for id in ModelParams::block_ids(&v.config) {
            if !self.is_trainable(id) {
                if let Some(t) = out.block_mut(id) {
                    t.data_mut().iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 5,
            hidden: 3,
            intermediate: 4,
            layers: 2,
            experts: 4,
            active: 1,
            renormalize_after_topk: false,
            tied_head: false,
            coefficients: Default::default(),
        }
    }

    #[test]
    fn trainable_count() {
        let c = cfg();
        let m = TrainMask::new(1, [2, 3]);
        let n: usize = m
            .trainable_blocks(&c)
            .iter()
            .map(|&id| ModelParams::expected_shape(&c, id).unwrap().iter().product::<usize>())
            .sum();
        assert_eq!(n, m.trainable_params(&c));
        assert_eq!(TrainMask::full(0, &c).trainable_params(&c), c.total_params());
    }

    proptest! {
        #[test]
        fn projection_contracts_and_is_idempotent(seed in any::<u64>(), owned in proptest::collection::btree_set(0usize..4, 0..4)) {
            let c = cfg();
            let v = ModelParams::init(&c, seed).unwrap();
            let m = TrainMask::new(0, owned);
            let once = m.project(&v);
            let twice = m.project(&once);
            prop_assert!(once.bit_eq(&twice));
            let norm = |p: &ModelParams| p.blocks().iter().map(|(_, t)| t.sq_norm()).sum::<f64>();
            prop_assert!(norm(&once) <= norm(&v));
        }
    }
}
