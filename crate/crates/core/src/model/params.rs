use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExpertMatrix {
    Gate,
    Up,
    Down,
}

impl ExpertMatrix {
    pub const ALL: [ExpertMatrix; 3] = [ExpertMatrix::Gate, ExpertMatrix::Up, ExpertMatrix::Down];

    fn tag(self) -> &'static str {
        match self {
            ExpertMatrix::Gate => "wg",
            ExpertMatrix::Up => "wu",
            ExpertMatrix::Down => "wd",
        }
    }
}

/// Identifies one parameter tensor. Names are stable and used on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockId {
    Embed,
    Head,
    Norm(usize),
    FinalNorm,
    Router(usize),
    Expert {
        layer: usize,
        expert: usize,
        matrix: ExpertMatrix,
    },
}

impl BlockId {
    pub fn is_shared(&self) -> bool {
        !matches!(self, BlockId::Expert { .. })
    }

    pub fn expert_index(&self) -> Option<usize> {
        match self {
            BlockId::Expert { expert, .. } => Some(*expert),
            _ => None,
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Embed => write!(f, "psi.embed"),
            BlockId::Head => write!(f, "psi.head"),
            BlockId::Norm(l) => write!(f, "psi.norm.{l}"),
            BlockId::FinalNorm => write!(f, "psi.norm.final"),
            BlockId::Router(l) => write!(f, "psi.router.{l}"),
            BlockId::Expert {
                layer,
                expert,
                matrix,
            } => write!(f, "phi.{layer}.{expert}.{}", matrix.tag()),
        }
    }
}

impl FromStr for BlockId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || ModelError::UnknownBlock(s.to_string());
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.split('.').collect();
        match parts.as_slice() {
            ["psi", "embed"] => Ok(BlockId::Embed),
            ["psi", "head"] => Ok(BlockId::Head),
            ["psi", "norm", "final"] => Ok(BlockId::FinalNorm),
            ["psi", "norm", l] => Ok(BlockId::Norm(num(l)?)),
            ["psi", "router", l] => Ok(BlockId::Router(num(l)?)),
            ["phi", l, e, m] => {
                let matrix = match *m {
                    "wg" => ExpertMatrix::Gate,
                    "wu" => ExpertMatrix::Up,
                    "wd" => ExpertMatrix::Down,
                    _ => return Err(bad()),
                };
                Ok(BlockId::Expert {
                    layer: num(l)?,
                    expert: num(e)?,
                    matrix,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// d×f
    pub wg: Tensor,
    /// d×f
    pub wu: Tensor,
    /// f×d
    pub wd: Tensor,
}

impl ExpertParams {
    pub fn matrix(&self, m: ExpertMatrix) -> &Tensor {
        match m {
            ExpertMatrix::Gate => &self.wg,
            ExpertMatrix::Up => &self.wu,
            ExpertMatrix::Down => &self.wd,
        }
    }

    pub fn matrix_mut(&mut self, m: ExpertMatrix) -> &mut Tensor {
        match m {
            ExpertMatrix::Gate => &mut self.wg,
            ExpertMatrix::Up => &mut self.wu,
            ExpertMatrix::Down => &mut self.wd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    /// V×d
    pub embed: Tensor,
    /// d×V; `None` when the head is tied to the embedding.
    pub head: Option<Tensor>,
    pub norms: Vec<Tensor>,
    pub final_norm: Tensor,
    /// d×M per layer
    pub routers: Vec<Tensor>,
}

/// θ = (ψ, Φ)
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub shared: SharedParams,
    /// `[layer][expert]`
    pub experts: Vec<Vec<ExpertParams>>,
}

impl ModelParams {
    /// Random initialization: unit-variance embedding, fan-in scaled
    /// projections, small router weights, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f) = (config.vocab, config.hidden, config.intermediate);
        let fan_d = 1.0 / (d as f64).sqrt();
        let fan_f = 1.0 / (f as f64).sqrt();
        let embed = Tensor::randn(&[v, d], 1.0, &mut rng);
        let head = (!config.tied_head).then(|| Tensor::randn(&[d, v], fan_d, &mut rng));
        let routers = (0..config.layers)
            .map(|_| Tensor::randn(&[d, config.experts], 0.02, &mut rng))
            .collect();
        let experts = (0..config.layers)
            .map(|_| {
                (0..config.experts)
                    .map(|_| ExpertParams {
                        wg: Tensor::randn(&[d, f], fan_d, &mut rng),
                        wu: Tensor::randn(&[d, f], fan_d, &mut rng),
                        wd: Tensor::randn(&[f, d], fan_f, &mut rng),
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            shared: SharedParams {
                embed,
                head,
                norms: vec![Tensor::full(&[d], 1.0); config.layers],
                final_norm: Tensor::full(&[d], 1.0),
                routers,
            },
            experts,
        })
    }

    /// All block ids in canonical order: shared blocks, then experts by
    /// layer, expert, matrix.
    pub fn block_ids(config: &ModelConfig) -> Vec<BlockId> {
        let mut ids = Self::shared_block_ids(config);
        for layer in 0..config.layers {
            for expert in 0..config.experts {
                ids.extend(ExpertMatrix::ALL.iter().map(|&matrix| BlockId::Expert {
                    layer,
                    expert,
                    matrix,
                }));
            }
        }
        ids
    }

    pub fn shared_block_ids(config: &ModelConfig) -> Vec<BlockId> {
        let mut ids = vec![BlockId::Embed];
        if !config.tied_head {
            ids.push(BlockId::Head);
        }
        for l in 0..config.layers {
            ids.push(BlockId::Norm(l));
            ids.push(BlockId::Router(l));
        }
        ids.push(BlockId::FinalNorm);
        ids
    }

    pub fn expected_shape(config: &ModelConfig, id: BlockId) -> Option<Vec<usize>> {
        let (v, d, f, m) = (config.vocab, config.hidden, config.intermediate, config.experts);
        let layer_ok = |l: usize| l < config.layers;
        match id {
            BlockId::Embed => Some(vec![v, d]),
            BlockId::Head if !config.tied_head => Some(vec![d, v]),
            BlockId::Head => None,
            BlockId::Norm(l) if layer_ok(l) => Some(vec![d]),
            BlockId::FinalNorm => Some(vec![d]),
            BlockId::Router(l) if layer_ok(l) => Some(vec![d, m]),
            BlockId::Expert {
                layer,
                expert,
                matrix,
            } if layer_ok(layer) && expert < m => Some(match matrix {
                ExpertMatrix::Gate | ExpertMatrix::Up => vec![d, f],
                ExpertMatrix::Down => vec![f, d],
            }),
            _ => None,
        }
    }

    pub fn block(&self, id: BlockId) -> Option<&Tensor> {
        let s = &self.shared;
        match id {
            BlockId::Embed => Some(&s.embed),
            BlockId::Head => s.head.as_ref(),
            BlockId::Norm(l) => s.norms.get(l),
            BlockId::FinalNorm => Some(&s.final_norm),
            BlockId::Router(l) => s.routers.get(l),
            BlockId::Expert {
                layer,
                expert,
                matrix,
            } => self
                .experts
                .get(layer)
                .and_then(|es| es.get(expert))
                .map(|e| e.matrix(matrix)),
        }
    }

    pub fn block_mut(&mut self, id: BlockId) -> Option<&mut Tensor> {
        let s = &mut self.shared;
        match id {
            BlockId::Embed => Some(&mut s.embed),
            BlockId::Head => s.head.as_mut(),
            BlockId::Norm(l) => s.norms.get_mut(l),
            BlockId::FinalNorm => Some(&mut s.final_norm),
            BlockId::Router(l) => s.routers.get_mut(l),
            BlockId::Expert {
                layer,
                expert,
                matrix,
            } => self
                .experts
                .get_mut(layer)
                .and_then(|es| es.get_mut(expert))
                .map(|e| e.matrix_mut(matrix)),
        }
    }

    /// Replaces one block after checking its shape.
    pub fn set_block(&mut self, id: BlockId, value: Tensor) -> Result<()> {
        let expected = Self::expected_shape(&self.config, id)
            .ok_or_else(|| ModelError::UnknownBlock(id.to_string()))?;
        if value.shape() != expected.as_slice() {
            return Err(ModelError::BlockShape {
                name: id.to_string(),
                expected,
                actual: value.shape().to_vec(),
            });
        }
        let slot = self
            .block_mut(id)
            .ok_or_else(|| ModelError::UnknownBlock(id.to_string()))?;
        *slot = value;
        Ok(())
    }

    /// `(id, tensor)` pairs in canonical order.
    pub fn blocks(&self) -> Vec<(BlockId, &Tensor)> {
        Self::block_ids(&self.config)
            .into_iter()
            .map(|id| (id, self.block(id).expect("canonical id present")))
            .collect()
    }

    /// Rebuilds parameters from named blocks; the set must be complete.
    pub fn from_blocks(config: &ModelConfig, blocks: Vec<(BlockId, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut seen = std::collections::HashSet::new();
        for (id, t) in blocks {
            if !seen.insert(id) {
                return Err(ModelError::UnknownBlock(format!("duplicate {id}")));
            }
            params.set_block(id, t)?;
        }
        if let Some(missing) = Self::block_ids(config).into_iter().find(|id| !seen.contains(id)) {
            return Err(ModelError::UnknownBlock(format!("missing {missing}")));
        }
        Ok(params)
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d, f, m) = (config.vocab, config.hidden, config.intermediate, config.experts);
        Self {
            config: config.clone(),
            shared: SharedParams {
                embed: Tensor::zeros(&[v, d]),
                head: (!config.tied_head).then(|| Tensor::zeros(&[d, v])),
                norms: vec![Tensor::zeros(&[d]); config.layers],
                final_norm: Tensor::zeros(&[d]),
                routers: vec![Tensor::zeros(&[d, m]); config.layers],
            },
            experts: vec![
                vec![
                    ExpertParams {
                        wg: Tensor::zeros(&[d, f]),
                        wu: Tensor::zeros(&[d, f]),
                        wd: Tensor::zeros(&[f, d]),
                    };
                    m
                ];
                config.layers
            ],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bitwise equality of every value (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.config == other.config
            && self.blocks().iter().zip(other.blocks()).all(|((a, x), (b, y))| {
                a == &b
                    && x.shape() == y.shape()
                    && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 11,
            hidden: 4,
            intermediate: 6,
            layers: 2,
            experts: 3,
            active: 2,
            renormalize_after_topk: false,
            tied_head: false,
            coefficients: Default::default(),
        }
    }

    #[test]
    fn names_round_trip() {
        for id in ModelParams::block_ids(&cfg()) {
            assert_eq!(id.to_string().parse::<BlockId>().unwrap(), id);
        }
        assert!("phi.0.1.wx".parse::<BlockId>().is_err());
        assert!("psi.router".parse::<BlockId>().is_err());
    }

    #[test]
    fn counts_match_live_shapes() {
        let c = cfg();
        let p = ModelParams::init(&c, 0).unwrap();
        let shared: usize = p
            .blocks()
            .iter()
            .filter(|(id, _)| id.is_shared())
            .map(|(_, t)| t.numel())
            .sum();
        let experts: usize = p
            .blocks()
            .iter()
            .filter(|(id, _)| !id.is_shared())
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(shared, c.shared_params());
        assert_eq!(experts, c.expert_params());
        assert_eq!(experts, c.layers * c.experts * 3 * c.hidden * c.intermediate);
    }

    #[test]
    fn tied_head_has_no_head_block() {
        let mut c = cfg();
        c.tied_head = true;
        let p = ModelParams::init(&c, 0).unwrap();
        assert!(p.block(BlockId::Head).is_none());
        assert!(!ModelParams::block_ids(&c).contains(&BlockId::Head));
    }

    #[test]
    fn from_blocks_rejects_incomplete_and_misshapen() {
        let c = cfg();
        let p = ModelParams::init(&c, 1).unwrap();
        let mut blocks: Vec<_> = p.blocks().into_iter().map(|(i, t)| (i, t.clone())).collect();
        let rebuilt = ModelParams::from_blocks(&c, blocks.clone()).unwrap();
        assert!(rebuilt.bit_eq(&p));
        let (last, _) = blocks.pop().unwrap();
        assert!(ModelParams::from_blocks(&c, blocks.clone()).is_err());
        blocks.push((last, Tensor::zeros(&[5])));
        assert!(matches!(
            ModelParams::from_blocks(&c, blocks),
            Err(ModelError::BlockShape { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.active = 4;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.hidden = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.coefficients.lb = -1.0;
        assert!(c.validate().is_err());
    }
}
