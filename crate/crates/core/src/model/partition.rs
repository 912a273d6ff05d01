use super::{ModelError, Result};

/// Contiguous expert ownership: node `i` owns `[i·c, min((i+1)·c, M))` with
/// `c = ⌈M/N⌉`, the same indices in every layer.
pub fn param_partition(experts: usize, nodes: usize) -> Result<Vec<Vec<usize>>> {
    let err = |reason| ModelError::Partition {
        experts,
        nodes,
        reason,
    };
    if nodes == 0 {
        return Err(err("need at least one node"));
    }
    if nodes > experts {
        return Err(err("more nodes than experts"));
    }
    let chunk = experts.div_ceil(nodes);
    let parts: Vec<Vec<usize>> = (0..nodes)
        .map(|i| (i * chunk).min(experts)..((i + 1) * chunk).min(experts))
        .map(|r| r.collect())
        .collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("contiguous blocks leave a node without experts"));
    }
    Ok(parts)
}
