use std::fs;
use std::path::Path;

use super::payload::TensorBlockPayload;
use super::{blocks_payload, params_from_payload, PayloadError, Result};
use crate::model::{ModelConfig, ModelParams};

/// Bytes appended after the payload: the round as u64 LE.
pub const CHECKPOINT_TRAILER: usize = 8;

/// Writes the full model as a GLOBAL_MODEL payload followed by the round.
pub fn write_checkpoint(path: &Path, round: u64, params: &ModelParams) -> Result<()> {
    let mut bytes = blocks_payload(params, |_| true).encode()?;
    bytes.extend_from_slice(&round.to_le_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, config: &ModelConfig) -> Result<(u64, ModelParams)> {
    let bytes = fs::read(path)?;
    if bytes.len() < CHECKPOINT_TRAILER {
        return Err(PayloadError::Truncated {
            offset: 0,
            needed: CHECKPOINT_TRAILER - bytes.len(),
        }
        .into());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - CHECKPOINT_TRAILER);
    let round = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    let params = params_from_payload(config, TensorBlockPayload::decode(body)?)?;
    Ok((round, params))
}
