use std::collections::HashSet;

use thiserror::Error;

use crate::tensor::Tensor;

pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("payload truncated at byte {offset}: need {needed} more")]
    Truncated { offset: usize, needed: usize },
    #[error("block name is not UTF-8")]
    BadName,
    #[error("block {name}: unknown dtype {dtype}")]
    UnknownDtype { name: String, dtype: u8 },
    #[error("duplicate block name {0}")]
    DuplicateName(String),
    #[error("block {0}: element count overflows")]
    Overflow(String),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("block name of {0} bytes exceeds u16")]
    NameTooLong(usize),
    #[error("rank {0} exceeds u8")]
    RankTooLarge(usize),
    #[error("malformed {kind} payload")]
    Malformed { kind: &'static str },
}

/// Named f32 tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBlockPayload {
    pub blocks: Vec<(String, Tensor)>,
}

/// Bytes a block contributes beyond its raw values.
pub fn block_overhead(name: &str, rank: usize) -> usize {
    2 + name.len() + 1 + 1 + 4 * rank
}

impl TensorBlockPayload {
    pub fn new(blocks: Vec<(String, Tensor)>) -> Self {
        Self { blocks }
    }

    pub fn encoded_len(&self) -> usize {
        4 + self
            .blocks
            .iter()
            .map(|(n, t)| block_overhead(n, t.rank()) + 4 * t.numel())
            .sum::<usize>()
    }

    pub fn encode(&self) -> Result<Vec<u8>, PayloadError> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            if !seen.insert(name.as_str()) {
                return Err(PayloadError::DuplicateName(name.clone()));
            }
            let len = u16::try_from(name.len()).map_err(|_| PayloadError::NameTooLong(name.len()))?;
            let rank = u8::try_from(t.rank()).map_err(|_| PayloadError::RankTooLarge(t.rank()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new(bytes);
        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        // each block needs at least 4 bytes; cap the reservation accordingly
        let mut blocks = Vec::with_capacity(count.min(bytes.len() / 4));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| PayloadError::BadName)?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(PayloadError::DuplicateName(name));
            }
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(PayloadError::UnknownDtype { name, dtype });
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| PayloadError::Overflow(name.clone()))?;
                shape.push(d);
            }
            let nbytes = numel
                .checked_mul(4)
                .ok_or_else(|| PayloadError::Overflow(name.clone()))?;
            let raw = r.take(nbytes)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).expect("length checked");
            blocks.push((name, t));
        }
        r.finish()?;
        Ok(Self { blocks })
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(PayloadError::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, PayloadError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<(), PayloadError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(PayloadError::Trailing(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn router_block_round_trip() {
        let t = Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e38]).unwrap();
        let p = TensorBlockPayload::new(vec![("psi.router.0".into(), t)]);
        let bytes = p.encode().unwrap();
        assert_eq!(bytes.len(), p.encoded_len());
        let q = TensorBlockPayload::decode(&bytes).unwrap();
        let (a, b) = (&p.blocks[0].1, &q.blocks[0].1);
        assert_eq!(p.blocks[0].0, q.blocks[0].0);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(&[1]);
        let p = TensorBlockPayload::new(vec![("a".into(), t.clone()), ("a".into(), t)]);
        assert!(matches!(p.encode(), Err(PayloadError::DuplicateName(_))));
    }

    #[test]
    fn absurd_dims_do_not_allocate() {
        let mut b = Vec::new();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(b'x');
        b.push(0);
        b.push(3);
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(TensorBlockPayload::decode(&b).is_err());
        let mut b = Vec::new();
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(TensorBlockPayload::decode(&b), Err(PayloadError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn bit_exact(vals in proptest::collection::vec(any::<u32>(), 1..40), split in 1usize..5) {
            let data: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
            let n = data.len();
            let rows = if n % split == 0 { split } else { 1 };
            let t = Tensor::new(vec![rows, n / rows], data).unwrap();
            let p = TensorBlockPayload::new(vec![("phi.0.1.wg".into(), t.clone()), ("psi.embed".into(), t)]);
            let q = TensorBlockPayload::decode(&p.encode().unwrap()).unwrap();
            for ((na, a), (nb, b)) in p.blocks.iter().zip(&q.blocks) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let _ = TensorBlockPayload::decode(&bytes);
        }
    }
}
