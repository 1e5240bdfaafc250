//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic, `u32` version, `u32` length plus UTF-8
//! architecture id, `u32` parameter count, then per parameter a `u32`
//! length plus UTF-8 name, `u32` rank and `u64` dims; then every value as
//! `f64` in declaration order; finally a CRC-32 over all preceding bytes.

use super::param::ParamSet;
use super::{Result, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MTWNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const CRC32: crc::Crc<u32> = crc::Crc::<u32>::new(&crc::CRC_32_ISO_HDLC);

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<f64>,
}

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn save_checkpoint(arch: &str, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, arch);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        put_str(&mut out, params.name(id));
        let shape = params.value(id).shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for v in params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = CRC32.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
            return Err(err("truncated"));
        }
        if bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if CRC32.checksum(body) != stored {
            return Err(err("CRC mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let arch = r.string()?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count.min(1024));
        let mut shapes = Vec::with_capacity(count.min(1024));
        let mut total = 0usize;
        for _ in 0..count {
            names.push(r.string()?);
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            total = total
                .checked_add(
                    shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .ok_or_else(|| err("shape overflow"))?,
                )
                .ok_or_else(|| err("shape overflow"))?;
            shapes.push(shape);
        }
        if body.len() - r.pos != total * 8 {
            return Err(err(format!(
                "expected {} value bytes, found {}",
                total * 8,
                body.len() - r.pos
            )));
        }
        let values = r
            .take(total * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            arch,
            names,
            shapes,
            values,
        })
    }
}

/// Decodes `bytes` and copies the values into `params` after checking the
/// architecture id and every parameter shape.
pub fn load_checkpoint(bytes: &[u8], arch: &str, params: &mut ParamSet) -> Result<()> {
    let ck = Checkpoint::decode(bytes)?;
    if ck.arch != arch {
        return Err(err(format!("architecture `{}` does not match `{arch}`", ck.arch)));
    }
    if ck.shapes != params.shapes() {
        return Err(err("parameter shapes do not match the architecture"));
    }
    params.assign_flat(&ck.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use rand::SeedableRng;

    fn params() -> ParamSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        ps.add("w", &[3, 4], Init::FanInUniform { fan_in: 3 }, &mut rng);
        ps.add("b", &[4], Init::FanInUniform { fan_in: 3 }, &mut rng);
        ps
    }

    #[test]
    fn round_trip_is_exact() {
        let ps = params();
        let bytes = save_checkpoint("toy", &ps);
        let mut back = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        back.add("w", &[3, 4], Init::Zeros, &mut rng);
        back.add("b", &[4], Init::Zeros, &mut rng);
        load_checkpoint(&bytes, "toy", &mut back).unwrap();
        assert_eq!(back.flatten(), ps.flatten());
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.names, ["w", "b"]);
        assert_eq!(ck.shapes, vec![vec![3, 4], vec![4]]);
    }

    #[test]
    fn mismatches_are_rejected() {
        let ps = params();
        let bytes = save_checkpoint("toy", &ps);
        let mut other = params();
        assert!(load_checkpoint(&bytes, "other", &mut other).is_err());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut wrong = ParamSet::new();
        wrong.add("w", &[4, 3], Init::Zeros, &mut rng);
        wrong.add("b", &[4], Init::Zeros, &mut rng);
        assert!(load_checkpoint(&bytes, "toy", &mut wrong).is_err());
        let mut corrupt = bytes.clone();
        corrupt[30] ^= 1;
        assert!(Checkpoint::decode(&corrupt).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
