//! Flat binary checkpoint.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "EAFTCKPT"
//! 8       4     version (u32 LE) = 1
//! 12      4     vocab_size (u32 LE)
//! 16      4     context_len (u32 LE)
//! 20      4     embed_dim (u32 LE)
//! 24      4     hidden_dim (u32 LE)
//! 28      4     seed, low 32 bits (u32 LE)
//! 32      4     seed, high 32 bits (u32 LE)
//! 36      ...   embedding, hidden_weight, hidden_bias, out_weight, out_bias (f64 LE each)
//! ```

use std::path::Path;

use super::model::{ModelConfig, ToyModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EAFTCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 7;

fn dim_u32(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{name} = {v} does not fit in u32")))
}

pub fn to_bytes(params: &ToyModelParams) -> Result<Vec<u8>> {
    params.check_shapes()?;
    let c = &params.config;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * c.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, v) in [
        ("vocab_size", c.vocab_size),
        ("context_len", c.context_len),
        ("embed_dim", c.embed_dim),
        ("hidden_dim", c.hidden_dim),
    ] {
        out.extend_from_slice(&dim_u32(name, v)?.to_le_bytes());
    }
    out.extend_from_slice(&(c.seed as u32).to_le_bytes());
    out.extend_from_slice(&((c.seed >> 32) as u32).to_le_bytes());
    for t in params.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ToyModelParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        vocab_size: word(1) as usize,
        context_len: word(2) as usize,
        embed_dim: word(3) as usize,
        hidden_dim: word(4) as usize,
        seed: u64::from(word(5)) | (u64::from(word(6)) << 32),
    };
    config.validate().map_err(|e| Error::Checkpoint(format!("invalid config in header: {e}")))?;
    let expected = HEADER_LEN + 8 * config.num_params();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut params = ToyModelParams::zeros(config)?;
    let mut chunks = bytes[HEADER_LEN..].chunks_exact(8);
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = f64::from_le_bytes(chunks.next().expect("length checked").try_into().unwrap());
        }
    }
    Ok(params)
}

pub fn save(params: &ToyModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ToyModelParams> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::model::init_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = init_model(ModelConfig { seed: u64::MAX - 5, ..ModelConfig::default() }).unwrap();
        p.out_bias[0] = f64::MIN_POSITIVE;
        p.out_bias[1] = -0.0;
        let bytes = to_bytes(&p).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(q.config, p.config);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(to_bytes(&q).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let p = init_model(ModelConfig::default()).unwrap();
        let mut bytes = to_bytes(&p).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
        let mut bytes = to_bytes(&p).unwrap();
        bytes[8] = 9;
        assert!(from_bytes(&bytes).is_err());
    }
}
