//! Binary checkpoint: magic, version, config snapshot, named tensors, CRC-32.
//!
//! Layout (little-endian):
//! ```text
//! "STDB" | u32 version | u64 body length
//! body: u32 config length, config text,
//!       u32 tensor count, per tensor: u32 name length, name,
//!       u32 rank, u64 extent * rank, f64 * numel
//! u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use super::config::Config;
use crate::error::{CheckpointError, Error, Result};
use crate::net::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"STDB";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
}

pub fn encode(params: &ModelParams, config: &Config) -> Vec<u8> {
    let mut snapshot = config.clone();
    snapshot.num_classes = params.config().num_classes;
    let text = snapshot.to_text();

    let mut body = Vec::new();
    put_u32(&mut body, text.len());
    body.extend_from_slice(text.as_bytes());
    put_u32(&mut body, params.tensors().len());
    for (name, t) in params.named_tensors() {
        put_u32(&mut body, name.len());
        body.extend_from_slice(name.as_bytes());
        put_u32(&mut body, t.rank());
        for &e in t.shape() {
            body.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(HEADER + body.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("field runs past the body".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Malformed("extent overflow".into()))
    }

    fn text(&mut self) -> std::result::Result<&'a str, CheckpointError> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::Malformed("invalid utf-8".into()))
    }
}

/// Verifies magic, version, length and CRC, then returns the body bytes.
fn verify(bytes: &[u8]) -> std::result::Result<&[u8], CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated {
            expected: HEADER + 4,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Truncated {
            expected: HEADER + 4,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = usize::try_from(body_len)
        .ok()
        .and_then(|b| b.checked_add(HEADER + 4))
        .ok_or_else(|| CheckpointError::Malformed("body length overflow".into()))?;
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - expected
        )));
    }
    let split = expected - 4;
    let stored = u32::from_le_bytes(bytes[split..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..split]);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    Ok(&bytes[HEADER..split])
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, Config)> {
    let body = verify(bytes)?;
    let mut r = Reader { bytes: body, pos: 0 };
    let config = Config::parse(r.text()?)
        .map_err(|e| CheckpointError::Malformed(format!("config snapshot: {e}")))?;
    let count = r.u32()?;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.text()?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| CheckpointError::Malformed("tensor size overflow".into()))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("tensor size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        named.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("unread bytes after the last tensor".into()).into());
    }
    let net = config.net_config(config.num_classes);
    let params = ModelParams::from_named(&net, named)
        .map_err(|e| CheckpointError::Malformed(format!("tensors do not fit the config: {e}")))?;
    Ok((params, config))
}

pub fn save(params: &ModelParams, config: &Config, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, Config)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small() -> (ModelParams, Config) {
        let mut cfg = Config::default();
        cfg.height = 8;
        cfg.width = 4;
        cfg.channels = vec![4, 8];
        cfg.strides = vec![2, 1];
        cfg.global_hidden = 6;
        cfg.global_dim = 4;
        cfg.attention_dim = 3;
        cfg.drop_dim = 3;
        cfg.spatial_kernel = 3;
        let params = ModelParams::init(&cfg.net_config(5), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (params, cfg)
    }

    fn bits(p: &ModelParams) -> Vec<Vec<u64>> {
        p.tensors().iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (params, cfg) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stdb");
        save(&params, &cfg, &path).unwrap();
        let (back, back_cfg) = load(&path).unwrap();
        assert_eq!(bits(&back), bits(&params));
        assert_eq!(back.config(), params.config());
        assert_eq!(back_cfg.num_classes, 5);
        assert_eq!(back_cfg.channels, cfg.channels);
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"STDB");
    }

    #[test]
    fn corruption_is_detected_in_order() {
        let (params, cfg) = small();
        let good = encode(&params, &cfg);

        let mut bad = good.clone();
        for b in &mut bad[..4] {
            *b ^= 0xff;
        }
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic(_)))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            decode(&bad),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(9)))
        ));

        let mut bad = good.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(CheckpointError::CrcMismatch { .. }))));

        let mut bad = good.clone();
        bad[40] ^= 0x10;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(CheckpointError::CrcMismatch { .. }))));

        let cut = &good[..good.len() - 100];
        assert!(matches!(
            decode(cut),
            Err(Error::Checkpoint(CheckpointError::Truncated { found, .. })) if found == good.len() - 100
        ));
        assert!(matches!(decode(&good[..2]), Err(Error::Checkpoint(CheckpointError::Truncated { .. }))));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Checkpoint(CheckpointError::Malformed(_)))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load(Path::new("/nonexistent/x.stdb")), Err(Error::Io { .. })));
    }
}
