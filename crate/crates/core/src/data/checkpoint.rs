//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SE2VAE01"                      8 bytes
//! version                         u32
//! config length, config text      u32, UTF-8 key=value lines
//! record count                    u32
//! per record:
//!   name length, name             u16, UTF-8
//!   rank, dims                    u8, u32 * rank
//!   data                          f32 * product(dims)
//! ```

use std::path::Path;

use crate::config::{render, KeyValues};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SE2VAE01";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(config: &ModelConfig, store: &ParameterStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = render(&config.to_pairs());
    out.extend_from_slice(&len_u32(text.len(), "config block")?.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&len_u32(store.len(), "record count")?.to_le_bytes());
    for (name, t) in store.iter() {
        let n = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::invalid("tensor rank above 255"))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("truncated {what}: need {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn error(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParameterStore)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let start = r.pos;
    let text = std::str::from_utf8(r.take(n, "config block")?).map_err(|e| Error::Parse {
        offset: (start + e.valid_up_to()) as u64,
        msg: "config block is not UTF-8".into(),
    })?;
    let pairs = KeyValues::parse(text).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset: start as u64 + offset,
            msg,
        },
        other => other,
    })?;
    let config = ModelConfig::from_key_values(pairs).map_err(|e| Error::Parse {
        offset: start as u64,
        msg: e.to_string(),
    })?;

    let count = r.u32("record count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Parse {
            offset: at as u64,
            msg: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            if d == 0 {
                return Err(r.error(format!("zero dimension in {name}")));
            }
            dims.push(d);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.error("size overflow"))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.error("size overflow"))?, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.insert(name, Tensor::new(&dims, data)?).map_err(|e| Error::Parse {
            offset: at as u64,
            msg: e.to_string(),
        })?;
    }
    if r.pos != bytes.len() {
        return Err(r.error("trailing bytes after the last record"));
    }
    Ok((config, store))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, store: &ParameterStore) -> Result<()> {
    super::write_file(path, &encode_checkpoint(config, store)?)
}

/// Loads a checkpoint and checks its tensors against the stored config.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterStore)> {
    let (config, store) = decode_checkpoint(&std::fs::read(path)?)?;
    store.check_against(&crate::model::parameter_specs(&config.resolved()))?;
    Ok((config, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Variant};
    use crate::tensor::RngStream;

    fn sample() -> (ModelConfig, ParameterStore) {
        let cfg = ModelConfig {
            channels: [2, 3, 3, 4],
            latent_iso: 3,
            latent_ori: 2,
            patch_size: 20,
            ..ModelConfig::desk(Variant::Disentangled)
        };
        let (model, store) = build_model(&cfg, &mut RngStream::new(0, 0)).unwrap();
        (model.config().clone(), store)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, mut store) = sample();
        store.get_mut("enc.head.bias").unwrap().data_mut()[0] = f32::from_bits(0x3f80_0001);
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &cfg, &store).unwrap();
        let (cfg2, store2) = load_checkpoint(&p).unwrap();
        assert_eq!(cfg2, cfg);
        for ((n1, t1), (n2, t2)) in store.iter().zip(store2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        let q = dir.path().join("b.ckpt");
        save_checkpoint(&q, &cfg2, &store2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (cfg, store) = sample();
        let good = encode_checkpoint(&cfg, &store).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        match decode_checkpoint(&bad) {
            Err(Error::Parse { offset: 0, msg }) => assert_eq!(msg, "bad magic"),
            other => panic!("{other:?}"),
        }
        match decode_checkpoint(&good[..good.len() - 3]) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut version = good;
        version[8] = 9;
        assert!(matches!(decode_checkpoint(&version), Err(Error::Parse { offset: 12, .. })));
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let (cfg, store) = sample();
        let bytes = encode_checkpoint(&cfg, &store).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + n]).unwrap();
        assert!(text.starts_with("variant=disentangled\n"));
        let count = u32::from_le_bytes(bytes[16 + n..20 + n].try_into().unwrap()) as usize;
        assert_eq!(count, store.len());
    }
}
