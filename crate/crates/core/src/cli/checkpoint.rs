//! Binary checkpoints.
//!
//! Layout (little-endian): magic `SACK`, version u16, config length u32 and
//! the run config as TOML, epoch u32, test accuracy f64, tensor count u32.
//! Each tensor record is name length u16, name, dtype u8 (0 = f32), rank u8,
//! dims as u32, the payload, then a CRC32 of the record. A CRC32 of
//! everything before it closes the file.

use std::fs;
use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::models::{build_model, Model};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACK";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub test_accuracy: f64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &Model, epoch: usize, test_accuracy: f64) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch,
            test_accuracy,
            tensors: model.state(),
        }
    }

    /// Rebuilds the model described by the stored config and loads the weights.
    pub fn model(&self) -> Result<Model> {
        let mut model = build_model(&self.config.model)?;
        model.load_state(&self.tensors)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = self.config.to_toml()?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.test_accuracy.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let start = out.len();
            let name_len =
                u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        if u32::from_le_bytes(crc.try_into().expect("4 bytes")) != crc32fast::hash(body) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config =
            std::str::from_utf8(r.take(config_len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::from_toml(config)?;
        let epoch = r.u32()? as usize;
        let test_accuracy = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let start = r.pos;
            let name_len = usize::from(r.u16()?);
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
            }
            let rank = usize::from(r.take(1)?[0]);
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let record_crc = crc32fast::hash(&body[start..r.pos]);
            if r.u32()? != record_crc {
                return Err(Error::Checkpoint(format!("{name}: record checksum mismatch")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint {
            config,
            epoch,
            test_accuracy,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::DataSource;
    use crate::models::Variant;

    #[test]
    fn roundtrip_and_corruption() {
        let cfg = RunConfig::new(Variant::Sa, DataSource::Synthetic, 3, "o");
        let model = build_model(&cfg.model).unwrap();
        let ckpt = Checkpoint::from_model(&cfg, &model, 4, 0.75);
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.model().unwrap().state(), model.state());

        let mut bad = bytes.clone();
        bad[bytes.len() / 2] ^= 1;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 9]).is_err());
        assert!(Checkpoint::decode(b"SAQ1").is_err());
    }

    #[test]
    fn arch_mismatch_is_reported() {
        let cfg = RunConfig::new(Variant::Sa, DataSource::Synthetic, 3, "o");
        let model = build_model(&cfg.model).unwrap();
        let mut ckpt = Checkpoint::from_model(&cfg, &model, 0, 0.0);
        ckpt.config.model.embed_widths[0] += 1;
        assert!(matches!(ckpt.model(), Err(Error::Checkpoint(_))));
    }
}
