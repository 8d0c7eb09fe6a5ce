//! `GLCK` checkpoint files.
//!
//! Layout: magic, version byte, u32-length-prefixed JSON snapshot (run
//! config, epoch counter, RNG state), u32 record count + parameter records,
//! u32 record count + optimiser-buffer records, CRC32 of everything after
//! the magic. A record is: name length u16, name bytes, rank u8, one u32 per
//! extent, little-endian f32 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::DyadModel;
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Serialisable position of the shuffling generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    /// 128-bit word position, as a decimal string.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    config: RunConfig,
    epoch: usize,
    rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Copies stored values into `model`, which must have the same parameters.
    pub fn restore_into(&self, model: &mut DyadModel<f32>) -> Result<()> {
        model.params.load_values(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let snapshot = Snapshot {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&snapshot).expect("snapshot serialises");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for section in [&self.params, &self.optimizer] {
            buf.extend_from_slice(&(section.len() as u32).to_le_bytes());
            for (name, t) in section {
                encode_record(&mut buf, name, t)?;
            }
        }
        let crc = crc32fast::hash(&buf[4..]);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        if bytes.len() < 4 + 1 + 4 + 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic or too short)".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                bytes[4]
            )));
        }
        let body = &bytes[4..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader {
            buf: &bytes[..bytes.len() - 4],
            pos: 5,
            path,
        };
        let json_len = r.u32()? as usize;
        let snapshot: Snapshot = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| bad(format!("config snapshot: {e}")))?;
        let mut sections = [Vec::new(), Vec::new()];
        for section in &mut sections {
            let n = r.u32()? as usize;
            for _ in 0..n {
                section.push(r.record()?);
            }
        }
        if r.pos != r.buf.len() {
            return Err(bad(format!("{} trailing bytes", r.buf.len() - r.pos)));
        }
        let [params, optimizer] = sections;
        Ok(Checkpoint {
            config: snapshot.config,
            epoch: snapshot.epoch,
            rng: snapshot.rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

fn encode_record(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::Data(format!("parameter name too long: {name}")))?;
    let rank =
        u8::try_from(t.rank()).map_err(|_| Error::Data(format!("rank too large for `{name}`")))?;
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(rank);
    for &e in t.shape() {
        let e =
            u32::try_from(e).map_err(|_| Error::Data(format!("extent too large in `{name}`")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::format(self.path, "parameter name is not UTF-8"))?;
        let rank = self.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::format(self.path, format!("`{name}`: {e}")))?;
        Ok((name, t))
    }
}
