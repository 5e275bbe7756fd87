//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u32` LE header length,
//! the JSON header, then every parameter tensor in declaration order as
//! `rows: u32 LE`, `cols: u32 LE` and `rows·cols` LE `f64` values, and finally
//! the SHA-256 digest of all preceding bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"TEVALCK\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    step: u64,
    /// Token strings by id, so a checkpoint can score raw text on its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub vocab: Option<Vocab>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_shapes(&self.config)?;
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            vocab: self.vocab.as_ref().map(|v| v.tokens().to_vec()),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_scalars() * 8 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in self.params.tensors() {
            out.extend_from_slice(&len_u32(m.rows())?.to_le_bytes());
            out.extend_from_slice(&len_u32(m.cols())?.to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.into());
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
            return Err(bad("truncated file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        header.config.validate()?;
        let mut params = ModelParams::init(&header.config, 0)?;
        for m in params.tensors_mut() {
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if (rows, cols) != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor shape {rows}x{cols}, config implies {:?}",
                    m.shape()
                )));
            }
            for v in m.as_mut_slice() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        let vocab = header.vocab.map(Vocab::from_tokens).transpose()?;
        Ok(Self {
            config: header.config,
            seed: header.seed,
            step: header.step,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// The vocabulary stored with the checkpoint.
    pub fn require_vocab(&self) -> Result<&Vocab> {
        self.vocab
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// `<tag>-step<k>.ckpt`.
pub fn checkpoint_name(tag: &str, step: u64) -> String {
    format!("{tag}-step{step}.ckpt")
}

/// Name of the pointer file recording the newest checkpoint for `tag`.
pub fn latest_pointer(dir: impl AsRef<Path>, tag: &str) -> PathBuf {
    dir.as_ref().join(format!("{tag}.latest"))
}

/// Writes `ckpt` under `dir` with the standard name and updates the pointer.
pub fn save_named(ckpt: &Checkpoint, dir: impl AsRef<Path>, tag: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let name = checkpoint_name(tag, ckpt.step);
    let path = dir.join(&name);
    ckpt.save(&path)?;
    fs::write(latest_pointer(dir, tag), format!("{name}\n"))?;
    Ok(path)
}

/// Resolves the newest checkpoint for `tag` through its pointer file.
pub fn resolve_latest(dir: impl AsRef<Path>, tag: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let name = fs::read_to_string(latest_pointer(dir, tag))?;
    Ok(dir.join(name.trim()))
}

/// Hex SHA-256 of a file, for reproducibility checks.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
