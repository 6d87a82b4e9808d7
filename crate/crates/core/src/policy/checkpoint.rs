//! Binary checkpoint format.
//!
//! ```text
//! magic    b"RLTCKPT\0"
//! u32 LE   header length
//! header   JSON {"format_version":1,"cfg":{...},"step":n}
//! tensors  embed, w1, b1, w_out, b_out: each u64 LE count then f64 LE values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{PolicyConfig, PolicyParams};
use super::PolicyError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RLTCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    cfg: PolicyConfig,
    step: u64,
}

pub fn to_bytes(params: &PolicyParams) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        cfg: params.cfg,
        step: params.step,
    })
    .expect("header serialization is infallible");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * params.cfg.num_params() + 40);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.tensors() {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(PolicyError::Checkpoint("truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<PolicyParams, PolicyError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(PolicyError::Checkpoint("bad magic".into()));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| PolicyError::Checkpoint(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(PolicyError::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header.cfg.validate()?;
    let mut params = PolicyParams::zeros(header.cfg);
    params.step = header.step;
    for (name, t) in params.tensors_mut() {
        let n = r.u64()? as usize;
        if n != t.len() {
            return Err(PolicyError::ShapeMismatch(format!("{name}: expected {}, found {n}", t.len())));
        }
        for x in t.iter_mut() {
            *x = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(PolicyError::Checkpoint("trailing bytes".into()));
    }
    params.check()?;
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    from_bytes(&fs::read(path)?)
}

/// Lowercase hex SHA-256 of the serialized checkpoint.
pub fn checksum(params: &PolicyParams) -> String {
    hex_digest(&to_bytes(params))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
