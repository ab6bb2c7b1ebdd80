//! Checkpoint container.
//!
//! ```text
//! "XFCKPT1"
//! u32 config_len, config as JSON
//! [u8; 16] vocab hash
//! u32 n_groups
//!   u16 name_len, name, u32 n_tensors
//!     u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data[prod(dims)]
//! ```
//! All integers and floats little-endian.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use super::{group_of, ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"XFCKPT1";

pub fn write_checkpoint<W: Write>(params: &ModelParameters, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(params.config())?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&params.vocab_hash());
    let groups = params.groups();
    buf.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in &groups {
        put_name(&mut buf, g);
        let members = params.group(g);
        buf.extend_from_slice(&(members.len() as u32).to_le_bytes());
        for (name, t) in members {
            put_name(&mut buf, name);
            buf.push(t.ndim() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn put_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0; n];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|e| Error::format("checkpoint", e.to_string()))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ModelParameters> {
    let mut r = Reader { inner: r };
    if r.bytes(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let n = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(&r.bytes(n)?)?;
    let vocab_hash: [u8; 16] = r.bytes(16)?.try_into().unwrap();
    let n_groups = r.u32()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..n_groups {
        let group = r.name()?;
        let n_tensors = r.u32()?;
        for _ in 0..n_tensors {
            let name = r.name()?;
            if group_of(&name) != group {
                return Err(Error::format("checkpoint", format!("tensor {name:?} filed under group {group:?}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data =
                r.bytes(numel * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
    }
    ModelParameters::from_parts(config, vocab_hash, names, tensors)
}

/// Groups whose tensors differ between `a` and `b` (by name, shape or value)
/// or exist on only one side.
pub fn changed_groups(a: &ModelParameters, b: &ModelParameters) -> BTreeSet<String> {
    let mut all: BTreeSet<String> = a.groups().into_iter().collect();
    all.extend(b.groups());
    all.into_iter().filter(|g| a.group(g) != b.group(g)).collect()
}
