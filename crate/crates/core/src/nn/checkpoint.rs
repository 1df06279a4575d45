//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CLWI"
//! version u16            (currently 1)
//! arch    u8 len + utf8   architecture id string
//!         u32 width, u32 num_classes
//!         u8 rank + u32*rank   per-sample input shape
//! table   u32 entry count, then per entry:
//!         u16 len + utf8 name, u8 dtype (0 = f32), u8 rank, u32*rank dims
//! payload per entry, in table order: numel * f32
//! ```
//!
//! Loading validates the magic, version, arch block, name table, payload
//! length (no truncation, no trailing bytes) and that the tensors exactly
//! match the architecture's parameter layout. The table may list entries in
//! any order; the parameter set it produces is identical either way.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::nn::{ArchId, ModelArch, ParamSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CLWI";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let bytes = to_bytes(params);
    std::fs::write(path, bytes).map_err(|source| CoreError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|source| CoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let arch = params.arch();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let id = arch.id.as_str().as_bytes();
    out.push(id.len() as u8);
    out.extend_from_slice(id);
    out.extend_from_slice(&(arch.width as u32).to_le_bytes());
    out.extend_from_slice(&(arch.num_classes as u32).to_le_bytes());
    out.push(arch.input_shape.len() as u8);
    for &d in &arch.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let entries: Vec<(&String, &Tensor)> = params.iter().collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in &entries {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CoreError::CorruptCheckpoint("name is not valid UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CoreError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CoreError::CorruptCheckpoint(format!(
            "unsupported version {}",
            version
        )));
    }
    let id_len = r.u8()? as usize;
    let id = ArchId::parse(&r.utf8(id_len)?)
        .map_err(|e| CoreError::CorruptCheckpoint(e.to_string()))?;
    let width = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let rank = r.u8()? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.u32()? as usize);
    }
    let arch = ModelArch::new(id, width, num_classes, input_shape)
        .map_err(|e| CoreError::CorruptCheckpoint(e.to_string()))?;

    let n_entries = r.u32()? as usize;
    let mut table = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len)?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CoreError::CorruptCheckpoint(format!(
                "unknown dtype tag {} for '{}'",
                dtype, name
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        table.push((name, shape));
    }

    let mut tensors = BTreeMap::new();
    for (name, shape) in table {
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
            return Err(CoreError::CorruptCheckpoint(format!(
                "duplicate tensor '{}'",
                name
            )));
        }
    }
    if r.pos != bytes.len() {
        return Err(CoreError::CorruptCheckpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }

    // The tensors must be exactly the architecture's layout.
    let layout = arch.param_layout();
    if layout.len() != tensors.len() {
        return Err(CoreError::CheckpointMismatch(format!(
            "{} tensors stored, architecture has {}",
            tensors.len(),
            layout.len()
        )));
    }
    for (name, shape) in &layout {
        match tensors.get(name) {
            None => {
                return Err(CoreError::CheckpointMismatch(format!(
                    "missing tensor '{}'",
                    name
                )))
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(CoreError::CheckpointMismatch(format!(
                    "'{}' has shape {:?}, architecture wants {:?}",
                    name,
                    t.shape(),
                    shape
                )))
            }
            _ => {}
        }
    }
    Ok(ParamSet::from_parts(arch, tensors))
}
