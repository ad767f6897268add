//! Minimal named-tensor weight container: a fixed header listing (name,
//! dims, payload offset) per tensor followed by contiguous little-endian
//! f32 data. Load(save(p)) is bit-exact at 32-bit precision.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::real::Real;
use crate::tensor::{Dims4, Tensor4};
use std::collections::HashMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SDWEIGHT";

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor4<f32>,
}

/// Serialize named tensors. Offsets are assigned contiguously in entry
/// order; names must be unique and every value finite.
pub fn encode_weight_file(entries: &[(String, Tensor4<f32>)]) -> Result<Vec<u8>> {
    let mut seen = HashMap::new();
    for (name, t) in entries {
        if seen.insert(name.as_str(), ()).is_some() {
            return Err(Error::Format(format!("duplicate tensor name '{name}'")));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("tensor '{name}'")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long ({})", name.len())));
        }
    }

    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    let mut offset: u64 = 0;
    for (name, t) in entries {
        header.extend_from_slice(&(name.len() as u16).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(4u8);
        for d in t.dims().as_array() {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        header.extend_from_slice(&offset.to_le_bytes());
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += (t.len() * 4) as u64;
    }
    header.extend_from_slice(&payload);
    Ok(header)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "weight file ends inside {what} (offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a weight container, validating magic, name uniqueness, offset
/// contiguity and exact payload length.
pub fn decode_weight_file(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic").map(|m| m != MAGIC).unwrap_or(true) {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let count = cur.u32("entry count")? as usize;

    struct Entry {
        name: String,
        dims: Dims4,
    }
    let mut entries = Vec::with_capacity(count);
    let mut seen: HashMap<String, ()> = HashMap::new();
    let mut expected_offset: u64 = 0;
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not valid utf-8".into()))?
            .to_string();
        let ndims = cur.take(1, "dim count")?[0] as usize;
        if ndims > 4 {
            return Err(Error::Format(format!(
                "tensor '{name}' has {ndims} dims, at most 4 supported"
            )));
        }
        let mut dims = [1usize; 4];
        for i in 0..ndims {
            // Fewer than 4 dims left-pad with singleton axes.
            dims[4 - ndims + i] = cur.u32("dims")? as usize;
        }
        let offset = cur.u64("offset")?;
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Format(format!("duplicate tensor name '{name}'")));
        }
        if offset != expected_offset {
            return Err(Error::Format(format!(
                "offset inconsistency for tensor '{name}': expected {expected_offset}, got {offset}"
            )));
        }
        let d = Dims4::new(dims[0], dims[1], dims[2], dims[3]);
        expected_offset += (d.count() * 4) as u64;
        entries.push(Entry { name, dims: d });
    }

    let payload = &bytes[cur.pos..];
    let expected_len = expected_offset as usize;
    if payload.len() < expected_len {
        return Err(Error::Format(format!(
            "truncated payload: expected {expected_len} bytes, got {}",
            payload.len()
        )));
    }
    if payload.len() > expected_len {
        return Err(Error::Format(format!(
            "trailing bytes: expected {expected_len} payload bytes, got {}",
            payload.len()
        )));
    }

    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for e in entries {
        let n = e.dims.count();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b: [u8; 4] = payload[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(b));
        }
        pos += 4 * n;
        out.push(NamedTensor {
            name: e.name,
            tensor: Tensor4::from_vec(e.dims, data)?,
        });
    }
    Ok(out)
}

/// Save a model's parameters (cast to f32) under their visit-path names.
pub fn save_model<T: Real>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Tensor4<f32>)> = Vec::new();
    params.visit(&mut |name, t| entries.push((name, t.cast())));
    let bytes = encode_weight_file(&entries)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load parameters for a config, requiring an exact name/shape match
/// between the file and the architecture.
pub fn load_model<T: Real>(cfg: &ModelConfig, path: &Path) -> Result<ModelParams<T>> {
    let bytes = std::fs::read(path)?;
    let tensors = decode_weight_file(&bytes)?;
    let mut by_name: HashMap<String, Tensor4<f32>> =
        tensors.into_iter().map(|t| (t.name, t.tensor)).collect();

    let mut params: ModelParams<T> = ModelParams::random(cfg, 0)?;
    let mut err: Option<Error> = None;
    params.visit_mut(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        match by_name.remove(&name) {
            None => err = Some(Error::Format(format!("missing tensor '{name}'"))),
            Some(t) if t.dims() != slot.dims() => {
                err = Some(Error::Format(format!(
                    "tensor '{name}' has dims {}, model expects {}",
                    t.dims(),
                    slot.dims()
                )));
            }
            Some(t) => *slot = t.cast(),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Format(format!("unexpected tensor '{name}' in weight file")));
    }
    Ok(params)
}

/// Total number of scalars stored in a weight file.
pub fn file_scalar_count(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    let tensors = decode_weight_file(&bytes)?;
    Ok(tensors.iter().map(|t| t.tensor.len() as u64).sum())
}
