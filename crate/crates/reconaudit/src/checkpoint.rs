//! Deterministic binary serialization of parameter stores and optimizer
//! state. The byte stream depends only on entry order and contents, so a
//! bitwise-identical run produces a bitwise-identical blob.

use crate::nn::ParamStore;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};

const MAGIC: &[u8; 6] = b"RATN01";

fn put_array(out: &mut Vec<u8>, arr: &ArrayD<f64>) {
    out.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
    for &d in arr.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let std = arr.as_standard_layout();
    for &v in std.as_slice().unwrap() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::Integrity("weight blob truncated".into()));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<ArrayD<f64>> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Integrity(format!("bad array in blob: {e}")))
    }
}

/// Serialize every store entry (name, trainable flag, array), in order,
/// followed by optional extra named arrays (optimizer moments, counters).
pub fn encode(store: &ParamStore, extras: &[(String, ArrayD<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(u8::from(e.trainable));
        put_array(&mut out, &e.array);
    }
    out.extend_from_slice(&(extras.len() as u32).to_le_bytes());
    for (name, arr) in extras {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_array(&mut out, arr);
    }
    out
}

/// Load a blob into a freshly built store with identical layout. Every
/// entry must match by name, shape, and trainability; extras are returned
/// for the caller to interpret.
pub fn decode_into(store: &mut ParamStore, bytes: &[u8]) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(6)? != MAGIC {
        return Err(Error::Integrity("weight blob has wrong magic".into()));
    }
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(Error::Integrity(format!(
            "blob holds {count} parameters, model expects {}",
            store.len()
        )));
    }
    for i in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Integrity("non-utf8 parameter name".into()))?;
        let trainable = r.take(1)?[0] != 0;
        let arr = r.array()?;
        let entry = &store.entries()[i];
        if entry.name != name || entry.trainable != trainable {
            return Err(Error::Integrity(format!(
                "blob entry '{name}' does not match model entry '{}'",
                entry.name
            )));
        }
        if entry.array.shape() != arr.shape() {
            return Err(Error::Integrity(format!(
                "parameter '{name}' has shape {:?} in blob, {:?} in model",
                arr.shape(),
                entry.array.shape()
            )));
        }
        store.set_by_index(i, arr);
    }
    let n_extra = r.u32()? as usize;
    let mut extras = Vec::with_capacity(n_extra);
    for _ in 0..n_extra {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Integrity("non-utf8 extra name".into()))?;
        extras.push((name, r.array()?));
    }
    Ok(extras)
}
