//! Binary container for parameter stores.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "FLDM" | u32 version (1) | u8 has_optimizer
//! u16 kind length | kind (UTF-8)
//! u64 header length | header (UTF-8 TOML, model configuration)
//! u32 block count
//! per block:
//!   u32 name length | name | u8 trainable | u64 rows | u64 cols
//!   rows·cols f64 values
//!   if has_optimizer: u64 step | rows·cols f64 m | rows·cols f64 v
//! ```
//!
//! Values are stored as `f64`, so a save/load round trip is bit-exact.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grad::ParamStore;

const MAGIC: &[u8; 4] = b"FLDM";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub header: String,
    pub store: ParamStore,
    pub has_optimizer: bool,
}

fn put_array(buf: &mut Vec<u8>, a: &Array2<f64>) {
    for &x in a.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(kind: &str, header: &str, store: &ParamStore, with_optimizer: bool) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(with_optimizer as u8);
    buf.extend_from_slice(&(kind.len() as u16).to_le_bytes());
    buf.extend_from_slice(kind.as_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for b in store.blocks() {
        buf.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(b.name.as_bytes());
        buf.push(b.trainable as u8);
        buf.extend_from_slice(&(b.value.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(b.value.ncols() as u64).to_le_bytes());
        put_array(&mut buf, &b.value);
        if with_optimizer {
            buf.extend_from_slice(&b.step.to_le_bytes());
            put_array(&mut buf, &b.m);
            put_array(&mut buf, &b.v);
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("model file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    fn array(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let len = rows
            .checked_mul(cols)
            .and_then(|l| l.checked_mul(8))
            .ok_or_else(|| Error::Format("block size overflow".into()))?;
        let raw = self.take(len)?;
        let v = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model file version {version}")));
    }
    let has_optimizer = r.u8()? != 0;
    let kind_len = r.u16()? as usize;
    let kind = r.string(kind_len)?;
    let header_len = r.u64()? as usize;
    let header = r.string(header_len)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let trainable = r.u8()? != 0;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let value = r.array(rows, cols)?;
        if store.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate block `{name}`")));
        }
        store.add(name, value, trainable);
        if has_optimizer {
            let step = r.u64()?;
            let m = r.array(rows, cols)?;
            let v = r.array(rows, cols)?;
            let b = &mut store.blocks_mut()[i];
            b.step = step;
            b.m = m;
            b.v = v;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes in model file",
            bytes.len() - r.pos
        )));
    }
    Ok(Container {
        kind,
        header,
        store,
        has_optimizer,
    })
}

pub fn write(path: &Path, kind: &str, header: &str, store: &ParamStore, with_optimizer: bool) -> Result<()> {
    std::fs::write(path, encode(kind, header, store, with_optimizer))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Container> {
    decode(&std::fs::read(path)?)
}

/// Parses the embedded TOML header.
pub fn parse_header<T: serde::de::DeserializeOwned>(c: &Container, expected_kind: &str) -> Result<T> {
    if c.kind != expected_kind {
        return Err(Error::Format(format!(
            "expected a `{expected_kind}` model, found `{}`",
            c.kind
        )));
    }
    toml::from_str(&c.header).map_err(|e| Error::Format(format!("model header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_with_optimizer() {
        let mut s = ParamStore::new();
        s.add("a", array![[1.5, -2.0], [f64::MIN_POSITIVE, 3.0]], true);
        s.add("b", array![[0.1]], false);
        s.blocks_mut()[0].m.fill(0.25);
        s.blocks_mut()[0].step = 7;
        let c = decode(&encode("test", "x = 1\n", &s, true)).unwrap();
        assert_eq!(c.kind, "test");
        assert_eq!(c.header, "x = 1\n");
        for (x, y) in c.store.blocks().iter().zip(s.blocks()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
            assert_eq!(x.m, y.m);
            assert_eq!(x.step, y.step);
            assert_eq!(x.trainable, y.trainable);
        }
        let bytes = encode("test", "", &s, false);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }
}
