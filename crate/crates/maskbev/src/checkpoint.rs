//! Versioned binary parameter checkpoints.
//!
//! Layout: magic `MBEVCKPT`, u32 LE version, then one record per parameter
//! in store order: u32 name length, UTF-8 name bytes, u32 rank, u64 LE
//! extents, f32 LE payload. Records run to end of file. Round-trips are
//! byte-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"MBEVCKPT";
const VERSION: u32 = 1;

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, p) in store.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &e in &p.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            &magic[..magic.len().min(8)],
            MAGIC
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }

    let mut store = ParamStore::new();
    while !cur.done() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("non-utf8 parameter name: {e}")))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(name, data, &shape);
    }
    Ok(store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("encoder.w", vec![1.5, -2.25, 0.0, 3.5e-3], &[2, 2]);
        s.insert("head.bias", vec![0.25], &[1]);
        s
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let store = demo_store();
        save(&store, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        let b1 = fs::read(&p1).unwrap();
        let b2 = fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "save(load(x)) must reproduce x byte for byte");
        assert!(b1.starts_with(b"MBEVCKPT"));
    }

    #[test]
    fn preserves_order_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save(&demo_store(), &p).unwrap();
        let loaded = load(&p).unwrap();
        let names: Vec<&String> = loaded.names().collect();
        assert_eq!(names, ["encoder.w", "head.bias"]);
        assert_eq!(loaded.get("encoder.w").shape, vec![2, 2]);
        assert_eq!(loaded.get("encoder.w").data.as_ref(), &vec![1.5, -2.25, 0.0, 3.5e-3]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint(_))));

        let p2 = dir.path().join("trunc.ckpt");
        save(&demo_store(), &p2).unwrap();
        let mut bytes = fs::read(&p2).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p2, &bytes).unwrap();
        assert!(matches!(load(&p2), Err(Error::Checkpoint(_))));
    }
}
