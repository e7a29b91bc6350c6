//! Flat binary checkpoints: named parameter arrays plus string metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"RLCP"
//! u32    format version (currently 1)
//! u32    meta count, then per entry: u32 key len, key bytes, u32 val len, val bytes
//! u32    set count, then per set:
//!        u32 name len, name bytes, u32 entry count, then per entry:
//!        u32 name len, name bytes, u32 ndims, u64 dims..., f64 values...
//! ```

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RLCP";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub meta: Vec<(String, String)>,
    pub sets: Vec<(String, Vec<(String, Vec<usize>, Vec<f64>)>)>,
}

impl CheckpointData {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Rebuild a named param set from the checkpoint.
    pub fn to_param_set(&self, set_name: &str) -> Result<ParamSet> {
        let (_, entries) = self
            .sets
            .iter()
            .find(|(n, _)| n == set_name)
            .ok_or_else(|| Error::incompatible(format!("checkpoint has no param set {set_name}")))?;
        let mut out = ParamSet::new(set_name);
        for (name, shape, values) in entries {
            out.insert(name.clone(), Tensor::new(shape.clone(), values.clone())?);
        }
        Ok(out)
    }
}

pub fn write_checkpoint(path: &Path, meta: &[(String, String)], sets: &[&ParamSet]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in meta {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    buf.extend_from_slice(&(sets.len() as u32).to_le_bytes());
    for set in sets {
        put_str(&mut buf, set.name());
        buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
        for (name, t) in set.iter() {
            put_str(&mut buf, name);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let buf = fs::read(path).map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::incompatible(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let n_meta = cur.u32()? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let k = cur.string()?;
        let v = cur.string()?;
        meta.push((k, v));
    }
    let n_sets = cur.u32()? as usize;
    let mut sets = Vec::with_capacity(n_sets);
    for _ in 0..n_sets {
        let set_name = cur.string()?;
        let n_entries = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name = cur.string()?;
            let ndims = cur.u32()? as usize;
            if ndims == 0 || ndims > 2 {
                return Err(Error::format(format!("checkpoint tensor rank {ndims}")));
            }
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(cur.f64()?);
            }
            entries.push((name, shape, values));
        }
        sets.push((set_name, entries));
    }
    Ok(CheckpointData { meta, sets })
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format("checkpoint string not utf8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.ckpt");
        let mut set = ParamSet::new("heads");
        set.insert("w", Tensor::matrix(2, 3, vec![1.5, -2.25, 0.1, 1e-300, 3.0, -0.0]).unwrap());
        set.insert("b", Tensor::vector(vec![0.125]));
        let meta = vec![("kind".to_string(), "dqn".to_string()), ("seed".to_string(), "2023".to_string())];
        write_checkpoint(&path, &meta, &[&set]).unwrap();
        let data = read_checkpoint(&path).unwrap();
        assert_eq!(data.meta_value("kind"), Some("dqn"));
        let restored = data.to_param_set("heads").unwrap();
        for ((n1, t1), (n2, t2)) in set.iter().zip(restored.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.values().iter().zip(t2.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.ckpt");
        let mut set = ParamSet::new("s");
        set.insert("w", Tensor::vector(vec![1.0, 2.0]));
        write_checkpoint(&path, &[], &[&set]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn missing_set_is_incompatible() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.ckpt");
        let mut set = ParamSet::new("a");
        set.insert("w", Tensor::vector(vec![1.0]));
        write_checkpoint(&path, &[], &[&set]).unwrap();
        let data = read_checkpoint(&path).unwrap();
        assert!(matches!(data.to_param_set("b"), Err(Error::Incompatible(_))));
    }
}
