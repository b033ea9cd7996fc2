//! Binary checkpoint container: named f64 tensors plus text metadata.
//!
//! Layout (all integers little-endian):
//! magic `KPANIMCK`, u32 version, u64 tensor count, then per tensor
//! u32 name length, name bytes, u32 rank, u64 dims, f64 data;
//! u64 text count, then per entry u32 key length, key, u32 value length, value.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"KPANIMCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub text: BTreeMap<String, String>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name}")))
    }

    /// Stores a u64 exactly as two 32-bit halves.
    pub fn insert_u64(&mut self, name: impl Into<String>, v: u64) {
        self.insert(name, Tensor::new(&[2], vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64]).unwrap());
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let t = self.get(name)?;
        match t.data() {
            [hi, lo] => Ok(((*hi as u64) << 32) | (*lo as u64)),
            _ => Err(Error::Format(format!("entry {name} is not a u64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.text.len() as u64).to_le_bytes());
        for (k, v) in &self.text {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u64()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.tensors.insert(name, Tensor::new(&shape, data)?);
        }
        for _ in 0..r.u64()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.text.insert(k, v);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }

    /// Writes through a temporary file and rename; one retry on failure.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        let attempt = || -> std::io::Result<()> {
            fs::write(&tmp, &bytes)?;
            fs::rename(&tmp, path)
        };
        attempt().or_else(|_| attempt()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| io_err(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("a.weight", Tensor::from_fn(&[2, 3], |i| (i as f64).sin() * 1e-300));
        c.insert("b", Tensor::new(&[1], vec![f64::MIN_POSITIVE]).unwrap());
        c.insert("scalar", Tensor::scalar(-0.0));
        c.insert_u64("meta/hash", u64::MAX - 12345);
        c.text.insert("config".into(), "k = 4\nseed = 7\n".into());
        c
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get_u64("meta/hash").unwrap(), u64::MAX - 12345);
        assert!(back.get("scalar").unwrap().data()[0].is_sign_negative());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        c.save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn unwritable_path_fails() {
        let c = sample();
        assert!(c.save(Path::new("/nonexistent-dir/x/c.bin")).is_err());
    }
}
