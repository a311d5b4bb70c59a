//! Flat key-value checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "BCNCKPT1"
//! entry count  u32
//! per entry, in ascending key order:
//!   key length u32, key bytes (UTF-8)
//!   value count u32, values as f64
//! ```
//!
//! Keys are dotted paths such as `norm1.gamma` or `norm1.running_var`.
//! Every value is a vector of 64-bit floats; scalars are length-1 vectors.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BCNCKPT1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f64>) {
        self.entries.insert(key.into(), values);
    }

    pub fn insert_scalar(&mut self, key: impl Into<String>, value: f64) {
        self.insert(key, vec![value]);
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn require(&self, key: &str) -> Result<&[f64]> {
        self.get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing key {key}")))
    }

    pub fn require_scalar(&self, key: &str) -> Result<f64> {
        match self.require(key)? {
            [v] => Ok(*v),
            other => Err(Error::Checkpoint(format!(
                "key {key} holds {} values, expected 1",
                other.len()
            ))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (k, vals) in &self.entries {
            w.write_all(&(k.len() as u32).to_le_bytes())?;
            w.write_all(k.as_bytes())?;
            w.write_all(&(vals.len() as u32).to_le_bytes())?;
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let klen = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(klen)?)
                .map_err(|_| Error::Checkpoint("key is not UTF-8".into()))?
                .to_string();
            let n = r.u32()? as usize;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("value count overflow".into()))?,
            )?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if entries.insert(key.clone(), vals).is_some() {
                return Err(Error::Checkpoint(format!("duplicate key {key}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
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
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let mut c = Checkpoint::new();
        c.insert_scalar("a", 1.0);
        let b = c.to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'a');
        assert_eq!(&b[17..21], &1u32.to_le_bytes());
        assert_eq!(&b[21..29], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 29);
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut c = Checkpoint::new();
        c.insert("norm1.gamma", vec![1.0, 2.0]);
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT\0\0\0\0").is_err());
    }

    #[test]
    fn scalar_access() {
        let mut c = Checkpoint::new();
        c.insert("v", vec![1.0, 2.0]);
        c.insert_scalar("s", 3.0);
        assert_eq!(c.require_scalar("s").unwrap(), 3.0);
        assert!(c.require_scalar("v").is_err());
        assert!(c.require("missing").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(entries in proptest::collection::btree_map(
            "[a-z0-9_.]{1,16}",
            proptest::collection::vec(proptest::num::f64::ANY, 0..8),
            0..6,
        )) {
            let mut c = Checkpoint::new();
            for (k, v) in &entries {
                c.insert(k.clone(), v.clone());
            }
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }
}
