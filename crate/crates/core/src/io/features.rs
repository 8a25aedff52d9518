//! Binary feature store.
//!
//! Layout: `b"OVQF"`, dimension (u32 LE), record count (u32 LE), then per
//! record the id length (u16 LE), the UTF-8 id bytes and `dimension` f32 LE
//! values. Records are written in id order.

use std::collections::BTreeMap;
use std::path::Path;

use super::write_bytes;
use crate::error::{Error, Result};
use crate::model::FeatureVector;

const MAGIC: &[u8; 4] = b"OVQF";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dimension: usize,
    entries: BTreeMap<String, FeatureVector>,
}

impl FeatureStore {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 || dimension > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("invalid feature dimension {dimension}")));
        }
        Ok(FeatureStore {
            dimension,
            entries: BTreeMap::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: FeatureVector) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dimension {
            return Err(Error::Shape(format!(
                "feature `{id}` has length {}, store dimension is {}",
                vector.len(),
                self.dimension
            )));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("feature id of {} bytes is too long", id.len())));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.entries.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&FeatureVector> {
        self.get(id).ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureVector)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

pub fn encode_features(store: &FeatureStore) -> Vec<u8> {
    let record = 2 + 4 * store.dimension;
    let mut out = Vec::with_capacity(12 + store.len() * (record + 16));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.dimension as u32).to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (id, v) in store.iter() {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in v.values() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("truncated {what}: need {n} bytes")));
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

    fn error(&self, message: String) -> Error {
        Error::Parse {
            context: "feature store".into(),
            offset: self.pos,
            message,
        }
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.error("bad magic, expected OVQF".into()));
    }
    let dim = cur.u32("dimension")? as usize;
    if dim == 0 {
        cur.pos -= 4;
        return Err(cur.error("dimension must be positive".into()));
    }
    let count = cur.u32("record count")?;
    let mut store = FeatureStore::new(dim)?;
    for _ in 0..count {
        let id_start = cur.pos;
        let id_len = cur.u16("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|e| Error::Parse {
                context: "feature store".into(),
                offset: id_start + 2 + e.valid_up_to(),
                message: "id is not valid UTF-8".into(),
            })?
            .to_string();
        let raw = cur.take(4 * dim, "vector")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let vector = FeatureVector::new(values).map_err(|e| Error::Parse {
            context: "feature store".into(),
            offset: id_start,
            message: format!("record `{id}`: {e}"),
        })?;
        if store.contains(&id) {
            return Err(Error::Parse {
                context: "feature store".into(),
                offset: id_start,
                message: format!("duplicate id `{id}`"),
            });
        }
        store.insert(id, vector)?;
    }
    if cur.pos != bytes.len() {
        return Err(cur.error(format!("{} trailing byte(s)", bytes.len() - cur.pos)));
    }
    Ok(store)
}

pub fn read_features(path: &Path) -> Result<FeatureStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

pub fn write_features(path: &Path, store: &FeatureStore) -> Result<()> {
    write_bytes(path, &encode_features(store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> FeatureStore {
        let mut s = FeatureStore::new(3).unwrap();
        s.insert("b", FeatureVector::new(vec![1.0, -0.0, 3.5e-38]).unwrap()).unwrap();
        s.insert("a", FeatureVector::new(vec![f32::MIN_POSITIVE, 2.0, -7.25]).unwrap()).unwrap();
        s
    }

    #[test]
    fn layout_is_exact() {
        let bytes = encode_features(&store());
        assert_eq!(&bytes[..4], b"OVQF");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        // first record is "a" (sorted)
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes.len(), 12 + 2 * (2 + 1 + 12));
    }

    #[test]
    fn trailing_garbage_rejected_with_offset() {
        let mut bytes = encode_features(&store());
        let n = bytes.len();
        bytes.push(0);
        match decode_features(&bytes).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, n),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = encode_features(&store());
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn wrong_length_insert() {
        let mut s = FeatureStore::new(2).unwrap();
        assert!(s.insert("x", FeatureVector::new(vec![1.0]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::btree_map("[a-z0-9/@]{1,12}", proptest::collection::vec(-1e30f32..1e30f32, 4), 0..20)
        ) {
            let mut s = FeatureStore::new(4).unwrap();
            for (k, v) in &entries {
                s.insert(k.clone(), FeatureVector::new(v.clone()).unwrap()).unwrap();
            }
            let back = decode_features(&encode_features(&s)).unwrap();
            prop_assert_eq!(back.len(), s.len());
            for (id, v) in s.iter() {
                let w = back.get(id).unwrap();
                let a: Vec<u32> = v.values().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = w.values().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
