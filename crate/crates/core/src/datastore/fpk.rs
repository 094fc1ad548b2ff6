//! `FPK1` feature packs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FPK1" | row_count: u32 | dim: u32 | dtype: u32 (1 = f32)
//! row_count * dim IEEE-754 f32 values, row-major
//! index entries until EOF: key_len: u16 | key: UTF-8 bytes | row: u32
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FPK_MAGIC: &[u8; 4] = b"FPK1";
const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, Default)]
pub struct FeaturePack {
    dim: usize,
    data: Vec<f32>,
    index: Vec<(String, u32)>,
    lookup: HashMap<String, u32>,
}

impl PartialEq for FeaturePack {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.index == other.index
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FeaturePack {
    pub fn new(dim: usize) -> Self {
        FeaturePack {
            dim,
            ..Default::default()
        }
    }

    /// Build from equal-length rows and unique `(key, row)` index entries.
    pub fn from_rows(dim: usize, rows: &[Vec<f32>], keys: &[(String, u32)]) -> Result<Self> {
        let mut pack = FeaturePack::new(dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dimension(format!(
                    "row of length {} in a pack of dim {dim}",
                    r.len()
                )));
            }
            pack.data.extend_from_slice(r);
        }
        for (k, row) in keys {
            pack.add_key(k.clone(), *row)?;
        }
        Ok(pack)
    }

    /// Append a row and index it under `key`; returns the row number.
    pub fn push(&mut self, key: impl Into<String>, row: &[f32]) -> Result<u32> {
        let r = self.push_row(row)?;
        self.add_key(key.into(), r)?;
        Ok(r)
    }

    /// Append a row without an index entry; returns the row number.
    pub fn push_row(&mut self, row: &[f32]) -> Result<u32> {
        if row.len() != self.dim {
            return Err(Error::Dimension(format!(
                "row of length {} in a pack of dim {}",
                row.len(),
                self.dim
            )));
        }
        let r = self.row_count() as u32;
        self.data.extend_from_slice(row);
        Ok(r)
    }

    /// Index an existing row under `key`.
    pub fn index_row(&mut self, key: impl Into<String>, row: u32) -> Result<()> {
        self.add_key(key.into(), row)
    }

    fn add_key(&mut self, key: String, row: u32) -> Result<()> {
        if row as usize >= self.row_count() {
            return Err(Error::Format(format!(
                "key `{key}` points at row {row} of {}",
                self.row_count()
            )));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::Format(format!("key of {} bytes is too long", key.len())));
        }
        if self.lookup.insert(key.clone(), row).is_some() {
            return Err(Error::Format(format!("duplicate key `{key}`")));
        }
        self.index.push((key, row));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, r: usize) -> Option<&[f32]> {
        (r < self.row_count()).then(|| &self.data[r * self.dim..(r + 1) * self.dim])
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.lookup.get(key).and_then(|r| self.row(*r as usize))
    }

    pub fn row_of(&self, key: &str) -> Option<u32> {
        self.lookup.get(key).copied()
    }

    pub fn keys(&self) -> &[(String, u32)] {
        &self.index
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(FPK_MAGIC);
        out.extend_from_slice(&(self.row_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (k, r) in &self.index {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != FPK_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"FPK1\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let rows = u32_at(4) as usize;
        let dim = u32_at(8) as usize;
        let dtype = u32_at(12);
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
        }
        if rows > 0 && dim == 0 {
            return Err(Error::Format(format!("{rows} rows of dimension 0")));
        }
        let body = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("row block size overflows".into()))?;
        if bytes.len() < HEADER_LEN + body {
            return Err(Error::Length(format!(
                "truncated: header declares {rows}x{dim} rows needing {} bytes, file has {}",
                HEADER_LEN + body,
                bytes.len()
            )));
        }
        let data = bytes[HEADER_LEN..HEADER_LEN + body]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut pack = FeaturePack {
            dim,
            data,
            ..Default::default()
        };
        let mut o = HEADER_LEN + body;
        while o < bytes.len() {
            if o + 2 > bytes.len() {
                return Err(Error::Length("truncated index entry".into()));
            }
            let klen = u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
            o += 2;
            if o + klen + 4 > bytes.len() {
                return Err(Error::Length("truncated index entry".into()));
            }
            let key = std::str::from_utf8(&bytes[o..o + klen])
                .map_err(|e| Error::Format(format!("index key is not UTF-8: {e}")))?
                .to_string();
            o += klen;
            let row = u32_at(o);
            o += 4;
            pack.add_key(key, row)?;
        }
        Ok(pack)
    }
}

pub fn write_feature_pack(path: impl AsRef<Path>, pack: &FeaturePack) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pack.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_pack(path: impl AsRef<Path>) -> Result<FeaturePack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeaturePack::decode(&bytes)
}

/// Packs addressed by id (the file stem inside a packs directory).
#[derive(Clone, Debug, Default)]
pub struct FeatureStore {
    packs: BTreeMap<String, FeaturePack>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, pack: FeaturePack) {
        self.packs.insert(id.into(), pack);
    }

    pub fn pack(&self, id: &str) -> Option<&FeaturePack> {
        self.packs.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.packs.keys()
    }

    /// Resolve a `(pack_id, row)` descriptor reference.
    pub fn resolve(&self, pack_id: &str, row: u32) -> Option<&[f32]> {
        self.packs.get(pack_id).and_then(|p| p.row(row as usize))
    }

    /// Load every `*.fpk` file in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut store = FeatureStore::new();
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.extension().and_then(|s| s.to_str()) == Some("fpk") {
                let id = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Format(format!("{}: non-UTF-8 pack name", p.display())))?
                    .to_string();
                store.insert(id, read_feature_pack(&p)?);
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> FeaturePack {
        let rows = vec![
            vec![1.0, -2.5, 3.25, 0.0],
            vec![f32::MIN_POSITIVE, 1e-30, -0.0, 7.0],
            vec![0.1, 0.2, 0.3, 0.4],
        ];
        let keys = vec![("a".to_string(), 0), ("b/1".into(), 1), ("ü".into(), 2)];
        FeaturePack::from_rows(4, &rows, &keys).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fpk");
        write_feature_pack(&p, &sample()).unwrap();
        let bytes = fs::read(&p).unwrap();
        let back = read_feature_pack(&p).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.get("b/1").unwrap()[3], 7.0);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(FeaturePack::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated() {
        let bytes = sample().encode();
        assert!(matches!(FeaturePack::decode(&bytes[..30]), Err(Error::Length(_))));
        assert!(matches!(FeaturePack::decode(&bytes[..10]), Err(Error::Length(_))));
        assert!(matches!(
            FeaturePack::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn empty_pack() {
        let p = FeaturePack::new(8);
        let bytes = p.encode();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = FeaturePack::decode(&bytes).unwrap();
        assert_eq!(back.row_count(), 0);
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let rows = vec![vec![0.0f32], vec![1.0]];
        let keys = vec![("k".to_string(), 0), ("k".to_string(), 1)];
        assert!(FeaturePack::from_rows(1, &rows, &keys).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_law(dim in 1usize..6, bits in prop::collection::vec(any::<u32>(), 0..30)) {
            let rows: Vec<Vec<f32>> = bits
                .chunks_exact(dim)
                .map(|c| c.iter().map(|b| f32::from_bits(*b)).collect())
                .collect();
            let keys: Vec<(String, u32)> = (0..rows.len()).map(|i| (format!("r{i}"), i as u32)).collect();
            let pack = FeaturePack::from_rows(dim, &rows, &keys).unwrap();
            let bytes = pack.encode();
            prop_assert_eq!(bytes.len(), HEADER_LEN + rows.len() * dim * 4 + keys.iter().map(|(k, _)| 6 + k.len()).sum::<usize>());
            let back = FeaturePack::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
