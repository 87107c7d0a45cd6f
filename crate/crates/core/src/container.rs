//! Binary container shared by residue (`.res`), reference (`.ref`) and dark
//! frame (`.dark`) files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        [u8; 8]   b"SPNRES01" | b"SPNREF01" | b"SPNDRK01"
//! plane_count  u32
//! width        u32       columns per plane
//! height       u32       rows per plane
//! config_hash  u64
//! meta_len     u32
//! meta         [u8; meta_len]   UTF-8 JSON
//! planes       plane_count * height * width f64, row-major, plane after plane
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// First 8 bytes of the SHA-256 of the value's JSON form.
pub fn stable_hash<T: Serialize>(value: &T) -> u64 {
    let canonical = serde_json::to_vec(value).expect("value serialises to JSON");
    let digest = Sha256::digest(&canonical);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Residue,
    Reference,
    Dark,
}

impl ContainerKind {
    pub fn magic(self) -> &'static [u8; 8] {
        match self {
            ContainerKind::Residue => b"SPNRES01",
            ContainerKind::Reference => b"SPNREF01",
            ContainerKind::Dark => b"SPNDRK01",
        }
    }

    fn from_magic(m: &[u8; 8]) -> Option<Self> {
        [ContainerKind::Residue, ContainerKind::Reference, ContainerKind::Dark]
            .into_iter()
            .find(|k| k.magic() == m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub config_hash: u64,
    pub meta: serde_json::Value,
    pub planes: Vec<Array2<f64>>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (h, w) = self.planes.first().map(|p| p.dim()).unwrap_or((0, 0));
        if self.planes.iter().any(|p| p.dim() != (h, w)) {
            return Err(Error::Validation("container planes differ in shape".into()));
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Decode(e.to_string()))?;
        let mut out = Vec::with_capacity(36 + meta.len() + self.planes.len() * h * w * 8);
        out.extend_from_slice(self.kind.magic());
        out.extend_from_slice(&(self.planes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for p in &self.planes {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut cur, &mut magic)?;
        let kind = ContainerKind::from_magic(&magic)
            .ok_or_else(|| Error::Decode(format!("unknown container magic {magic:?}")))?;
        let count = read_u32(&mut cur)? as usize;
        let w = read_u32(&mut cur)? as usize;
        let h = read_u32(&mut cur)? as usize;
        let config_hash = read_u64(&mut cur)?;
        let meta_len = read_u32(&mut cur)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut cur, &mut meta)?;
        let meta = serde_json::from_slice(&meta).map_err(|e| Error::Decode(format!("container metadata: {e}")))?;

        let remaining = bytes.len() - cur.position() as usize;
        if remaining != count * w * h * 8 {
            return Err(Error::Decode(format!(
                "expected {} payload bytes for {count} planes of {w}x{h}, found {remaining}",
                count * w * h * 8
            )));
        }
        let mut planes = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            let mut data = Vec::with_capacity(w * h);
            for _ in 0..w * h {
                read_exact(&mut cur, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            planes.push(Array2::from_shape_vec((h, w), data).map_err(|e| Error::Decode(e.to_string()))?);
        }
        Ok(Container {
            kind,
            config_hash,
            meta,
            planes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Ingestion { path: path.to_path_buf() });
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }

    pub fn expect_kind(self, kind: ContainerKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Decode(format!("expected a {kind:?} container, found {:?}", self.kind)));
        }
        Ok(self)
    }
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Decode("truncated container".into()))
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(cur, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 12),
            hash in any::<u64>(),
        ) {
            let planes = vec![
                Array2::from_shape_vec((2, 3), vals[..6].to_vec()).unwrap(),
                Array2::from_shape_vec((2, 3), vals[6..].to_vec()).unwrap(),
            ];
            let c = Container {
                kind: ContainerKind::Reference,
                config_hash: hash,
                meta: serde_json::json!({"camera_id": "a"}),
                planes,
            };
            let bytes = c.to_bytes().unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back.config_hash, hash);
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let c = Container {
            kind: ContainerKind::Residue,
            config_hash: 7,
            meta: serde_json::Value::Null,
            planes: vec![Array2::zeros((2, 2))],
        };
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Decode(_))));
        assert!(Container::from_bytes(&bytes)
            .unwrap()
            .expect_kind(ContainerKind::Dark)
            .is_err());
    }
}
