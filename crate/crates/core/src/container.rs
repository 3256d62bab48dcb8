//! Binary container shared by parameter files and training checkpoints:
//!
//! ```text
//! magic "SPECDIFF" | version u32 | header length u64 | header JSON
//! | block count u64 | per block: length u64, then f64 values
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnet::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::ConvSpec;

pub const MAGIC: &[u8; 8] = b"SPECDIFF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: String,
    pub arch: ArchConfig,
    pub seed: u64,
    pub param_count: usize,
    pub layers: Vec<ConvSpec>,
    /// Kind-specific metadata (training step, configuration, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Writes via a temporary sibling and renames, so a crash never leaves a
/// half-written file under `path`.
pub fn write(path: &Path, header: &ContainerHeader, blocks: &[&[f64]]) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(&tmp, e));
        put(MAGIC)?;
        put(&VERSION.to_le_bytes())?;
        put(&(json.len() as u64).to_le_bytes())?;
        put(&json)?;
        put(&(blocks.len() as u64).to_le_bytes())?;
        for block in blocks {
            put(&(block.len() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(block.len() * 8);
            for v in block.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            put(&buf)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::corrupt(self.path, "truncated file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read(path: &Path) -> Result<(ContainerHeader, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let header_len = cur.u64()? as usize;
    let header: ContainerHeader = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
    let count = cur.u64()? as usize;
    let mut blocks = Vec::with_capacity(count.min(16));
    for _ in 0..count {
        let len = cur.u64()? as usize;
        let raw = cur.take(len.checked_mul(8).ok_or_else(|| Error::corrupt(path, "block too large"))?)?;
        blocks.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    if cur.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    Ok((header, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> ContainerHeader {
        ContainerHeader {
            kind: "test".into(),
            arch: ArchConfig::default(),
            seed: 3,
            param_count: 2,
            layers: vec![],
            extra: serde_json::json!({"step": 7}),
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let a = [1.5, -0.0, f64::MIN_POSITIVE];
        let b = [2.0];
        write(&path, &header(), &[&a, &b]).unwrap();
        let (h, blocks) = read(&path).unwrap();
        assert_eq!(h, header());
        assert_eq!(blocks[0][1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(blocks, vec![a.to_vec(), b.to_vec()]);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read(&path), Err(Error::Corrupt { .. })));

        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read(&path), Err(Error::VersionMismatch { found: 9, .. })));

        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read(&path), Err(Error::Corrupt { .. })));
        assert!(matches!(read(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
