//! Bit-exact binary serialization of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DFPNCKPT"
//! version  u32
//! count    u32
//! entry ×count:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents u64 ×rank
//!   values   f64 ×prod(extents)
//! ```
//!
//! Values round-trip through `f64::to_bits`, so a save/load cycle is exact
//! down to the last mantissa bit — the property the determinism checks
//! lean on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DFPNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write `entries` in order. Entry order is part of the byte stream, so
/// callers must pass a deterministic ordering.
pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<File>, bytes: &[u8]| w.write_all(bytes).map_err(Error::io(path));

    put(&mut w, &CHECKPOINT_MAGIC)?;
    put(&mut w, &CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Checkpoint(format!("too many tensors: {}", entries.len())))?;
    put(&mut w, &count.to_le_bytes())?;

    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u32::try_from(name_bytes.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        put(&mut w, &name_len.to_le_bytes())?;
        put(&mut w, name_bytes)?;
        let shape = tensor.shape();
        put(&mut w, &(shape.len() as u32).to_le_bytes())?;
        for &extent in shape {
            put(&mut w, &(extent as u64).to_le_bytes())?;
        }
        for &v in tensor.values().iter() {
            put(&mut w, &v.to_bits().to_le_bytes())?;
        }
    }
    w.flush().map_err(Error::io(path))
}

/// Read a checkpoint back as plain leaf tensors, in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version} (expected {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let count = read_u32(&mut r, path, "tensor count")? as usize;

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u32(&mut r, path, "name length")? as usize;
        if name_len > 1 << 16 {
            return Err(Error::Checkpoint(format!(
                "{}: entry {i} has implausible name length {name_len}",
                path.display()
            )));
        }
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, path, "name")?;
        let name = String::from_utf8(name_buf).map_err(|_| {
            Error::Checkpoint(format!("{}: entry {i} name is not UTF-8", path.display()))
        })?;
        let rank = read_u32(&mut r, path, "rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "{}: entry {name} has implausible rank {rank}",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, path, "extent")?;
            let extent = u64::from_le_bytes(buf) as usize;
            len = len.checked_mul(extent).ok_or_else(|| {
                Error::Checkpoint(format!("{}: entry {name} overflows", path.display()))
            })?;
            shape.push(extent);
        }
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, path, "value")?;
            values.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        entries.push((name, Tensor::from_vec(&shape, values)));
    }
    Ok(entries)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(format!("{}: truncated while reading {what}", path.display()))
        } else {
            Error::io(path)(e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(entries: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, entries).unwrap();
        load_checkpoint(&path).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let entries = vec![
            ("w".to_string(), Tensor::from_vec(&[2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300])),
            ("b".to_string(), Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3])),
        ];
        let loaded = roundtrip(&entries);
        assert_eq!(loaded.len(), 2);
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits0: Vec<u64> = t0.to_vec().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u64> = t1.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn save_is_byte_identical_across_calls() {
        let entries = vec![("p".to_string(), Tensor::from_vec(&[4], vec![0.25; 4]))];
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        save_checkpoint(&p1, &entries).unwrap();
        save_checkpoint(&p2, &entries).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPT\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_wrong_version() {
        let entries = vec![("p".to_string(), Tensor::scalar(1.0))];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        save_checkpoint(&path, &entries).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn rejects_truncation() {
        let entries = vec![("p".to_string(), Tensor::from_vec(&[8], vec![1.0; 8]))];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        save_checkpoint(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn empty_checkpoint_roundtrips() {
        assert!(roundtrip(&[]).is_empty());
    }
}
