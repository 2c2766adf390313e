//! Binary container (`magic | version | header length | JSON header | f64
//! payload`, little-endian) and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(e)
    })
}

pub fn write_container(path: &Path, magic: &[u8; 8], version: u32, header: &impl Serialize, payload: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(24 + header.len() + payload.len() * 8);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&version.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_container(path: &Path, magic: &[u8; 8], version: u32) -> Result<(serde_json::Value, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::Load { path: path.to_path_buf(), record: 0, msg: msg.to_string() };
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(fail("bad magic"));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != version {
        return Err(Error::Version { expected: version, found });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let hend = 20usize.checked_add(hlen).filter(|&e| e + 8 <= bytes.len()).ok_or_else(|| fail("truncated header"))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..hend])?;
    let n = u64::from_le_bytes(bytes[hend..hend + 8].try_into().unwrap()) as usize;
    let body = &bytes[hend + 8..];
    if body.len() != n * 8 {
        return Err(fail(&format!("payload has {} bytes, expected {}", body.len(), n * 8)));
    }
    let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let payload = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        write_container(&p, b"TESTMAGC", 3, &serde_json::json!({"a": 1}), &payload).unwrap();
        let (h, back) = read_container(&p, b"TESTMAGC", 3).unwrap();
        assert_eq!(h["a"], 1);
        assert_eq!(payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), back.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matches!(read_container(&p, b"TESTMAGC", 4), Err(Error::Version { expected: 4, found: 3 })));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_container(&p, b"TESTMAGC", 3).is_err());
    }
}
