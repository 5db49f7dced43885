//! Little-endian f64 blobs and small text helpers shared by the file formats.

use std::io::Write;
use std::path::Path;

use crate::error::{format_err, Error, Result};

pub fn f64_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f64(bytes: &[u8], origin: &Path) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(format_err(origin, "payload length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, f64_to_bytes(values))?;
    Ok(())
}

pub fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = read_existing(path)?;
    bytes_to_f64(&bytes, path)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn read_existing(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => format_err(path, "file not found"),
        _ => Error::Io(e),
    })
}

/// Text header line(s) terminated by a blank line, followed by a raw f64
/// payload. Used by the transmissibility tables.
pub fn write_header_blob(path: &Path, header: &str, payload: &[f64]) -> Result<()> {
    ensure_parent(path)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(header.trim_end().as_bytes())?;
    f.write_all(b"\n\n")?;
    f.write_all(&f64_to_bytes(payload))?;
    f.flush()?;
    Ok(())
}

pub fn read_header_blob(path: &Path) -> Result<(String, Vec<f64>)> {
    let bytes = read_existing(path)?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| format_err(path, "missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| format_err(path, "header is not UTF-8"))?
        .to_string();
    let payload = bytes_to_f64(&bytes[split + 2..], path)?;
    Ok((header, payload))
}
