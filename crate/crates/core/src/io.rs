//! Binary helpers and atomic file output.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::error::{Error, Result};

/// Writes through a temporary file in the destination directory, then
/// renames it into place, so readers never see a partial file.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Reads line-delimited JSON records, skipping blank and `#` comment lines.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(w: &mut dyn Write, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub(crate) fn put_u32(w: &mut dyn Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_u64(w: &mut dyn Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f32(w: &mut dyn Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_str(w: &mut dyn Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn get_bytes<const N: usize>(r: &mut dyn Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(b)
}

pub(crate) fn get_u32(r: &mut dyn Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get_bytes(r)?))
}

pub(crate) fn get_u64(r: &mut dyn Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get_bytes(r)?))
}

pub(crate) fn get_f32(r: &mut dyn Read) -> Result<f32> {
    Ok(f32::from_le_bytes(get_bytes(r)?))
}

/// Length-prefixed UTF-8 string, capped to reject garbage lengths.
pub(crate) fn get_str(r: &mut dyn Read) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated string: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn expect_magic(r: &mut dyn Read, magic: &[u8; 4]) -> Result<()> {
    let got: [u8; 4] = get_bytes(r)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}
