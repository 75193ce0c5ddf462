//! `CFT1` tensor container.
//!
//! ```text
//! magic  "CFT1"
//! dtype  u8      0 = f32 little-endian
//! ndim   u8
//! dims   ndim x u32 little-endian
//! data   row-major payload, 4 bytes per element
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{CfpError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CFT1";
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.rank())
        .map_err(|_| CfpError::InvalidArgument(format!("rank {} does not fit the header", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(DTYPE_F32);
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| CfpError::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, expected_total: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(CfpError::Truncated {
            expected: expected_total,
            found: expected_total - (n - bytes.len()),
        });
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses one container from the front of `bytes`, returning the tensor and
/// the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let total = bytes.len();
    let mut rest = bytes;
    let magic = take(&mut rest, 4, 6)?;
    if magic != MAGIC {
        return Err(CfpError::BadMagic(magic.try_into().expect("4 bytes")));
    }
    let head = take(&mut rest, 2, 6)?;
    let (dtype, ndim) = (head[0], head[1] as usize);
    if dtype != DTYPE_F32 {
        return Err(CfpError::UnsupportedDtype(dtype));
    }
    if ndim == 0 {
        return Err(CfpError::InvalidShape(Vec::new()));
    }
    let header = 6 + 4 * ndim;
    let dims = take(&mut rest, 4 * ndim, header)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CfpError::InvalidShape(shape.clone()))?;
    let expected = numel
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| CfpError::InvalidShape(shape.clone()))?;
    if total < expected {
        return Err(CfpError::Truncated { expected, found: total });
    }
    let payload = take(&mut rest, expected - header, expected)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((Tensor::new(shape, data)?, expected))
}

/// Parses exactly one container; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(CfpError::TrailingBytes(bytes.len() - used));
    }
    Ok(t)
}

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| CfpError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CfpError::io(tmp.path(), e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let perms = fs::Permissions::from_mode(0o644);
        tmp.as_file().set_permissions(perms).map_err(|e| CfpError::io(tmp.path(), e))?;
    }
    tmp.as_file().sync_all().map_err(|e| CfpError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CfpError::io(path, e.error))?;
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode(t)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CfpError::io(path, e))?;
    decode(&bytes)
}
