//! Parameter archive: a manifest of named `CFT1` entries in one file.
//!
//! ```text
//! magic   "CFPM"
//! count   u32 LE
//! entry   name_len u16 LE, name utf-8, kind u8 (0 trainable, 1 statistic),
//!         byte_len u64 LE, CFT1 bytes
//! ```

use std::path::Path;

use crate::error::{CfpError, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::Tensor;

use super::tensor_file::{decode, encode, write_atomic};

pub const MAGIC: [u8; 4] = *b"CFPM";

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Trainable => 0,
        ParamKind::Statistic => 1,
    }
}

pub fn encode_params(module: &dyn Module) -> Result<Vec<u8>> {
    let entries = module.named_tensors("");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, kind, t) in &entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| CfpError::InvalidArgument(format!("parameter name too long: {name}")))?;
        let body = encode(t)?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind_code(*kind));
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CfpError::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

/// `(name, kind, tensor)` entries in archive order.
pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, ParamKind, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if magic != MAGIC {
        return Err(CfpError::BadMagic(magic));
    }
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CfpError::InvalidArgument("parameter name is not utf-8".into()))?
            .to_owned();
        let kind = match r.array::<1>()?[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Statistic,
            k => return Err(CfpError::InvalidArgument(format!("unknown parameter kind {k} for {name}"))),
        };
        let body_len = usize::try_from(u64::from_le_bytes(r.array()?))
            .map_err(|_| CfpError::InvalidArgument("entry too large".into()))?;
        let t = decode(r.take(body_len)?)?;
        out.push((name, kind, t));
    }
    if r.pos != bytes.len() {
        return Err(CfpError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

/// Overwrites every tensor of `module` from the archive. Every visited name
/// must be present with a matching shape, and the archive may not carry
/// names the module lacks.
pub fn apply_params(module: &mut dyn Module, entries: Vec<(String, ParamKind, Tensor)>) -> Result<()> {
    let mut pending: Vec<Option<(String, ParamKind, Tensor)>> = entries.into_iter().map(Some).collect();
    let mut first_err: Option<CfpError> = None;
    module.visit_mut("", &mut |name, _, slot| {
        if first_err.is_some() {
            return;
        }
        let found = pending
            .iter_mut()
            .find(|e| e.as_ref().is_some_and(|(n, _, _)| n == name))
            .and_then(Option::take);
        match found {
            None => first_err = Some(CfpError::MissingParam(name.to_owned())),
            Some((_, _, t)) if t.shape() != slot.shape() => {
                first_err = Some(CfpError::ShapeMismatch {
                    op: "load parameters",
                    lhs: t.shape().to_vec(),
                    rhs: slot.shape().to_vec(),
                })
            }
            Some((_, _, t)) => *slot = t,
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    if let Some((name, _, _)) = pending.into_iter().flatten().next() {
        return Err(CfpError::InvalidArgument(format!("archive holds unknown parameter {name}")));
    }
    Ok(())
}

pub fn save_params(path: impl AsRef<Path>, module: &dyn Module) -> Result<()> {
    write_atomic(path.as_ref(), &encode_params(module)?)
}

pub fn load_params(path: impl AsRef<Path>, module: &mut dyn Module) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CfpError::io(path, e))?;
    apply_params(module, decode_params(&bytes)?)
}
