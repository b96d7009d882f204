//! Shared framing for the NDX* binary files: 4-byte magic, `u32` LE version,
//! `u32` LE header length, UTF-8 JSON header, raw little-endian payload.

use crate::{Error, Result};

pub(crate) fn frame(magic: &[u8; 4], version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Splits a framed file into (header JSON bytes, payload bytes).
pub(crate) fn unframe<'a>(
    magic: &[u8; 4],
    supported: u32,
    bytes: &'a [u8],
) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let n = bytes.len().min(4);
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedPayload("missing version/header length".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != supported {
        return Err(Error::VersionUnsupported(version));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if rest.len() < hlen {
        return Err(Error::TruncatedPayload(format!(
            "header needs {hlen} bytes, {} available",
            rest.len()
        )));
    }
    Ok(rest.split_at(hlen))
}

pub(crate) fn expect_len(payload: &[u8], expected: usize) -> Result<()> {
    match payload.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(Error::TruncatedPayload(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        ))),
        std::cmp::Ordering::Greater => Err(Error::InvalidInput(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        ))),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

pub(crate) fn f64s_le(values: impl IntoIterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f64s(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
