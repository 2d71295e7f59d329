//! `RTC1` checkpoints: named `RTT1` tensors.
//!
//! Layout: magic `RTC1`, little-endian `u32` section count, then per section
//! a `u32` name length, the UTF-8 name and one `RTT1` tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::Params;
use crate::error::{Result, RtcError};
use crate::tensor::io;

pub const MAGIC: &[u8; 4] = b"RTC1";

pub fn encode(params: &Params) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&io::encode(t));
    }
    out
}

fn parse_error(offset: usize, msg: impl Into<String>) -> RtcError {
    RtcError::Parse {
        offset,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], pos: usize) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| parse_error(bytes.len(), "truncated section header"))
}

pub fn decode(bytes: &[u8]) -> Result<Params> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(parse_error(0, "missing RTC1 magic"));
    }
    let count = read_u32(bytes, 4)?;
    let mut pos = 8;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(bytes, pos)? as usize;
        pos += 4;
        let name = bytes
            .get(pos..pos + len)
            .ok_or_else(|| parse_error(bytes.len(), "truncated section name"))?;
        let name = std::str::from_utf8(name).map_err(|_| parse_error(pos, "section name is not UTF-8"))?;
        pos += len;
        let (t, used) = io::decode(&bytes[pos..]).map_err(|e| match e {
            RtcError::Parse { offset, msg } => parse_error(pos + offset, msg),
            other => other,
        })?;
        if map.insert(name.to_string(), t).is_some() {
            return Err(parse_error(pos, format!("duplicate section {name}")));
        }
        pos += used;
    }
    if pos != bytes.len() {
        return Err(parse_error(pos, "trailing bytes after the last section"));
    }
    Ok(Params::from_map(map))
}

pub fn save(params: &Params, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Params> {
    decode(&fs::read(path)?)
}
