//! Integer label maps and their binary PGM (P5) encoding.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Result, RtcError};

/// Row-major `h × w` label map; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(invalid(format!(
                "label map {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Self {
        Self {
            h,
            w,
            data: vec![label; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.data[y * self.w + x] = label;
    }

    /// Distinct labels present, ascending.
    pub fn labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }
}

pub fn encode_pgm(mask: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    out.extend_from_slice(&mask.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn error(&self, msg: &str) -> RtcError {
        RtcError::Parse {
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_space(&mut self) -> Result<()> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return Err(self.error("expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.error("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RtcError::Parse {
                offset: start,
                msg: "number out of range".into(),
            })
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let mut hd = Header { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return Err(hd.error("missing P5 magic"));
    }
    hd.pos = 2;
    hd.skip_space()?;
    let w = hd.number()?;
    hd.skip_space()?;
    let h = hd.number()?;
    hd.skip_space()?;
    let maxval_at = hd.pos;
    let maxval = hd.number()?;
    if !(1..=255).contains(&maxval) {
        return Err(RtcError::Parse {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    if !bytes.get(hd.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(hd.error("expected one whitespace byte before the raster"));
    }
    hd.pos += 1;
    if w == 0 || h == 0 {
        return Err(hd.error("zero image extent"));
    }
    let need = w.checked_mul(h).ok_or_else(|| hd.error("image too large"))?;
    let payload = &bytes[hd.pos..];
    if payload.len() < need {
        return Err(RtcError::Parse {
            offset: bytes.len(),
            msg: format!("raster truncated: need {need} bytes, have {}", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(RtcError::Parse {
            offset: hd.pos + need,
            msg: "trailing bytes after raster".into(),
        });
    }
    if let Some(i) = payload.iter().position(|&v| v as usize > maxval) {
        return Err(RtcError::Parse {
            offset: hd.pos + i,
            msg: "pixel exceeds maxval".into(),
        });
    }
    LabelMap::new(h, w, payload.to_vec())
}

pub fn export_mask(mask: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(mask))?;
    Ok(())
}

pub fn import_mask(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_pgm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_bytes() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let bytes = encode_pgm(&m);
        let mut expect = b"P5\n2 2\n255\n".to_vec();
        expect.extend_from_slice(&[0, 1, 2, 0]);
        assert_eq!(bytes, expect);
        assert_eq!(bytes.len(), 15);
    }

    #[test]
    fn empty_mask_payload() {
        let bytes = encode_pgm(&LabelMap::filled(3, 5, 0));
        assert_eq!(&bytes[bytes.len() - 15..], &[0u8; 15]);
        assert_eq!(bytes.len(), b"P5\n5 3\n255\n".len() + 15);
    }

    #[test]
    fn header_comments() {
        let m = decode_pgm(b"P5 # made by hand\n1 2 255\n\x03\x04").unwrap();
        assert_eq!((m.height(), m.width()), (2, 1));
        assert_eq!(m.data(), &[3, 4]);
    }

    #[test]
    fn error_offsets() {
        let off = |b: &[u8]| match decode_pgm(b) {
            Err(RtcError::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(off(b"P6\n1 1\n255\n\0"), 0);
        assert_eq!(off(b"P5\nx 1\n255\n\0"), 3);
        assert_eq!(off(b"P5\n1 1\n999\n\0"), 7);
        assert_eq!(off(b"P5\n2 2\n255\n\0\0"), 13);
        assert_eq!(off(b"P5\n1 1\n255\n\0\0"), 12);
        assert_eq!(off(b"P5\n1 1\n2\n\x05"), 9);
    }

    fn sized_map() -> impl Strategy<Value = LabelMap> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<u8>(), h * w).prop_map(move |data| LabelMap::new(h, w, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip(m in sized_map()) {
            prop_assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
        }
    }
}
