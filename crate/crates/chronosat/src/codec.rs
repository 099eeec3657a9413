//! Binary PPM (P6) image and PBM (P4) bitmask codecs: byte-exact,
//! whitespace- and comment-tolerant, with no external decoder dependencies.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::metrics::ChangeMask;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image: {0}")]
    Malformed(String),
}

fn bad(msg: impl Into<String>) -> CodecError {
    CodecError::Malformed(msg.into())
}

/// Reads ASCII integers after the magic, skipping whitespace and `#` line
/// comments, then consumes the single whitespace byte before binary data.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8], magic: &str) -> Result<HeaderReader<'a>, CodecError> {
        if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
            return Err(bad(format!("missing {magic} magic")));
        }
        Ok(HeaderReader { bytes, pos: 2 })
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_int(&mut self) -> Result<usize, CodecError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(bad("expected an integer in the header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header integer out of range"))
    }

    fn binary_payload(mut self) -> Result<&'a [u8], CodecError> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(bad("expected single whitespace before pixel data"));
        }
        self.pos += 1;
        Ok(&self.bytes[self.pos..])
    }
}

/// Encodes [H, W, 3] in [0, 1] as binary PPM, 8 bits per sample.
pub fn ppm_bytes(img: &Tensor) -> Vec<u8> {
    let s = img.shape();
    assert_eq!(s.len(), 3, "image must be [H, W, C], got {s:?}");
    assert_eq!(s[2], 3, "PPM carries exactly 3 channels, got {}", s[2]);
    let (h, w) = (s[0], s[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor, CodecError> {
    let mut hdr = HeaderReader::new(bytes, "P6")?;
    let w = hdr.read_int()?;
    let h = hdr.read_int()?;
    let maxval = hdr.read_int()?;
    if w == 0 || h == 0 {
        return Err(bad("dimensions must be positive"));
    }
    if maxval != 255 {
        return Err(bad(format!("only 8-bit images supported, maxval {maxval}")));
    }
    let payload = hdr.binary_payload()?;
    let need = w * h * 3;
    if payload.len() < need {
        return Err(bad(format!("truncated pixel data: {} of {need} bytes", payload.len())));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![h, w, 3], data))
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<(), CodecError> {
    Ok(fs::write(path, ppm_bytes(img))?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor, CodecError> {
    parse_ppm(&fs::read(path)?)
}

/// Encodes a change mask as binary PBM: rows packed most-significant-bit
/// first, each row padded to a whole byte.
pub fn pbm_bytes(mask: &ChangeMask) -> Vec<u8> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let row_bytes = w.div_ceil(8);
    for i in 0..h {
        let mut row = vec![0u8; row_bytes];
        for j in 0..w {
            if mask.get(i, j) {
                row[j / 8] |= 0x80 >> (j % 8);
            }
        }
        out.extend(row);
    }
    out
}

pub fn parse_pbm(bytes: &[u8]) -> Result<ChangeMask, CodecError> {
    let mut hdr = HeaderReader::new(bytes, "P4")?;
    let w = hdr.read_int()?;
    let h = hdr.read_int()?;
    if w == 0 || h == 0 {
        return Err(bad("dimensions must be positive"));
    }
    let payload = hdr.binary_payload()?;
    let row_bytes = w.div_ceil(8);
    if payload.len() < row_bytes * h {
        return Err(bad(format!(
            "truncated bitmap: {} of {} bytes",
            payload.len(),
            row_bytes * h
        )));
    }
    let mut bits = vec![0u8; w * h];
    for i in 0..h {
        for j in 0..w {
            let byte = payload[i * row_bytes + j / 8];
            bits[i * w + j] = (byte >> (7 - j % 8)) & 1;
        }
    }
    Ok(ChangeMask::new(w, h, bits))
}

pub fn write_pbm(path: &Path, mask: &ChangeMask) -> Result<(), CodecError> {
    Ok(fs::write(path, pbm_bytes(mask))?)
}

pub fn read_pbm(path: &Path) -> Result<ChangeMask, CodecError> {
    parse_pbm(&fs::read(path)?)
}
