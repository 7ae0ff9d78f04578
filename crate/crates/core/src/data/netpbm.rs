//! Binary Netpbm images: PGM (`P5`) and PPM (`P6`), maxval up to 255.

use crate::error::FormatError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

impl Netpbm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, FormatError> {
        let bad = |m: &str| FormatError::Netpbm(m.to_string());
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(bad("magic is neither P5 nor P6")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            // whitespace and `#` comments between header fields
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                            pos += 1;
                        }
                    }
                    Some(c) if c.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(FormatError::Truncated("netpbm header".into())),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(bad("expected a decimal header field"));
            }
            *f = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| bad("header field out of range"))?;
        }
        // exactly one whitespace byte separates the header from the raster
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("missing whitespace after maxval"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(bad("zero image dimension"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(bad("maxval must be in 1..=255"));
        }
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| bad("image dimensions overflow"))?;
        let data = bytes
            .get(pos..pos + need)
            .ok_or_else(|| FormatError::Truncated("netpbm raster".into()))?;
        if pos + need != bytes.len() {
            return Err(bad("trailing bytes after raster"));
        }
        if data.iter().any(|&v| v as usize > maxval) {
            return Err(bad("sample exceeds maxval"));
        }
        Ok(Netpbm {
            width,
            height,
            channels,
            maxval: maxval as u16,
            data: data.to_vec(),
        })
    }
}
