//! Minimal ZIP reader/writer: stored and DEFLATE members, no ZIP64, no
//! encryption. Members are located through the central directory.

use crate::data::crc32::crc32;
use crate::data::inflate::inflate;
use crate::error::FormatError;

const LOCAL_SIG: u32 = 0x0403_4b50;
const CENTRAL_SIG: u32 = 0x0201_4b50;
const EOCD_SIG: u32 = 0x0605_4b50;
const EOCD_LEN: usize = 22;

fn u16_at(b: &[u8], off: usize, what: &str) -> Result<u16, FormatError> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| FormatError::Truncated(what.to_string()))
}

fn u32_at(b: &[u8], off: usize, what: &str) -> Result<u32, FormatError> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| FormatError::Truncated(what.to_string()))
}

#[derive(Debug, Clone)]
pub struct ZipEntry {
    pub name: String,
    pub method: u16,
    pub crc: u32,
    pub compressed_size: usize,
    pub size: usize,
    local_offset: usize,
}

/// A parsed archive borrowing its bytes.
pub struct ZipArchive<'a> {
    bytes: &'a [u8],
    entries: Vec<ZipEntry>,
}

impl<'a> ZipArchive<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self, FormatError> {
        let first = u32_at(bytes, 0, "zip archive shorter than a signature")?;
        if first != LOCAL_SIG && first != EOCD_SIG {
            return Err(FormatError::BadZipSignature {
                offset: 0,
                found: first,
            });
        }
        if bytes.len() < EOCD_LEN {
            return Err(FormatError::Truncated("end of central directory".into()));
        }
        // the EOCD record sits at the end, followed by at most 65535 comment bytes
        let lowest = bytes.len().saturating_sub(EOCD_LEN + 0xFFFF);
        let eocd = (lowest..=bytes.len() - EOCD_LEN)
            .rev()
            .find(|&i| u32_at(bytes, i, "").ok() == Some(EOCD_SIG))
            .ok_or_else(|| FormatError::Truncated("end of central directory not found".into()))?;
        let disk = u16_at(bytes, eocd + 4, "eocd")?;
        let cd_disk = u16_at(bytes, eocd + 6, "eocd")?;
        if disk != 0 || cd_disk != 0 {
            return Err(FormatError::UnsupportedZip("multi-disk archive".into()));
        }
        let n = u16_at(bytes, eocd + 10, "eocd")? as usize;
        let cd_size = u32_at(bytes, eocd + 12, "eocd")?;
        let cd_off = u32_at(bytes, eocd + 16, "eocd")?;
        if cd_size == u32::MAX || cd_off == u32::MAX || n == 0xFFFF {
            return Err(FormatError::UnsupportedZip("zip64 archive".into()));
        }
        let mut off = cd_off as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let sig = u32_at(bytes, off, "central directory entry")?;
            if sig != CENTRAL_SIG {
                return Err(FormatError::BadZipSignature { offset: off, found: sig });
            }
            let flags = u16_at(bytes, off + 8, "central directory entry")?;
            let method = u16_at(bytes, off + 10, "central directory entry")?;
            let crc = u32_at(bytes, off + 16, "central directory entry")?;
            let csize = u32_at(bytes, off + 20, "central directory entry")?;
            let size = u32_at(bytes, off + 24, "central directory entry")?;
            let name_len = u16_at(bytes, off + 28, "central directory entry")? as usize;
            let extra_len = u16_at(bytes, off + 30, "central directory entry")? as usize;
            let comment_len = u16_at(bytes, off + 32, "central directory entry")? as usize;
            let local = u32_at(bytes, off + 42, "central directory entry")?;
            let name = bytes
                .get(off + 46..off + 46 + name_len)
                .ok_or_else(|| FormatError::Truncated("central directory file name".into()))?;
            if flags & 1 != 0 {
                return Err(FormatError::UnsupportedZip("encrypted member".into()));
            }
            if csize == u32::MAX || size == u32::MAX || local == u32::MAX {
                return Err(FormatError::UnsupportedZip("zip64 member".into()));
            }
            entries.push(ZipEntry {
                name: String::from_utf8_lossy(name).into_owned(),
                method,
                crc,
                compressed_size: csize as usize,
                size: size as usize,
                local_offset: local as usize,
            });
            off += 46 + name_len + extra_len + comment_len;
        }
        Ok(ZipArchive { bytes, entries })
    }

    pub fn entries(&self) -> &[ZipEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<&ZipEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Decompresses a member and verifies its size and CRC-32.
    pub fn read(&self, entry: &ZipEntry) -> Result<Vec<u8>, FormatError> {
        let off = entry.local_offset;
        let sig = u32_at(self.bytes, off, "local file header")?;
        if sig != LOCAL_SIG {
            return Err(FormatError::BadZipSignature { offset: off, found: sig });
        }
        let name_len = u16_at(self.bytes, off + 26, "local file header")? as usize;
        let extra_len = u16_at(self.bytes, off + 28, "local file header")? as usize;
        let start = off + 30 + name_len + extra_len;
        let raw = start
            .checked_add(entry.compressed_size)
            .and_then(|end| self.bytes.get(start..end))
            .ok_or_else(|| FormatError::Truncated(format!("data of member `{}`", entry.name)))?;
        let data = match entry.method {
            0 => raw.to_vec(),
            8 => inflate(raw, entry.size)?,
            m => return Err(FormatError::UnsupportedCompression(m)),
        };
        if data.len() != entry.size {
            return Err(FormatError::SizeMismatch {
                member: entry.name.clone(),
                expected: entry.size,
                actual: data.len(),
            });
        }
        let actual = crc32(&data);
        if actual != entry.crc {
            return Err(FormatError::CrcMismatch {
                member: entry.name.clone(),
                expected: entry.crc,
                actual,
            });
        }
        Ok(data)
    }

    pub fn read_by_name(&self, name: &str) -> Result<Vec<u8>, FormatError> {
        let e = self
            .find(name)
            .ok_or_else(|| FormatError::MissingMember(name.to_string()))?;
        self.read(e)
    }
}

/// Builds an archive in memory.
#[derive(Default)]
pub struct ZipWriter {
    out: Vec<u8>,
    central: Vec<u8>,
    count: u16,
}

impl ZipWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an uncompressed member.
    pub fn add_stored(&mut self, name: &str, data: &[u8]) {
        self.add_raw(name, 0, data, crc32(data), data.len());
    }

    /// Adds a member whose payload is already encoded with `method`.
    pub fn add_raw(&mut self, name: &str, method: u16, payload: &[u8], crc: u32, size: usize) {
        let offset = self.out.len() as u32;
        let name_b = name.as_bytes();
        let mut header = Vec::with_capacity(30 + name_b.len());
        header.extend_from_slice(&LOCAL_SIG.to_le_bytes());
        header.extend_from_slice(&20u16.to_le_bytes()); // version needed
        header.extend_from_slice(&0u16.to_le_bytes()); // flags
        header.extend_from_slice(&method.to_le_bytes());
        header.extend_from_slice(&0u16.to_le_bytes()); // mod time
        header.extend_from_slice(&0x21u16.to_le_bytes()); // mod date 1980-01-01
        header.extend_from_slice(&crc.to_le_bytes());
        header.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        header.extend_from_slice(&(size as u32).to_le_bytes());
        header.extend_from_slice(&(name_b.len() as u16).to_le_bytes());
        header.extend_from_slice(&0u16.to_le_bytes()); // extra
        self.out.extend_from_slice(&header);
        self.out.extend_from_slice(name_b);
        self.out.extend_from_slice(payload);

        let c = &mut self.central;
        c.extend_from_slice(&CENTRAL_SIG.to_le_bytes());
        c.extend_from_slice(&20u16.to_le_bytes()); // version made by
        c.extend_from_slice(&header[4..30]);
        c.extend_from_slice(&0u16.to_le_bytes()); // comment
        c.extend_from_slice(&0u16.to_le_bytes()); // disk
        c.extend_from_slice(&0u16.to_le_bytes()); // internal attrs
        c.extend_from_slice(&0u32.to_le_bytes()); // external attrs
        c.extend_from_slice(&offset.to_le_bytes());
        c.extend_from_slice(name_b);
        self.count += 1;
    }

    pub fn finish(mut self) -> Vec<u8> {
        let cd_off = self.out.len() as u32;
        let cd_size = self.central.len() as u32;
        self.out.extend_from_slice(&self.central);
        self.out.extend_from_slice(&EOCD_SIG.to_le_bytes());
        self.out.extend_from_slice(&[0; 4]);
        self.out.extend_from_slice(&self.count.to_le_bytes());
        self.out.extend_from_slice(&self.count.to_le_bytes());
        self.out.extend_from_slice(&cd_size.to_le_bytes());
        self.out.extend_from_slice(&cd_off.to_le_bytes());
        self.out.extend_from_slice(&0u16.to_le_bytes());
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stored_round_trip() {
        let mut w = ZipWriter::new();
        w.add_stored("a.txt", b"alpha");
        w.add_stored("b.bin", &[0u8, 1, 2, 255]);
        let bytes = w.finish();
        let z = ZipArchive::parse(&bytes).unwrap();
        assert_eq!(z.entries().len(), 2);
        assert_eq!(z.read_by_name("a.txt").unwrap(), b"alpha");
        assert_eq!(z.read_by_name("b.bin").unwrap(), vec![0, 1, 2, 255]);
        assert_eq!(
            z.read_by_name("c").unwrap_err(),
            FormatError::MissingMember("c".into())
        );
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            ZipArchive::parse(b"GIF89a........................"),
            Err(FormatError::BadZipSignature { offset: 0, .. })
        ));
        assert!(matches!(ZipArchive::parse(b"PK"), Err(FormatError::Truncated(_))));

        let mut w = ZipWriter::new();
        w.add_raw("x", 12, b"zz", crc32(b"zz"), 2);
        let bytes = w.finish();
        let z = ZipArchive::parse(&bytes).unwrap();
        assert_eq!(
            z.read_by_name("x").unwrap_err(),
            FormatError::UnsupportedCompression(12)
        );

        let mut w = ZipWriter::new();
        w.add_raw("y", 0, b"data", 0xDEAD_BEEF, 4);
        let bytes = w.finish();
        let z = ZipArchive::parse(&bytes).unwrap();
        assert!(matches!(
            z.read_by_name("y"),
            Err(FormatError::CrcMismatch { .. })
        ));
    }
}
